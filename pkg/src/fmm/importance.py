"""Token importance measures.

Batch functions take ``(model, tokens, lengths, maskable)`` arrays and
return an ``(n, T)`` float array with NaN at positions that are not
maskable. The explained class is always the model's prediction on the
exact input being explained. Gradient measures differentiate the
pre-softmax logit; occlusion measures use class probabilities.

``model`` is duck-typed: it needs ``config``, ``token_embedding``,
``logits(tokens, lengths, token_vectors=None)`` and
``embedding_gradient(tokens, lengths, targets, token_vectors=None)``.
"""

import itertools
from dataclasses import dataclass, replace

import numpy as np

from fmm._layers import softmax
from fmm.exceptions import ConfigurationError, ContractViolation
from fmm.model import stack_observations

SIGNED = "signed"
ABSOLUTE = "absolute"
IG_SAMPLES = 20
BEAM_WIDTH = 10


@dataclass(frozen=True)
class ImportanceScores:
    scores: np.ndarray
    positions: tuple
    variant: str
    measure: str
    explained_class: int


@dataclass(frozen=True)
class MaskingOrder:
    order: tuple
    produced_by: str


def _probs(model, tokens, lengths, batch_size=1024):
    out = []
    for start in range(0, len(tokens), batch_size):
        sl = slice(start, start + batch_size)
        out.append(softmax(model.logits(tokens[sl], lengths[sl])))
    return np.concatenate(out)


def predicted_class(model, tokens, lengths):
    return np.argmax(_probs(model, tokens, lengths), axis=1)


def _finish(scores, maskable, variant):
    if variant == ABSOLUTE:
        scores = np.abs(scores)
    elif variant != SIGNED:
        raise ConfigurationError(f"unknown variant {variant!r}")
    return np.where(maskable, scores, np.nan)


def _embedding_grad(model, tokens, lengths, targets, scale=1.0):
    tv = model.token_embedding[tokens] * scale
    _, d_h = model.embedding_gradient(tokens, lengths, targets, tv)
    return d_h


def grad_scores(model, tokens, lengths, maskable, norm="l2"):
    """Norm over the vocabulary of the gradient w.r.t. the one-hot input."""
    y = predicted_class(model, tokens, lengths)
    d_h = _embedding_grad(model, tokens, lengths, y)
    d_x = d_h @ model.token_embedding.T  # (n, T, V)
    if norm == "l1":
        s = np.abs(d_x).sum(axis=-1)
    elif norm == "l2":
        s = np.sqrt((d_x * d_x).sum(axis=-1))
    else:
        raise ConfigurationError(f"unknown norm {norm!r}")
    return _finish(s, maskable, ABSOLUTE)


def _pick_token(d_h, E, tokens):
    # d_f_d_x[t, token_t] without materializing the (T, V) gradient
    return np.einsum("nth,nth->nt", d_h, E[tokens])


def input_times_grad_scores(model, tokens, lengths, maskable, variant=SIGNED):
    y = predicted_class(model, tokens, lengths)
    d_h = _embedding_grad(model, tokens, lengths, y)
    return _finish(_pick_token(d_h, model.token_embedding, tokens), maskable, variant)


def integrated_gradient_scores(model, tokens, lengths, maskable, variant=SIGNED, k=IG_SAMPLES):
    """Right-endpoint Riemann sum from the zero one-hot baseline.

    Only token embeddings are scaled by ``i/k``; positional embeddings stay
    at full strength.
    """
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    y = predicted_class(model, tokens, lengths)
    E = model.token_embedding
    total = np.zeros(tokens.shape)
    for i in range(1, k + 1):
        d_h = _embedding_grad(model, tokens, lengths, y, i / k)
        total += _pick_token(d_h, E, tokens)
    return _finish(total / k, maskable, variant)


def leave_one_out_scores(model, tokens, lengths, maskable, variant=SIGNED):
    """``p(y | x) - p(y | x with position i masked)`` for every maskable i."""
    n, T = tokens.shape
    mask_id = model.config.mask_token_id
    base = _probs(model, tokens, lengths)
    y = np.argmax(base, axis=1)
    rows, cols = np.nonzero(maskable & (tokens != mask_id))
    scores = np.zeros((n, T))
    if rows.size:
        occluded = tokens[rows].copy()
        occluded[np.arange(rows.size), cols] = mask_id
        p = _probs(model, occluded, lengths[rows])[np.arange(rows.size), y[rows]]
        scores[rows, cols] = base[rows, y[rows]] - p
    return _finish(scores, maskable, variant)


def random_scores(maskable, rng):
    return np.where(maskable, rng.random(maskable.shape), np.nan)


def order_from_scores(scores, maskable=None):
    """Positions by descending score; ties go to the lower position.

    Works on a 1-d score vector (returns a tuple of indices into it) or on
    an ``(n, T)`` array with NaN at non-maskable positions (returns a list
    of per-row tuples of positions).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        return tuple(int(i) for i in np.argsort(-s, kind="stable"))
    if maskable is None:
        maskable = ~np.isnan(s)
    key = np.where(maskable, -s, np.inf)
    idx = np.argsort(key, axis=1, kind="stable")
    counts = maskable.sum(axis=1)
    return [tuple(int(p) for p in idx[i, : counts[i]]) for i in range(len(s))]


# -- beam search -----------------------------------------------------------


def _masked_prob(model, tokens, length, sets, y):
    batch = np.repeat(tokens[None], len(sets), axis=0)
    for r, s in enumerate(sets):
        batch[r, list(s)] = model.config.mask_token_id
    lengths = np.full(len(sets), length)
    return _probs(model, batch, lengths)[:, y]


def beam_orders(model, tokens, lengths, maskable, beam_width=BEAM_WIDTH, targets=None):
    """Masking orders minimizing the summed target probability along the way.

    Each state is a masking-order prefix scored by the sum, over its own
    prefixes, of the target-class probability. ``targets`` default to the
    prediction on the given input. States reaching the same masked set keep
    only the lower score (ties: lexicographically smaller order), because
    the remainder of the objective depends on the set alone. Candidates of
    all rows are evaluated together, one level at a time.
    """
    if beam_width < 1:
        raise ConfigurationError("beam width must be >= 1")
    tokens = np.asarray(tokens)
    lengths = np.asarray(lengths)
    n, T = tokens.shape
    if targets is None:
        targets = predicted_class(model, tokens, lengths)
    positions = [tuple(int(p) for p in np.flatnonzero(maskable[i])) for i in range(n)]
    beams = [[((), 0, 0.0)] for _ in range(n)]  # (order, bitmask, score)
    bit_of = 1 << np.arange(T, dtype=np.int64)
    for level in range(max((len(p) for p in positions), default=0)):
        rows, parents, new_pos = [], [], []
        for i in range(n):
            if level >= len(positions[i]):
                continue
            for b, (order, bits, score) in enumerate(beams[i]):
                for p in positions[i]:
                    if not bits >> p & 1:
                        rows.append(i)
                        parents.append(b)
                        new_pos.append(p)
        rows = np.asarray(rows)
        new_pos = np.asarray(new_pos)
        parent_bits = np.array([beams[i][b][1] for i, b in zip(rows, parents)], dtype=np.int64)
        child_bits = parent_bits | bit_of[new_pos]
        masked = (child_bits[:, None] & bit_of[None, :]) != 0
        batch = np.where(masked, model.config.mask_token_id, tokens[rows])
        probs = _probs(model, batch, lengths[rows])[np.arange(len(rows)), targets[rows]]
        best = [dict() for _ in range(n)]
        for i, b, p, prob, key in zip(rows.tolist(), parents, new_pos.tolist(),
                                      probs.tolist(), child_bits.tolist()):
            order, _, score = beams[i][b]
            cand = (score + prob, order + (p,))
            cur = best[i].get(key)
            if cur is None or cand < cur:
                best[i][key] = cand
        for i in set(rows.tolist()):
            ranked = sorted(best[i].values())[:beam_width]
            beams[i] = [(order, sum(1 << p for p in order), score) for score, order in ranked]
    return [beams[i][0][0] for i in range(n)]


def beam_search_order(model, tokens, length, positions, beam_width=BEAM_WIDTH, target=None):
    """Beam-search masking order for a single sequence; see :func:`beam_orders`."""
    tokens = np.asarray(tokens)
    maskable = np.zeros((1, tokens.shape[0]), dtype=bool)
    maskable[0, list(positions)] = True
    targets = None if target is None else np.array([target])
    return beam_orders(model, tokens[None], np.array([length]), maskable, beam_width, targets)[0]


def order_objective(model, tokens, length, order, target):
    """Sum over prefixes of the target-class probability (the beam objective)."""
    sets = [frozenset(order[: j + 1]) for j in range(len(order))]
    if not sets:
        return 0.0
    probs = _masked_prob(model, np.asarray(tokens), length, sets, target)
    total = 0.0
    for p in probs:
        total += p
    return total


def exhaustive_order(model, tokens, length, positions, target):
    """Brute-force optimum over all permutations; returns ``(score, order)``."""
    positions = tuple(sorted(positions))
    subsets = [frozenset(c) for r in range(1, len(positions) + 1)
               for c in itertools.combinations(positions, r)]
    probs = dict(zip(subsets, _masked_prob(model, np.asarray(tokens), length, subsets, target)))
    best = None
    for perm in itertools.permutations(positions):
        total = 0.0
        for j in range(len(perm)):
            total += probs[frozenset(perm[: j + 1])]
        if best is None or (total, perm) < best:
            best = (total, perm)
    return best


def orders_to_scores(orders, maskable):
    """Encode masking orders as scores whose descending sort reproduces them."""
    scores = np.full(maskable.shape, np.nan)
    for i, order in enumerate(orders):
        m = len(order)
        for rank, p in enumerate(order):
            scores[i, p] = float(m - rank)
    return scores


# -- registry --------------------------------------------------------------


@dataclass(frozen=True)
class Measure:
    id: str
    variant: str
    recursive: bool
    beam_width: int = BEAM_WIDTH

    def scores(self, model, tokens, lengths, maskable, rng=None):
        if self.id == "grad_l1":
            return grad_scores(model, tokens, lengths, maskable, "l1")
        if self.id == "grad_l2":
            return grad_scores(model, tokens, lengths, maskable, "l2")
        if self.id.startswith("x_grad"):
            return input_times_grad_scores(model, tokens, lengths, maskable, self.variant)
        if self.id.startswith("ig"):
            return integrated_gradient_scores(model, tokens, lengths, maskable, self.variant)
        if self.id.startswith("loo"):
            return leave_one_out_scores(model, tokens, lengths, maskable, self.variant)
        if self.id == "beam":
            return orders_to_scores(beam_orders(model, tokens, lengths, maskable, self.beam_width), maskable)
        if self.id == "random":
            if rng is None:
                raise ConfigurationError("random measure needs an rng")
            return random_scores(maskable, rng)
        raise ConfigurationError(f"unknown measure {self.id!r}")


MEASURES = {
    m.id: m
    for m in (
        Measure("grad_l1", ABSOLUTE, True),
        Measure("grad_l2", ABSOLUTE, True),
        Measure("x_grad_signed", SIGNED, True),
        Measure("x_grad_abs", ABSOLUTE, True),
        Measure("ig_signed", SIGNED, True),
        Measure("ig_abs", ABSOLUTE, True),
        Measure("loo_signed", SIGNED, True),
        Measure("loo_abs", ABSOLUTE, True),
        Measure("beam", SIGNED, False),
        Measure("random", ABSOLUTE, False),
    )
}


def get_measure(measure_id, beam_width=None):
    try:
        m = MEASURES[measure_id]
        return m if beam_width is None else replace(m, beam_width=int(beam_width))
    except KeyError:
        raise ConfigurationError(
            f"unknown measure {measure_id!r}; choose from {sorted(MEASURES)}"
        ) from None


# -- single-observation API ------------------------------------------------


def _single(model, obs):
    tokens, lengths = stack_observations([obs], model.config.pad_token_id)
    maskable = np.zeros(tokens.shape, dtype=bool)
    maskable[0, list(obs.maskable)] = True
    return tokens, lengths, maskable


def _wrap(model, obs, scores, variant, measure):
    tokens, lengths, _ = _single(model, obs)
    y = int(predicted_class(model, tokens, lengths)[0])
    pos = tuple(obs.maskable)
    return ImportanceScores(scores[0, list(pos)], pos, variant, measure, y)


def grad_im(model, obs, norm="l2"):
    s = grad_scores(model, *_single(model, obs), norm=norm)
    return _wrap(model, obs, s, ABSOLUTE, f"grad_{norm}")


def input_times_grad(model, obs, variant=SIGNED):
    s = input_times_grad_scores(model, *_single(model, obs), variant=variant)
    return _wrap(model, obs, s, variant, "x_grad")


def integrated_gradient(model, obs, k=IG_SAMPLES, variant=SIGNED):
    s = integrated_gradient_scores(model, *_single(model, obs), variant=variant, k=k)
    return _wrap(model, obs, s, variant, "ig")


def leave_one_out(model, obs, variant=SIGNED):
    if not obs.maskable:
        raise ContractViolation("observation has no maskable positions")
    s = leave_one_out_scores(model, *_single(model, obs), variant=variant)
    return _wrap(model, obs, s, variant, "loo")


def random_im(obs, rng):
    pos = tuple(obs.maskable)
    return ImportanceScores(rng.random(len(pos)), pos, ABSOLUTE, "random", -1)


def beam_search(model, obs, beam_width=BEAM_WIDTH):
    tokens, lengths, _ = _single(model, obs)
    order = beam_search_order(model, tokens[0], int(lengths[0]), obs.maskable, beam_width)
    return MaskingOrder(order, "beam")


def to_absolute(scores):
    return ImportanceScores(np.abs(scores.scores), scores.positions, ABSOLUTE,
                            scores.measure, scores.explained_class)
