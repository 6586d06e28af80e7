"""Masked transformer encoder classifier with hand-written reverse-mode gradients.

The model is a pre-layer-norm encoder. Token ids are embedded, summed with
learned positional embeddings, passed through ``num_layers`` blocks and a
final layer norm, and classified from the cls position. Padding keys are
hidden from attention; masked tokens are ordinary (attended) tokens whose id
is ``mask_token_id``.
"""

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from fmm import _layers
from fmm.exceptions import ConfigurationError, ContractViolation, NumericError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    max_seq_len: int = 16
    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 2
    num_classes: int = 2
    pad_token_id: int = 0
    cls_token_id: int = 1
    mask_token_id: int = 2
    ffn_dim: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError("num_layers must be >= 1")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim={self.hidden_dim} not divisible by num_heads={self.num_heads}"
            )
        special = (self.pad_token_id, self.cls_token_id, self.mask_token_id)
        if len(set(special)) != 3:
            raise ConfigurationError("pad/cls/mask token ids must be distinct")
        if any(s < 0 or s >= self.vocab_size for s in special):
            raise ConfigurationError("special token ids must be < vocab_size")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.max_seq_len < 2:
            raise ConfigurationError("max_seq_len must be >= 2")

    @property
    def ffn_width(self):
        return self.ffn_dim or 4 * self.hidden_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Observation:
    """One sequence. ``tokens`` starts with cls; padding only as a suffix."""

    tokens: tuple
    label: int
    maskable: tuple
    length: int

    @classmethod
    def from_tokens(cls, tokens, label, pad_token_id=0, cls_token_id=1):
        tokens = tuple(int(t) for t in tokens)
        length = sum(1 for t in tokens if t != pad_token_id)
        maskable = tuple(i for i in range(length) if tokens[i] != cls_token_id)
        return cls(tokens, int(label), maskable, length)

    def validate(self, config):
        if len(self.tokens) > config.max_seq_len:
            raise ConfigurationError(
                f"sequence length {len(self.tokens)} exceeds max_seq_len={config.max_seq_len}"
            )
        if not self.tokens or self.tokens[0] != config.cls_token_id:
            raise ContractViolation("cls token must be at position 0")
        if any(t < 0 or t >= config.vocab_size for t in self.tokens):
            raise ContractViolation("token id out of vocabulary range")
        if any(t == config.pad_token_id for t in self.tokens[: self.length]):
            raise ContractViolation("padding must be a suffix")
        if any(t != config.pad_token_id for t in self.tokens[self.length :]):
            raise ContractViolation("padding must be a suffix")
        if not 0 <= self.label < config.num_classes:
            raise ContractViolation(f"label {self.label} out of range")
        if any(p <= 0 or p >= self.length for p in self.maskable):
            raise ContractViolation("maskable positions must exclude cls and padding")


def apply_mask(observation, positions, mask_token_id):
    """Return a copy of ``observation`` with ``positions`` replaced by the mask id."""
    positions = set(int(p) for p in positions)
    if not positions <= set(observation.maskable):
        bad = sorted(positions - set(observation.maskable))
        raise ContractViolation(f"positions {bad} are not maskable")
    tokens = list(observation.tokens)
    for p in positions:
        tokens[p] = mask_token_id
    return replace(observation, tokens=tuple(tokens))


def stack_observations(observations, pad_token_id=0):
    """Pad a list of observations into ``(tokens, lengths)`` arrays."""
    T = max(len(o.tokens) for o in observations)
    tokens = np.full((len(observations), T), pad_token_id, dtype=np.int64)
    for i, o in enumerate(observations):
        tokens[i, : len(o.tokens)] = o.tokens
    lengths = np.array([o.length for o in observations], dtype=np.int64)
    return tokens, lengths


@dataclass(frozen=True)
class EmbeddingTrace:
    """Layer-normalized activations, shape (layers, T, H), for one observation."""

    activations: np.ndarray
    valid_len: int


@dataclass(frozen=True)
class GradientBundle:
    d_f_d_h: np.ndarray
    d_f_d_x: np.ndarray
    target_class: int


def _check_finite(x, layer, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what} at layer {layer}", layer=layer)


def init_params(config, rng):
    H, V, C = config.hidden_dim, config.vocab_size, config.num_classes
    F = config.ffn_width

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    params = {
        "tok_emb": rng.normal(0.0, 0.5, size=(V, H)),
        "pos_emb": rng.normal(0.0, 0.1, size=(config.max_seq_len, H)),
    }
    for i in range(config.num_layers):
        pre = f"l{i}."
        params[pre + "ln1.g"] = np.ones(H)
        params[pre + "ln1.b"] = np.zeros(H)
        for name in ("q", "k", "v", "o"):
            params[pre + f"attn.w{name}"] = dense(H, H)
            params[pre + f"attn.b{name}"] = np.zeros(H)
        params[pre + "ln2.g"] = np.ones(H)
        params[pre + "ln2.b"] = np.zeros(H)
        params[pre + "mlp.w1"] = dense(H, F)
        params[pre + "mlp.b1"] = np.zeros(F)
        params[pre + "mlp.w2"] = dense(F, H) * 0.5
        params[pre + "mlp.b2"] = np.zeros(H)
    params["lnf.g"] = np.ones(H)
    params["lnf.b"] = np.zeros(H)
    params["head.w"] = dense(H, C) * 0.1
    params["head.b"] = np.zeros(C)
    return params


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class TransformerModel:
    """Parameters plus the forward/backward passes.

    Treat instances as immutable once training has finished; all inference
    methods are pure functions of ``params``.
    """

    config: ModelConfig
    params: dict
    metadata: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config, rng=None):
        rng = np.random.default_rng(config.seed) if rng is None else rng
        return cls(config, init_params(config, rng))

    @property
    def token_embedding(self):
        return self.params["tok_emb"]

    def check_shapes(self):
        expected = init_params(self.config, np.random.default_rng(0))
        if set(expected) != set(self.params):
            raise ConfigurationError("parameter names do not match config")
        for name, arr in expected.items():
            if self.params[name].shape != arr.shape:
                raise ConfigurationError(
                    f"{name}: shape {self.params[name].shape} != {arr.shape}"
                )
            if not np.all(np.isfinite(self.params[name])):
                raise NumericError(f"non-finite values in parameter {name}")

    # -- core passes -------------------------------------------------------

    def _validate_batch(self, tokens, lengths):
        tokens = np.asarray(tokens)
        lengths = np.asarray(lengths)
        if tokens.ndim != 2 or lengths.shape != (tokens.shape[0],):
            raise ConfigurationError(
                f"expected tokens (n, T) and lengths (n,), got {tokens.shape} and {lengths.shape}"
            )
        if tokens.shape[1] > self.config.max_seq_len:
            raise ConfigurationError(
                f"sequence length {tokens.shape[1]} exceeds max_seq_len={self.config.max_seq_len}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ConfigurationError("token id out of vocabulary range")
        return tokens, lengths

    def run(self, tokens, lengths, token_vectors=None, keep_cache=False):
        """Forward pass returning ``(logits, normed, cache)``.

        ``token_vectors`` overrides the token-embedding lookup (the quantity
        input gradients are taken with respect to). ``normed`` holds one
        layer-normalized activation per block: the input to the next block,
        or the final layer norm for the last block.
        """
        tokens, lengths = self._validate_batch(tokens, lengths)
        p = self.params
        cfg = self.config
        T = tokens.shape[1]
        if token_vectors is None:
            token_vectors = p["tok_emb"][tokens]
        x = token_vectors + p["pos_emb"][:T]
        key_valid = np.arange(T)[None, :] < lengths[:, None]
        caches = []
        normed = []
        a = None
        for i in range(cfg.num_layers):
            lp = _sub(p, f"l{i}.")
            a, c_ln1 = _layers.layer_norm_forward(x, lp["ln1.g"], lp["ln1.b"])
            if i > 0:
                normed.append(a)
            att, c_att = _layers.attention_forward(
                a, _sub(lp, "attn."), cfg.num_heads, key_valid
            )
            x = x + att
            b, c_ln2 = _layers.layer_norm_forward(x, lp["ln2.g"], lp["ln2.b"])
            m, c_mlp = _layers.mlp_forward(b, _sub(lp, "mlp."))
            x = x + m
            _check_finite(x, i, "activation")
            caches.append((c_ln1, c_att, c_ln2, c_mlp))
        f, c_lnf = _layers.layer_norm_forward(x, p["lnf.g"], p["lnf.b"])
        normed.append(f)
        logits = f[:, 0] @ p["head.w"] + p["head.b"]
        _check_finite(logits, cfg.num_layers, "logit")
        cache = (caches, c_lnf, f, T) if keep_cache else None
        return logits, normed, cache

    def backward(self, cache, dlogits, param_grads=True):
        """Backpropagate ``dlogits`` (n, C); returns ``(grads, d_token_vectors)``."""
        caches, c_lnf, f, T = cache
        p = self.params
        cfg = self.config
        grads = {}
        df = np.zeros_like(f)
        df[:, 0] = dlogits @ p["head.w"].T
        if param_grads:
            grads["head.w"] = f[:, 0].T @ dlogits
            grads["head.b"] = dlogits.sum(axis=0)
        dx, g = _layers.layer_norm_backward(df, c_lnf)
        grads["lnf.g"], grads["lnf.b"] = g["g"], g["b"]
        for i in reversed(range(cfg.num_layers)):
            c_ln1, c_att, c_ln2, c_mlp = caches[i]
            pre = f"l{i}."
            db, g_mlp = _layers.mlp_backward(dx, c_mlp)
            dxb, g_ln2 = _layers.layer_norm_backward(db, c_ln2)
            dx = dx + dxb
            da, g_att = _layers.attention_backward(dx, c_att)
            dxa, g_ln1 = _layers.layer_norm_backward(da, c_ln1)
            dx = dx + dxa
            if param_grads:
                for k, v in g_mlp.items():
                    grads[pre + "mlp." + k] = v
                for k, v in g_att.items():
                    grads[pre + "attn." + k] = v
                grads[pre + "ln1.g"], grads[pre + "ln1.b"] = g_ln1["g"], g_ln1["b"]
                grads[pre + "ln2.g"], grads[pre + "ln2.b"] = g_ln2["g"], g_ln2["b"]
        d_token_vectors = dx
        if param_grads:
            grads["pos_emb"] = np.zeros_like(p["pos_emb"])
            grads["pos_emb"][:T] = dx.sum(axis=0)
        return grads, d_token_vectors

    def _logits_cls_only(self, tokens, lengths, token_vectors=None):
        # the head reads position 0 only, so the last block is evaluated
        # for the cls query alone
        tokens, lengths = self._validate_batch(tokens, lengths)
        p = self.params
        cfg = self.config
        T = tokens.shape[1]
        if token_vectors is None:
            token_vectors = p["tok_emb"][tokens]
        x = token_vectors + p["pos_emb"][:T]
        key_valid = np.arange(T)[None, :] < lengths[:, None]
        last = cfg.num_layers - 1
        for i in range(cfg.num_layers):
            lp = _sub(p, f"l{i}.")
            a, _ = _layers.layer_norm_forward(x, lp["ln1.g"], lp["ln1.b"])
            if i == last:
                x = x[:, :1]
                att, _ = _layers.attention_forward(
                    a, _sub(lp, "attn."), cfg.num_heads, key_valid, queries=a[:, :1]
                )
            else:
                att, _ = _layers.attention_forward(a, _sub(lp, "attn."), cfg.num_heads, key_valid)
            x = x + att
            b, _ = _layers.layer_norm_forward(x, lp["ln2.g"], lp["ln2.b"])
            m, _ = _layers.mlp_forward(b, _sub(lp, "mlp."))
            x = x + m
            _check_finite(x, i, "activation")
        f, _ = _layers.layer_norm_forward(x, p["lnf.g"], p["lnf.b"])
        logits = f[:, 0] @ p["head.w"] + p["head.b"]
        _check_finite(logits, cfg.num_layers, "logit")
        return logits

    # -- public API --------------------------------------------------------

    def logits(self, tokens, lengths, token_vectors=None):
        return self._logits_cls_only(tokens, lengths, token_vectors)

    def predict_proba(self, tokens, lengths):
        return _layers.softmax(self.logits(tokens, lengths))

    def predict(self, tokens, lengths):
        # np.argmax returns the first maximum, which is the lowest class index
        return np.argmax(self.predict_proba(tokens, lengths), axis=1)

    def traces(self, tokens, lengths):
        """Stacked layer-normalized activations, shape (n, num_layers, T, H)."""
        _, normed, _ = self.run(tokens, lengths)
        return np.stack(normed, axis=1)

    def forward(self, observation, capture_trace=False):
        observation.validate(self.config)
        tokens, lengths = stack_observations([observation], self.config.pad_token_id)
        logits, normed, _ = self.run(tokens, lengths)
        probs = _layers.softmax(logits)[0]
        trace = None
        if capture_trace:
            acts = np.stack([n[0] for n in normed], axis=0)
            trace = EmbeddingTrace(acts, int(lengths[0]))
        return probs, trace

    def embedding_gradient(self, tokens, lengths, targets, token_vectors=None):
        """Logit of ``targets`` and its gradient w.r.t. the token-embedding vectors.

        Rows of a batch are independent, so one backward pass yields
        per-observation gradients.
        """
        logits, _, cache = self.run(tokens, lengths, token_vectors, keep_cache=True)
        targets = np.asarray(targets)
        dlogits = np.zeros_like(logits)
        dlogits[np.arange(len(targets)), targets] = 1.0
        _, d_h = self.backward(cache, dlogits, param_grads=False)
        if not np.all(np.isfinite(d_h)):
            raise NumericError("non-finite input gradient")
        return logits[np.arange(len(targets)), targets], d_h

    def loss_and_grads(self, tokens, lengths, labels):
        """Mean cross-entropy and its parameter gradients."""
        logits, _, cache = self.run(tokens, lengths, keep_cache=True)
        n = len(labels)
        probs = _layers.softmax(logits)
        loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-300))
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        grads, d_tv = self.backward(cache, dlogits)
        grads["tok_emb"] = np.zeros_like(self.params["tok_emb"])
        np.add.at(grads["tok_emb"], np.asarray(tokens), d_tv)
        return loss, grads

    def copy(self):
        return TransformerModel(
            self.config, {k: v.copy() for k, v in self.params.items()}, dict(self.metadata)
        )


def forward(model, observation, capture_trace=False):
    return model.forward(observation, capture_trace)


def predict(model, observation):
    probs, _ = model.forward(observation)
    return int(np.argmax(probs))


def input_gradient(model, observation, target_class):
    if not 0 <= target_class < model.config.num_classes:
        raise ContractViolation(f"target_class {target_class} out of range")
    tokens, lengths = stack_observations([observation], model.config.pad_token_id)
    _, d_h = model.embedding_gradient(tokens, lengths, [target_class])
    d_h = d_h[0]
    return GradientBundle(d_h, d_h @ model.token_embedding.T, int(target_class))
