"""On-disk formats.

Binary container (checkpoints, MaSF calibrations)::

    line 1   JSON header terminated by "\\n": format, version, kind, meta and a
             tensor index of {name, shape, offset, nbytes}
    rest     the tensors as little-endian float64, concatenated in index order

Everything else is JSON or JSON-lines text. All writes go through a
temporary file in the target directory followed by ``os.replace``.
"""

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from fmm.exceptions import ConfigHashMismatch, ConfigurationError, DependencyError

CONTAINER_FORMAT = "fmm.container"
CONTAINER_VERSION = 1
SCHEMA_VERSION = 1


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    atomic_write(path, dumps_json(obj))


def read_json(path, producer=None):
    path = Path(path)
    if not path.exists():
        raise DependencyError(_missing(path, producer), producer)
    return json.loads(path.read_text())


def _missing(path, producer):
    msg = f"missing prerequisite {path}"
    if producer:
        msg += f"; run `{producer}` first"
    return msg


def config_hash(config_dict):
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def check_hash(found, expected, what):
    if found != expected:
        raise ConfigHashMismatch(
            f"{what} was produced with config hash {found}, current config is {expected}"
        )


def dumps_container(kind, meta, tensors):
    index = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    header = {
        "format": CONTAINER_FORMAT,
        "version": CONTAINER_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": index,
    }
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(blobs)


def loads_container(data, kind=None):
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    if header.get("format") != CONTAINER_FORMAT or header.get("version") != CONTAINER_VERSION:
        raise ConfigurationError(f"unsupported container header: {header.get('format')} v{header.get('version')}")
    if kind is not None and header.get("kind") != kind:
        raise ConfigurationError(f"expected a {kind} container, found {header.get('kind')}")
    body = data[nl + 1 :]
    tensors = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        arr = np.frombuffer(body[start : start + entry["nbytes"]], dtype="<f8")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return header["meta"], tensors


def read_container(path, kind=None, producer=None):
    path = Path(path)
    if not path.exists():
        raise DependencyError(_missing(path, producer), producer)
    return loads_container(path.read_bytes(), kind)


# -- checkpoints and calibrations ------------------------------------------


def save_checkpoint(model, path, extra=None):
    meta = {"config": model.config.to_dict(), "metadata": model.metadata}
    if extra:
        meta.update(extra)
    atomic_write(path, dumps_container("checkpoint", meta, model.params))


def load_checkpoint(path, producer=None):
    from fmm.model import ModelConfig, TransformerModel

    meta, tensors = read_container(path, "checkpoint", producer)
    model = TransformerModel(ModelConfig.from_dict(meta["config"]), tensors, meta.get("metadata", {}))
    model.check_shapes()
    return model, meta


def save_calibration(calibration, path, extra=None):
    meta = {"provenance": calibration.provenance}
    if extra:
        meta.update(extra)
    tensors = {"stage1": calibration.stage1, "stage2": calibration.stage2, "stage3": calibration.stage3}
    atomic_write(path, dumps_container("masf_calibration", meta, tensors))


def load_calibration(path, producer=None):
    from fmm.masf import MaSFCalibration

    meta, t = read_container(path, "masf_calibration", producer)
    return MaSFCalibration(t["stage1"], t["stage2"], t["stage3"], meta.get("provenance", {})), meta


def write_jsonl(path, header, records):
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(r, sort_keys=True) for r in records)
    atomic_write(path, "\n".join(lines) + "\n")


def read_jsonl(path, producer=None):
    path = Path(path)
    if not path.exists():
        raise DependencyError(_missing(path, producer), producer)
    lines = path.read_text().splitlines()
    return json.loads(lines[0]), [json.loads(l) for l in lines[1:]]
