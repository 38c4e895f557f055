"""Versioned binary checkpoints: model parameters, config echo, Adam state.

Layout (little-endian):
  magic "FLPR" | version u8 | config text (u32 length + utf-8) | step u64 |
  tensor count u32 | tensors (name u16+utf-8, rank u8, dims u32*, f64 data) |
  adam flag u8 | [t u64, then m and v arrays matching the parameter order]

Round-trips are bit-exact; actnorm initialization flags travel as scalar
tensors alongside the parameters.
"""

from __future__ import annotations

import struct

import numpy as np

from ..training import Adam, TrainConfig

MAGIC = b"FLPR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _named_tensors(model):
    out = list(model.parameters())
    for i, an in enumerate(model.actnorms()):
        out.append((f"actnorm{i}/initialized",
                    np.array(1.0 if an.initialized else 0.0)))
    return out


def _write_tensor(f, name: str, arr: np.ndarray):
    nb = name.encode()
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensor(f):
    (nlen,) = struct.unpack("<H", f.read(2))
    name = f.read(nlen).decode()
    (rank,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(path, model, cfg: TrainConfig, step: int = 0,
                    adam: Adam | None = None):
    from .config import format_config

    tensors = _named_tensors(model)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        cfg_bytes = format_config(cfg).encode()
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors:
            arr = t.data if hasattr(t, "data") else t
            _write_tensor(f, name, np.asarray(arr))
        if adam is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", adam.t))
            for m in adam.m:
                f.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
            for v in adam.v:
                f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuilds the model from the embedded config and restores every
    tensor bit-exactly. Returns (model, cfg, step, adam_state_or_None)."""
    from .config import parse_config

    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<B", f.read(1))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", f.read(4))
        cfg = parse_config(f.read(clen).decode())
        (step,) = struct.unpack("<Q", f.read(8))
        (count,) = struct.unpack("<I", f.read(4))
        stored = dict(_read_tensor(f) for _ in range(count))

        model = cfg.build_model()
        expected = _named_tensors(model)
        if len(expected) != len(stored):
            raise CheckpointError(
                f"checkpoint holds {len(stored)} tensors, model needs {len(expected)}")
        params = []
        for name, t in model.parameters():
            if name not in stored:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            if stored[name].shape != t.data.shape:
                raise CheckpointError(
                    f"tensor {name!r}: shape {stored[name].shape} != {t.data.shape}")
            t.data[...] = stored[name]
            params.append(t)
        for i, an in enumerate(model.actnorms()):
            an.initialized = bool(stored[f"actnorm{i}/initialized"])

        (has_adam,) = struct.unpack("<B", f.read(1))
        adam_state = None
        if has_adam:
            (t_step,) = struct.unpack("<Q", f.read(8))
            m = [np.frombuffer(f.read(8 * p.data.size), dtype="<f8").reshape(p.data.shape).copy()
                 for p in params]
            v = [np.frombuffer(f.read(8 * p.data.size), dtype="<f8").reshape(p.data.shape).copy()
                 for p in params]
            adam_state = {"t": t_step, "m": m, "v": v}
    return model, cfg, step, adam_state
