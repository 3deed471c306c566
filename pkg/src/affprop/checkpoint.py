"""Binary model checkpoints: every parameter, the step counter, rng state.

Layout, all little-endian:

    magic "PAPC" | u32 version | u16 digest length | config digest utf-8
    | u64 step counter | u32 state length | init-rng state json utf-8
    | u32 parameter count
    then per parameter:
    | u16 name length | name utf-8 | u8 group id | u8 rank | u32 dims...
    | float64 values

Loading reads the whole file into a staging dict first and only then
touches the model, so a truncated or mismatched file never leaves the
model half-restored. The parameter sets must match exactly: a missing,
extra, or differently shaped parameter is an error (this is what a
single-task checkpoint loaded into a three-task model trips over).
"""

import json
import struct
from typing import Dict, Tuple

import numpy as np

from .autodiff import Parameter
from .errors import CheckpointError

MAGIC = b"PAPC"
VERSION = 1
_GROUP_IDS = {"fresh": 0, "pretrained": 1}
_GROUP_NAMES = {v: k for k, v in _GROUP_IDS.items()}


def save_checkpoint(model, path, digest: str = "") -> None:
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        dig = digest.encode("utf-8")
        fh.write(struct.pack("<H", len(dig)))
        fh.write(dig)
        fh.write(struct.pack("<Q", model.step))
        state = json.dumps(model.init_rng.bit_generator.state,
                           sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(state)))
        fh.write(state)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<BB", _GROUP_IDS[p.group], p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> Tuple[str, int, dict, Dict[str, Tuple[str, np.ndarray]]]:
    """(config digest, step, rng state, {name: (group, values)})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(size, what):
        nonlocal pos
        if pos + size > len(blob):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = blob[pos:pos + size]
        pos += size
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"not a checkpoint file: bad magic in {path}")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    dig_len = struct.unpack("<H", take(2, "digest length"))[0]
    digest = take(dig_len, "digest").decode("utf-8")
    step = struct.unpack("<Q", take(8, "step"))[0]
    state_len = struct.unpack("<I", take(4, "rng state length"))[0]
    rng_state = json.loads(take(state_len, "rng state").decode("utf-8"))
    count = struct.unpack("<I", take(4, "parameter count"))[0]
    params: Dict[str, Tuple[str, np.ndarray]] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2, "name length"))[0]
        name = take(name_len, "name").decode("utf-8")
        group_id, rank = struct.unpack("<BB", take(2, f"{name} header"))
        if group_id not in _GROUP_NAMES:
            raise CheckpointError(f"unknown parameter group id {group_id}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} shape"))
        n_elems = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * n_elems, f"{name} values"),
                               dtype="<f8").reshape(shape).copy()
        params[name] = (_GROUP_NAMES[group_id], values)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes in checkpoint")
    return digest, step, rng_state, params


def load_checkpoint(model, path) -> str:
    """Restore a model in place; returns the stored config digest."""
    digest, step, rng_state, stored = read_checkpoint(path)
    current = {p.name: p for p in model.parameters()}
    missing = sorted(set(current) - set(stored))
    extra = sorted(set(stored) - set(current))
    if missing or extra:
        raise CheckpointError(
            "checkpoint parameter set does not match the model: "
            f"missing {missing[:3]}{'...' if len(missing) > 3 else ''}, "
            f"unexpected {extra[:3]}{'...' if len(extra) > 3 else ''}")
    for name, (group, values) in stored.items():
        p = current[name]
        if p.data.shape != values.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint has {values.shape}, "
                f"model expects {p.data.shape}")
        if p.group != group:
            raise CheckpointError(
                f"group mismatch for {name}: {group} vs {p.group}")
    for name, (_, values) in stored.items():
        current[name].tensor.data = values
        current[name].tensor.grad = None
    model.step = int(step)
    model.init_rng.bit_generator.state = rng_state
    return digest
