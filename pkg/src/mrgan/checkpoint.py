"""Binary checkpoints of named float32 tensors.

Layout (little endian): magic ``MRGF``, u32 version, u32 tensor count, then
per tensor a u16 name length, the UTF-8 name, u8 rank, rank x u32 dims and
the raw float32 data. Metadata (JSON), optimizer buffers and the RNG state
are stored as ordinary named tensors. A file is parsed completely before
any of it is applied.
"""

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRGF"
VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"cannot store tensor {name!r}")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_tensors(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {buf[:4]!r}")
    if len(buf) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"{path}: tensor {name!r} truncated at byte {len(buf)}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated at byte {pos}: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes after byte {pos}")
    return out


def encode_json(obj):
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_json(arr):
    return json.loads(np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8"))


def _int_to_chunks(v, n=8):
    return [(v >> (16 * i)) & 0xFFFF for i in range(n)]


def _chunks_to_int(chunks):
    return sum(int(c) << (16 * i) for i, c in enumerate(chunks))


def rng_state_array(rng):
    """PCG64 state as exactly representable float32 values (16-bit chunks)."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported bit generator {st['bit_generator']}")
    vals = _int_to_chunks(st["state"]["state"]) + _int_to_chunks(st["state"]["inc"])
    vals += [st["has_uint32"]] + _int_to_chunks(st["uinteger"], 2)
    return np.array(vals, dtype=np.float32)


def rng_from_array(arr):
    a = [int(v) for v in np.asarray(arr)]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": _chunks_to_int(a[0:8]), "inc": _chunks_to_int(a[8:16])},
        "has_uint32": a[16],
        "uinteger": _chunks_to_int(a[17:19]),
    }
    return rng


def _int_array(values):
    """Non-negative ints as 16-bit float32 chunks (4 per value)."""
    return np.array([c for v in values for c in _int_to_chunks(int(v), 4)], dtype=np.float32)


def _int_list(arr):
    a = [int(v) for v in np.asarray(arr)]
    return [_chunks_to_int(a[i:i + 4]) for i in range(0, len(a), 4)]


def save_checkpoint(path, models, optimizers, rng, meta, sampler=None):
    """``models``/``optimizers``: prefix -> object. NaN parameters are refused."""
    tensors = {META_KEY: encode_json(meta)}
    for prefix, model in models.items():
        for name, p in model.params.items():
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"refusing to checkpoint non-finite parameter {prefix}.{name}")
            tensors[f"{prefix}.{name}"] = p.data
    for prefix, opt in optimizers.items():
        for key, arr in opt.state_dict().items():
            tensors[f"opt.{prefix}.{key}"] = arr
    if rng is not None:
        tensors["rng"] = rng_state_array(rng)
    if sampler is not None:
        st = sampler.state()
        tensors["sampler.perm"] = _int_array(st["perm"])
        tensors["sampler.cursor"] = _int_array([st["cursor"]])
    write_tensors(path, tensors)


class Checkpoint:
    def __init__(self, tensors):
        if META_KEY not in tensors:
            raise CheckpointError("checkpoint has no metadata")
        self.meta = decode_json(tensors[META_KEY])
        self.tensors = tensors

    def params(self, prefix):
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def optimizer_state(self, prefix):
        return self.params(f"opt.{prefix}")

    def rng(self):
        return rng_from_array(self.tensors["rng"]) if "rng" in self.tensors else None

    def sampler_state(self):
        if "sampler.perm" not in self.tensors:
            return None
        return {"perm": np.array(_int_list(self.tensors["sampler.perm"]), dtype=np.int64),
                "cursor": _int_list(self.tensors["sampler.cursor"])[0]}


def load_checkpoint(path, expect_arch=None):
    ckpt = Checkpoint(read_tensors(path))
    if expect_arch is not None and ckpt.meta.get("arch") != expect_arch:
        raise CheckpointError(f"architecture mismatch: checkpoint holds {ckpt.meta.get('arch')!r}, "
                              f"expected {expect_arch!r}")
    return ckpt


def restore(ckpt, models, optimizers):
    """Apply a parsed checkpoint to rebuilt models and optimizers (all-or-nothing)."""
    staged = {}
    for prefix, model in models.items():
        arrays = ckpt.params(prefix)
        names = {full for full, _, _ in model.param_specs()}
        missing = names - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks {len(missing)} parameters of '{prefix}', "
                                  f"e.g. {sorted(missing)[0]}")
        for full, spec, _ in model.param_specs():
            if arrays[full].shape != spec.shape:
                raise CheckpointError(f"{prefix}.{full}: stored shape {arrays[full].shape} vs {spec.shape}")
        staged[prefix] = {n: arrays[n] for n in names}
    for prefix, model in models.items():
        model.load_params(staged[prefix])
    for prefix, opt in optimizers.items():
        state = ckpt.optimizer_state(prefix)
        if state:
            opt.load_state_dict(state)
