"""CRWB weight bundle format.

All integers are little-endian::

    magic      4 bytes  b"CRWB"
    version    u16      1
    fingerprint u64     blake2b-64 of the canonical config text
    topo_len   u32      length of the UTF-8 config text that follows
    topology   bytes    canonical config text (``key = value`` lines)
    count      u32      number of records
    record*:
        name_len u16, name (UTF-8), ndim u8, dims u32 * ndim,
        data float32 * prod(dims)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rtsep.errors import FormatError, IncompatibleWeightsError
from rtsep.network.config import ModelConfig, from_text
from rtsep.network.model import Model, param_shapes

MAGIC = b"CRWB"
VERSION = 1


@dataclass
class WeightBundle:
    fingerprint: int
    topology: str
    tensors: dict = field(default_factory=dict)

    def config(self) -> ModelConfig:
        return from_text(self.topology)


def encode_bundle(bundle: WeightBundle) -> bytes:
    topo = bundle.topology.encode("utf-8")
    parts = [MAGIC, struct.pack("<HQI", VERSION, bundle.fingerprint, len(topo)), topo,
             struct.pack("<I", len(bundle.tensors))]
    for name, arr in bundle.tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated weight bundle: need {n} bytes at offset {self.pos}, "
                              f"file has {len(self.data)}")
        chunk = self.data[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_bundle(data: bytes) -> WeightBundle:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a CRWB weight bundle (bad magic)")
    version, fingerprint, topo_len = r.unpack("<HQI")
    if version != VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    try:
        topology = r.take(topo_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("topology text is not UTF-8") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = arr
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last record")
    return WeightBundle(fingerprint, topology, tensors)


def bundle_from_model(model: Model) -> WeightBundle:
    cfg = model.config
    return WeightBundle(cfg.fingerprint(), cfg.canonical(), {k: model.params[k] for k in param_shapes(cfg)})


def save_weights(model: Model, path) -> WeightBundle:
    bundle = bundle_from_model(model)
    Path(path).write_bytes(encode_bundle(bundle))
    return bundle


def read_bundle(path) -> WeightBundle:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: no such weight file")
    return decode_bundle(path.read_bytes())


def load_weights(path, config: ModelConfig | None = None) -> WeightBundle:
    """Read and validate a bundle; with ``config`` the topology fingerprints must match."""
    bundle = read_bundle(path)
    if config is not None and bundle.fingerprint != config.fingerprint():
        raise IncompatibleWeightsError(
            f"{path}: weights were saved for topology [{_summary(bundle.topology)}] "
            f"(fingerprint {bundle.fingerprint:016x}) but the target is [{_summary(config.canonical())}] "
            f"(fingerprint {config.fingerprint():016x})"
        )
    target = config or bundle.config()
    if bundle.fingerprint != target.fingerprint():
        raise FormatError(f"{path}: fingerprint does not match the embedded topology")
    expected = param_shapes(target)
    for name, shape in expected.items():
        if name not in bundle.tensors:
            raise FormatError(f"{path}: missing tensor {name}")
        if bundle.tensors[name].shape != shape:
            raise FormatError(f"{path}: tensor {name} has shape {bundle.tensors[name].shape}, expected {shape}")
        if not np.all(np.isfinite(bundle.tensors[name])):
            raise FormatError(f"{path}: tensor {name} has non-finite values")
    return bundle


def load_model(path, config: ModelConfig | None = None, dtype=np.float32) -> Model:
    bundle = load_weights(path, config)
    return Model(config or bundle.config(), bundle.tensors, dtype=dtype)


def _summary(text: str) -> str:
    return "; ".join(line.strip() for line in text.splitlines() if line.strip())
