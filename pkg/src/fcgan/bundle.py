"""Versioned binary container for a trained generator/critic pair.

Layout (all integers little-endian)::

    magic      8 bytes   b"FCGANBND"
    version    uint32
    schema     32 bytes  sha256 of the canonical schema JSON
    n_blocks   uint32
    blocks     n_blocks x (uint16 name length, utf-8 name, uint8 ndim,
                           ndim x uint64 dims, float64 values)
    metadata   uint64 length + utf-8 JSON
    checksum   32 bytes  sha256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Encoder, TableSchema
from .networks import CriticNet, GeneratorConfig, GeneratorNet, build_critic, build_generator

MAGIC = b"FCGANBND"
FORMAT_VERSION = 1


class BundleError(Exception):
    pass


class BundleVersionError(BundleError):
    pass


class BundleCorruptError(BundleError):
    pass


class BundleIOError(BundleError, OSError):
    pass


@dataclass
class ModelBundle:
    generator: GeneratorNet
    critic: CriticNet
    encoder: Encoder
    schema: TableSchema
    train_config: dict = field(default_factory=dict)
    seed: int = 0
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def weights(self, optimizer: bool = True) -> dict[str, np.ndarray]:
        out = {f"gen/{k}": v for k, v in self.generator.state().items()}
        out.update({f"critic/{k}": v for k, v in self.critic.state().items()})
        if optimizer:
            out.update({f"opt/gen/{k}": v for k, v in self.generator.optimizer_state().items()})
            out.update({f"opt/critic/{k}": v for k, v in self.critic.optimizer_state().items()})
        return out


def _gen_cfg_dict(cfg: GeneratorConfig) -> dict:
    return {"d": cfg.d, "class_counts": list(cfg.class_counts), "latent_dim": cfg.latent_dim,
            "alpha": cfg.alpha, "slr_p": cfg.slr_p, "slr_q": cfg.slr_q}


def to_bytes(b: ModelBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", b.format_version))
    buf.write(b.schema.digest())
    weights = b.weights()
    buf.write(struct.pack("<I", len(weights)))
    for name, arr in weights.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    meta = {
        "schema": b.schema.to_dict(),
        "encoder": b.encoder.to_dict(),
        "generator": _gen_cfg_dict(b.generator.cfg),
        "critic_input_width": b.critic.input_width,
        "train_config": b.train_config,
        "seed": b.seed,
        "metadata": b.metadata,
    }
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BundleCorruptError("bundle is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> ModelBundle:
    r = _Reader(data)
    if len(data) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise BundleCorruptError("not a model bundle (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise BundleVersionError(f"bundle format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 32 or hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise BundleCorruptError("bundle checksum mismatch (truncated or damaged file)")
    digest = r.take(32)
    (n_blocks,) = r.unpack("<I")
    weights: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        weights[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    (n_meta,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(n_meta).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleCorruptError(f"bad metadata block: {exc}") from exc
    schema = TableSchema.from_dict(meta["schema"])
    if schema.digest() != digest:
        raise BundleCorruptError("schema digest does not match the metadata schema")
    gcfg = meta["generator"]
    gen = build_generator(GeneratorConfig(gcfg["d"], tuple(gcfg["class_counts"]), gcfg["latent_dim"],
                                          gcfg["alpha"], gcfg["slr_p"], gcfg["slr_q"]))
    crit = build_critic(meta["critic_input_width"])

    def part(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}

    gen.load_state({**part("gen/"), **part("opt/gen/")})
    crit.load_state({**part("critic/"), **part("opt/critic/")})
    return ModelBundle(gen, crit, Encoder.from_dict(meta["encoder"], schema), schema,
                       meta.get("train_config", {}), int(meta.get("seed", 0)),
                       meta.get("metadata", {}), version)


def save_bundle(b: ModelBundle, path) -> str:
    """Atomically write the bundle; returns the sha256 hex digest of the file."""
    data = to_bytes(b)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise BundleIOError(f"cannot write bundle {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def load_bundle(path) -> ModelBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise BundleIOError(f"cannot read bundle {path}: {exc}") from exc
    return from_bytes(data)
