"""Binary container shared by model checkpoints and importance maps.

Byte layout (all integers little-endian)::

    offset  size        field
    0       4           magic  b"MSCK"
    4       2           format version (u16, currently 1)
    6       1           record kind (u8): 1 = model checkpoint, 2 = importance map
    7       1           reserved, 0
    8       32          sha256 of the canonical model-config JSON
    40      4           meta length M (u32)
    44      M           meta: canonical UTF-8 JSON, always has key "config"
    44+M    4           record count N (u32)
    ...                 N records, each:
                          u16 name length L, L bytes UTF-8 canonical name,
                          u8 ndim, ndim x u32 extents,
                          prod(extents) x float64 payload (little-endian, row-major)
    end-32  32          sha256 of every preceding byte

Canonical JSON is ``json.dumps(obj, sort_keys=True, separators=(",", ":"))``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import IntegrityError
from .model import LoraAdapter, ModelConfig, TransformerLM

MAGIC = b"MSCK"
VERSION = 1
KIND_CHECKPOINT = 1
KIND_IMPORTANCE = 2


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def encode_container(kind: int, config: dict, meta: dict, records: dict[str, np.ndarray]) -> bytes:
    meta = dict(meta, config=config)
    mbytes = canonical_json(meta).encode()
    parts = [
        MAGIC,
        struct.pack("<HBB", VERSION, kind, 0),
        bytes.fromhex(config_hash(config)),
        struct.pack("<I", len(mbytes)),
        mbytes,
        struct.pack("<I", len(records)),
    ]
    for name, arr in records.items():
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_container(blob: bytes) -> tuple[int, dict, dict[str, np.ndarray]]:
    """Returns (kind, meta, records); meta["config"] holds the model config."""
    if len(blob) < 80 or blob[:4] != MAGIC:
        raise IntegrityError("not a modalshift container (bad magic or truncated header)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("container checksum mismatch (truncated or corrupted file)")
    version, kind, _ = struct.unpack_from("<HBB", body, 4)
    if version != VERSION:
        raise IntegrityError(f"unsupported container version {version}")
    chash = body[8:40].hex()
    (mlen,) = struct.unpack_from("<I", body, 40)
    pos = 44
    meta = json.loads(body[pos : pos + mlen].decode())
    pos += mlen
    if config_hash(meta["config"]) != chash:
        raise IntegrityError("embedded config hash does not match the config record")
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    records: dict[str, np.ndarray] = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            records[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise IntegrityError(f"malformed record section: {exc}") from None
    if pos != len(body):
        raise IntegrityError("trailing bytes after the last record")
    return kind, meta, records


def read_container(path) -> tuple[int, dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise IntegrityError(f"no such file: {path}") from None
    return decode_container(blob)


def checkpoint_bytes(model: TransformerLM, extra_meta: dict | None = None) -> bytes:
    records = {n: p.data for n, p in model.params.items()}
    lora = {}
    for name, ad in model.lora.items():
        records[f"lora.{name}.A"] = ad.A.data
        records[f"lora.{name}.B"] = ad.B.data
        lora[name] = {"rank": ad.rank, "alpha": ad.alpha}
    meta = dict(extra_meta or {}, lora=lora)
    return encode_container(KIND_CHECKPOINT, model.cfg.to_dict(), meta, records)


def save_checkpoint(model: TransformerLM, path, extra_meta: dict | None = None) -> str:
    """Write the model; returns the sha256 hex digest of the file bytes."""
    blob = checkpoint_bytes(model, extra_meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, expect: ModelConfig | None = None) -> TransformerLM:
    kind, meta, records = read_container(path)
    if kind != KIND_CHECKPOINT:
        raise IntegrityError(f"{path}: expected a model checkpoint, found record kind {kind}")
    cfg = ModelConfig(**meta["config"])
    if expect is not None and config_hash(expect) != config_hash(cfg):
        raise IntegrityError(f"{path}: checkpoint model config differs from the run config")
    from .model import param_shapes

    shapes = param_shapes(cfg)
    base = {n: a for n, a in records.items() if not n.startswith("lora.")}
    if list(base) != list(shapes) or any(base[n].shape != s for n, s in shapes.items()):
        raise IntegrityError(f"{path}: parameter registry does not match its config")
    model = TransformerLM(cfg, {n: T.Tensor(a, requires_grad=True) for n, a in base.items()})
    lora = meta.get("lora", {})
    # adapter order follows the record section (meta keys are sorted)
    names = [n[5:-2] for n in records if n.startswith("lora.") and n.endswith(".A")]
    if sorted(names) != sorted(lora):
        raise IntegrityError(f"{path}: LoRA records do not match the LoRA metadata")
    for name in names:
        info = lora[name]
        A = T.Tensor(records[f"lora.{name}.A"], requires_grad=True)
        B = T.Tensor(records[f"lora.{name}.B"], requires_grad=True)
        model.lora[name] = LoraAdapter(name, A, B, int(info["rank"]), float(info["alpha"]))
    if lora:
        for n, p in model.params.items():
            p.requires_grad = n.startswith("adaptor.")
    return model
