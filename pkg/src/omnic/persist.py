"""Bit-exact binary persistence: model checkpoints and feature caches.

Both formats are self-describing: a 4-byte magic, a version, a UTF-8 text
header (config, tensor index, payload checksum) and a little-endian payload.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, OmniEncoder
from .errors import FormatError

CHECKPOINT_MAGIC = b"OMNC"
CACHE_MAGIC = b"OMNF"
FORMAT_VERSION = 1

_DTYPE_CODES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}


def _header_bytes(lines: list[str]) -> bytes:
    return ("\n".join(lines) + "\n").encode("utf-8")


def _write_container(path, magic: bytes, config_lines: list[str], tensors: list[tuple[str, str, np.ndarray]]):
    """tensors: (name, dtype name, array) written in index order."""
    payload = bytearray()
    index_lines = []
    for name, dtype, arr in tensors:
        raw = np.ascontiguousarray(arr).astype(_DTYPE_CODES[dtype]).tobytes()
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        index_lines.append(f"tensor={name} {dtype} {shape} {len(payload)} {len(raw)}")
        payload.extend(raw)
    checksum = hashlib.sha256(bytes(payload)).hexdigest()
    lines = [f"version={FORMAT_VERSION}", f"checksum={checksum}"] + config_lines + index_lines
    header = _header_bytes(lines)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def _read_container(path, magic: bytes):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != magic:
        raise FormatError(f"bad magic at byte 0: expected {magic!r}, got {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at byte 4")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header_end = 16 + header_len
    if header_end > len(blob):
        raise FormatError(f"truncated header: need {header_end} bytes, file has {len(blob)}")
    header = blob[16:header_end].decode("utf-8")
    payload = blob[header_end:]
    fields: dict[str, str] = {}
    index = []
    for line in header.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key == "tensor":
            name, dtype, shape_s, off_s, len_s = value.split(" ")
            shape = () if shape_s == "scalar" else tuple(int(x) for x in shape_s.split("x"))
            index.append((name, dtype, shape, int(off_s), int(len_s)))
        else:
            fields[key] = value
    checksum = hashlib.sha256(payload).hexdigest()
    if checksum != fields.get("checksum"):
        raise FormatError(f"payload checksum mismatch starting at byte {header_end}")
    tensors: dict[str, np.ndarray] = {}
    for name, dtype, shape, off, length in index:
        if off + length > len(payload):
            raise FormatError(f"truncated payload for {name} at byte {header_end + off}")
        arr = np.frombuffer(payload[off : off + length], dtype=_DTYPE_CODES[dtype])
        tensors[name] = arr.reshape(shape).copy()
    return fields, tensors


# -- checkpoints --------------------------------------------------------------

_CONFIG_INT_FIELDS = ("embed_dim", "n_layers", "n_heads", "text_len", "vocab_size", "proj_dim")
_CONFIG_PAIR_FIELDS = ("image_size", "image_patch", "audio_size", "audio_patch")


def _config_lines(config: EncoderConfig) -> list[str]:
    lines = [f"config.{k}={getattr(config, k)}" for k in _CONFIG_INT_FIELDS]
    lines.append(f"config.mlp_ratio={config.mlp_ratio!r}")
    for k in _CONFIG_PAIR_FIELDS:
        a, b = getattr(config, k)
        lines.append(f"config.{k}={a},{b}")
    lines.append(f"config.head_mode={config.head_mode}")
    return lines


def _config_from_fields(fields: dict[str, str]) -> EncoderConfig:
    kwargs = {}
    for k in _CONFIG_INT_FIELDS:
        kwargs[k] = int(fields[f"config.{k}"])
    kwargs["mlp_ratio"] = float(fields["config.mlp_ratio"])
    for k in _CONFIG_PAIR_FIELDS:
        a, b = fields[f"config.{k}"].split(",")
        kwargs[k] = (int(a), int(b))
    kwargs["head_mode"] = fields["config.head_mode"]
    return EncoderConfig(**kwargs)


def _adapter_entries(model: OmniEncoder):
    for i, blk in enumerate(model.blocks):
        for name, lin in blk.linear_maps().items():
            if lin.adapter is not None:
                yield f"blocks.{i}.{name}", lin.adapter


def write_checkpoint(model: OmniEncoder, path, meta: dict | None = None) -> None:
    """Serialize every model tensor (including adapter state) bit-exactly."""
    lines = _config_lines(model.config)
    lines.append(f"dtype={model.dtype}")
    lines.append(f"seed={model.seed}")
    for key, value in (meta or {}).items():
        lines.append(f"meta.{key}={value}")
    tensors = [(name, model.dtype, p.data) for name, p in model.named_parameters()]
    for layer, adapter in _adapter_entries(model):
        lines.append(f"sbora.{layer}={adapter.rank},{adapter.alpha!r}")
        tensors.append((f"sbora.{layer}.B", model.dtype, adapter.B.data))
        tensors.append((f"sbora.{layer}.idx", "i64", np.asarray(adapter.basis_indices, dtype=np.int64)))
    _write_container(path, CHECKPOINT_MAGIC, lines, tensors)


def read_checkpoint(path) -> tuple[OmniEncoder, dict]:
    """Rebuild the model (and any attached adapters) from a checkpoint file."""
    fields, tensors = _read_container(path, CHECKPOINT_MAGIC)
    config = _config_from_fields(fields)
    model = OmniEncoder(config, seed=int(fields.get("seed", "0")), dtype=fields.get("dtype", "f32"))
    for name, p in model.named_parameters():
        if name not in tensors:
            raise FormatError(f"checkpoint missing tensor {name}")
        if tuple(tensors[name].shape) != p.shape:
            raise FormatError(f"tensor {name} shape {tensors[name].shape} != model shape {p.shape}")
        p.data = np.ascontiguousarray(tensors[name], dtype=p.data.dtype)
    sbora_layers = {k[len("sbora.") :]: v for k, v in fields.items() if k.startswith("sbora.")}
    if sbora_layers:
        from .adapt import SBoRAAdapter  # deferred: adapt imports encoder

        for i, blk in enumerate(model.blocks):
            for name, lin in blk.linear_maps().items():
                layer = f"blocks.{i}.{name}"
                if layer in sbora_layers:
                    rank_s, alpha_s = sbora_layers[layer].split(",")
                    idx = tensors[f"sbora.{layer}.idx"].astype(np.int64)
                    adapter = SBoRAAdapter(
                        layer_id=layer,
                        rank=int(rank_s),
                        alpha=float(alpha_s),
                        basis_indices=idx,
                        d_out=lin.d_out,
                        dtype=model.dtype,
                    )
                    adapter.B.data = np.ascontiguousarray(
                        tensors[f"sbora.{layer}.B"], dtype=adapter.B.data.dtype
                    )
                    lin.adapter = adapter
    meta = {k[len("meta.") :]: v for k, v in fields.items() if k.startswith("meta.")}
    return model, meta


def model_hash(model: OmniEncoder) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


# -- feature caches -----------------------------------------------------------

_TAG_CODES = {"image": 0, "audio": 1, "text": 2}
_TAG_NAMES = {v: k for k, v in _TAG_CODES.items()}


@dataclass
class CacheRow:
    pair_id: int
    tag: str
    label: int | None
    vector: np.ndarray


@dataclass
class FeatureCache:
    dim: int
    rows: list[CacheRow] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out = {m: 0 for m in _TAG_CODES}
        for r in self.rows:
            out[r.tag] += 1
        return out

    def by_tag(self, tag: str) -> list[CacheRow]:
        return [r for r in self.rows if r.tag == tag]

    def matrix(self, tag: str) -> np.ndarray:
        rows = self.by_tag(tag)
        if not rows:
            return np.zeros((0, self.dim))
        return np.stack([r.vector for r in rows])


def write_feature_cache(cache: FeatureCache, path) -> None:
    lines = [f"dim={cache.dim}", f"rows={len(cache.rows)}"]
    for tag, n in sorted(cache.counts().items()):
        lines.append(f"count.{tag}={n}")
    has_labels = any(r.label is not None for r in cache.rows)
    lines.append(f"has_labels={int(has_labels)}")
    tensors = []
    if cache.rows:
        meta = np.array(
            [
                (_TAG_CODES[r.tag], r.pair_id, -1 if r.label is None else r.label)
                for r in cache.rows
            ],
            dtype=np.int64,
        )
        vectors = np.stack([np.asarray(r.vector, dtype=np.float32) for r in cache.rows])
    else:
        meta = np.zeros((0, 3), dtype=np.int64)
        vectors = np.zeros((0, cache.dim), dtype=np.float32)
    tensors.append(("meta", "i64", meta))
    tensors.append(("vectors", "f32", vectors))
    _write_container(path, CACHE_MAGIC, lines, tensors)


def read_feature_cache(path) -> FeatureCache:
    fields, tensors = _read_container(path, CACHE_MAGIC)
    dim = int(fields["dim"])
    n = int(fields["rows"])
    meta = tensors["meta"]
    vectors = tensors["vectors"]
    if meta.shape[0] != n or vectors.shape[0] != n:
        raise FormatError(f"row count mismatch: header says {n}, payload has {meta.shape[0]}")
    rows = []
    for (tag_code, pair_id, label), vec in zip(meta, vectors):
        rows.append(
            CacheRow(
                pair_id=int(pair_id),
                tag=_TAG_NAMES[int(tag_code)],
                label=None if label < 0 else int(label),
                vector=vec,
            )
        )
    return FeatureCache(dim=dim, rows=rows)
