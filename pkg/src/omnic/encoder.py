"""Unified multimodal encoder: modality embedders, shared Transformer
backbone with a CLS token, and modality-specific projection heads."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError

MODALITIES = ("image", "audio", "text")


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    n_layers: int = 3
    n_heads: int = 4
    mlp_ratio: float = 4.0
    image_size: tuple[int, int] = (32, 32)
    image_patch: tuple[int, int] = (8, 8)
    audio_size: tuple[int, int] = (32, 32)
    audio_patch: tuple[int, int] = (8, 8)
    text_len: int = 16
    vocab_size: int = 258
    proj_dim: int = 32
    head_mode: str = "separate"

    def validate(self) -> "EncoderConfig":
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.embed_dim % 4 != 0:
            raise ConfigError("embed_dim must be divisible by 4 for 2d positional encoding")
        for name, (size, patch) in {
            "image": (self.image_size, self.image_patch),
            "audio": (self.audio_size, self.audio_patch),
        }.items():
            if size[0] % patch[0] != 0 or size[1] % patch[1] != 0:
                raise ConfigError(f"{name} size {size} not divisible by patch {patch}")
        if self.head_mode not in ("separate", "shared"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        return self

    def patch_grid(self, modality: str) -> tuple[int, int]:
        if modality == "image":
            return (self.image_size[0] // self.image_patch[0], self.image_size[1] // self.image_patch[1])
        if modality == "audio":
            return (self.audio_size[0] // self.audio_patch[0], self.audio_size[1] // self.audio_patch[1])
        raise ContractError(f"no patch grid for modality {modality!r}")

    def seq_len(self, modality: str) -> int:
        """Token count before the CLS prepend."""
        if modality == "text":
            return self.text_len
        gh, gw = self.patch_grid(modality)
        return gh * gw


@dataclass
class ModalitySample:
    tag: str
    payload: np.ndarray
    label: int | None = None
    pair_id: int | None = None

    def __post_init__(self):
        if self.tag not in MODALITIES:
            raise ContractError(f"unknown modality tag {self.tag!r}")


@dataclass
class ModalityBatch:
    tag: str
    samples: list[ModalitySample]

    def __post_init__(self):
        for s in self.samples:
            if s.tag != self.tag:
                raise ContractError(f"mixed-modality batch: expected {self.tag}, got {s.tag}")

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples])


# -- layers -------------------------------------------------------------------


class Linear:
    """y = x @ weight + bias, with an optional low-rank adapter term."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype: str = "f32"):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), dtype=dtype, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), dtype=dtype, requires_grad=True)
        self.adapter = None  # set by adapt.attach_sbora

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight) + self.bias
        if self.adapter is not None:
            y = y + self.adapter(x)
        return y

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class LayerNorm:
    def __init__(self, d: int, dtype: str = "f32", eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), dtype=dtype, requires_grad=True)
        self.bias = Tensor(np.zeros(d), dtype=dtype, requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class Block:
    """Pre-norm Transformer block: attention and MLP with residuals."""

    def __init__(self, d: int, n_heads: int, mlp_ratio: float, rng: np.random.Generator, dtype: str = "f32"):
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.ln1 = LayerNorm(d, dtype)
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        hidden = int(round(d * mlp_ratio))
        self.up = Linear(d, hidden, rng, dtype)
        self.down = Linear(hidden, d, rng, dtype)
        self.last_attention: np.ndarray | None = None

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        x = ad.reshape(x, (b, t, self.n_heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, x: Tensor, record_attention: bool = False) -> Tensor:
        b, t, d = x.shape
        h = self.ln1(x)
        q = self._split_heads(self.q(h))
        k = self._split_heads(self.k(h))
        v = self._split_heads(self.v(h))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        attn = ad.softmax_lastdim(scores)
        if record_attention:
            self.last_attention = attn.data.copy()
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        x = x + self.o(ctx)
        h = self.ln2(x)
        x = x + self.down(ad.gelu(self.up(h)))
        return x

    def linear_maps(self) -> dict[str, Linear]:
        return {"q": self.q, "k": self.k, "v": self.v, "o": self.o, "up": self.up, "down": self.down}

    def named_parameters(self, prefix: str):
        yield from self.ln1.named_parameters(f"{prefix}.ln1")
        for name, lin in self.linear_maps().items():
            yield from lin.named_parameters(f"{prefix}.{name}")
        yield from self.ln2.named_parameters(f"{prefix}.ln2")


class ProjectionHead:
    """Two-layer MLP d -> d -> p with a ReLU in between."""

    def __init__(self, d: int, p: int, rng: np.random.Generator, dtype: str = "f32"):
        self.fc1 = Linear(d, d, rng, dtype)
        self.fc2 = Linear(d, p, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))

    def named_parameters(self, prefix: str):
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")


# -- positional encodings -----------------------------------------------------


def positional_encoding(kind: str, grid, d: int) -> np.ndarray:
    """Deterministic sinusoidal position table.

    1d: interleaved sin/cos over ``grid`` positions. 2d: for a (rows, cols)
    grid, concatenation of a d/2-dim 1d encoding of the row index with a
    d/2-dim 1d encoding of the column index, flattened row-major.
    """
    if kind == "1d":
        n = int(grid)
        if d % 2 != 0:
            raise ConfigError("1d positional encoding needs an even dimension")
        pos = np.arange(n, dtype=np.float64)[:, None]
        i = np.arange(d // 2, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2 * i / d)
        pe = np.zeros((n, d), dtype=np.float64)
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        return pe
    if kind == "2d":
        if d % 4 != 0:
            raise ConfigError("2d positional encoding needs d divisible by 4")
        rows, cols = grid
        row_pe = positional_encoding("1d", rows, d // 2)
        col_pe = positional_encoding("1d", cols, d // 2)
        pe = np.zeros((rows, cols, d), dtype=np.float64)
        pe[:, :, : d // 2] = row_pe[:, None, :]
        pe[:, :, d // 2 :] = col_pe[None, :, :]
        return pe.reshape(rows * cols, d)
    raise ConfigError(f"unknown positional encoding kind {kind!r}")


# -- the model ----------------------------------------------------------------


class OmniEncoder:
    """Full parameter set: embedders, CLS token, shared blocks, heads."""

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype: str = "f32"):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        ih, iw = config.image_patch
        ah, aw = config.audio_patch
        self.image_embedder = Linear(3 * ih * iw, d, rng, dtype)
        self.audio_embedder = Linear(1 * ah * aw, d, rng, dtype)
        bound = 1.0 / math.sqrt(d)
        self.text_embedder = Tensor(
            rng.uniform(-bound, bound, size=(config.vocab_size, d)), dtype=dtype, requires_grad=True
        )
        self.cls_token = Tensor(rng.normal(0.0, 0.02, size=d), dtype=dtype, requires_grad=True)
        self.blocks = [Block(d, config.n_heads, config.mlp_ratio, rng, dtype) for _ in range(config.n_layers)]
        self.final_norm = LayerNorm(d, dtype)
        if config.head_mode == "shared":
            self.heads = {"shared": ProjectionHead(d, config.proj_dim, rng, dtype)}
        else:
            self.heads = {m: ProjectionHead(d, config.proj_dim, rng, dtype) for m in MODALITIES}
        self._pos_cache: dict[str, np.ndarray] = {}

    # -- parameter traversal --------------------------------------------------

    def named_parameters(self):
        yield from self.image_embedder.named_parameters("image_embedder")
        yield from self.audio_embedder.named_parameters("audio_embedder")
        yield "text_embedder.table", self.text_embedder
        yield from self.named_backbone_parameters()
        for tag in sorted(self.heads):
            yield from self.heads[tag].named_parameters(f"heads.{tag}")

    def named_backbone_parameters(self):
        """Blocks, CLS token and final norm: the shared parameter set."""
        yield "cls_token", self.cls_token
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"blocks.{i}")
        yield from self.final_norm.named_parameters("final_norm")

    def parameters(self):
        seen = set()
        for name, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                yield p

    def backbone_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_backbone_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    # -- embedding ------------------------------------------------------------

    def _pos(self, modality: str) -> np.ndarray:
        key = modality
        if key not in self._pos_cache:
            d = self.config.embed_dim
            if modality == "text":
                pe = positional_encoding("1d", self.config.text_len, d)
            else:
                pe = positional_encoding("2d", self.config.patch_grid(modality), d)
            self._pos_cache[key] = pe.astype(ad.DTYPES[self.dtype])
        return self._pos_cache[key]

    def _patchify(self, payload: np.ndarray, modality: str) -> np.ndarray:
        c_want = 3 if modality == "image" else 1
        size = self.config.image_size if modality == "image" else self.config.audio_size
        patch = self.config.image_patch if modality == "image" else self.config.audio_patch
        if payload.shape != (c_want, *size):
            raise DataError(f"{modality} payload shape {payload.shape} != expected {(c_want, *size)}")
        c, hh, ww = payload.shape
        ph, pw = patch
        gh, gw = hh // ph, ww // pw
        patches = payload.reshape(c, gh, ph, gw, pw).transpose(1, 3, 0, 2, 4)
        return patches.reshape(gh * gw, c * ph * pw)

    def patchify_embed(self, sample: ModalitySample) -> Tensor:
        """Embed one image/audio sample into ps x d patch tokens."""
        if sample.tag == "text":
            raise ContractError("patchify_embed applies to image/audio samples")
        patches = Tensor(self._patchify(sample.payload, sample.tag), dtype=self.dtype)
        embedder = self.image_embedder if sample.tag == "image" else self.audio_embedder
        return embedder(patches)

    def token_embed(self, sample: ModalitySample) -> Tensor:
        ids = np.asarray(sample.payload)
        if ids.shape != (self.config.text_len,):
            raise DataError(f"text payload length {ids.shape} != {(self.config.text_len,)}")
        if ids.size and ids.max() >= self.config.vocab_size:
            raise DataError(f"token id {ids.max()} >= vocab_size {self.config.vocab_size}")
        return ad.embedding(self.text_embedder, ids)

    # -- forward --------------------------------------------------------------

    def encode(self, batch: ModalityBatch, record_attention: bool = False) -> Tensor:
        """Return the B x d CLS representations for a single-modality batch."""
        if not batch.samples:
            raise ContractError("cannot encode an empty batch")
        tag = batch.tag
        b = len(batch.samples)
        d = self.config.embed_dim
        if tag == "text":
            ids = np.stack([np.asarray(s.payload) for s in batch.samples])
            if ids.max(initial=0) >= self.config.vocab_size:
                raise DataError(f"token id {ids.max()} >= vocab_size {self.config.vocab_size}")
            tokens = ad.embedding(self.text_embedder, ids)
        else:
            patches = np.stack([self._patchify(s.payload, tag) for s in batch.samples])
            embedder = self.image_embedder if tag == "image" else self.audio_embedder
            tokens = embedder(Tensor(patches, dtype=self.dtype))
        tokens = tokens + Tensor(self._pos(tag), dtype=self.dtype)
        cls = ad.reshape(self.cls_token, (1, 1, d)) + Tensor(
            np.zeros((b, 1, d)), dtype=self.dtype
        )
        x = ad.concat([cls, tokens], axis=1)
        for blk in self.blocks:
            x = blk(x, record_attention=record_attention)
        x = self.final_norm(x)
        return ad.reshape(ad.slice_axis(x, 1, 0, 1), (b, d))

    def project(self, cls: Tensor, modality: str) -> Tensor:
        """Map CLS vectors through the modality's projection head."""
        if modality not in MODALITIES:
            raise ContractError(f"unknown modality tag {modality!r}")
        head = self.heads["shared"] if self.config.head_mode == "shared" else self.heads[modality]
        return head(cls)

    def last_attention(self) -> np.ndarray | None:
        """Post-softmax attention of the last block from the latest recorded forward."""
        return self.blocks[-1].last_attention
