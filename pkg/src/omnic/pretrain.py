"""Unimodal contrastive pretraining: augmentations, modality-separated
minibatch scheduling, the temperature-scaled contrastive loss, AdamW with a
warmup + cosine schedule, and the training loop."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MASK_ID
from .encoder import MODALITIES, ModalityBatch, ModalitySample, OmniEncoder
from .errors import ContractError, DataError, NumericError


@dataclass
class ContrastiveConfig:
    temperature: float = 0.05
    batch_size: int = 32

    def validate(self):
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        return self


@dataclass
class AugmentationConfig:
    # image; crop/jitter/blur are kept mild so the per-instance texture that
    # makes desk-scale instance discrimination solvable survives both views
    crop_scale: tuple[float, float] = (0.5, 1.0)
    flip_p: float = 0.5
    jitter: float = 0.3
    blur_p: float = 0.3
    # audio
    masks_per_axis: int = 2
    max_time_mask_frac: float = 0.25
    max_freq_mask_frac: float = 0.25
    # text
    token_mask_p: float = 0.15
    mask_token_id: int = MASK_ID


@dataclass
class OptimizerState:
    base_lr: float = 1e-4
    min_lr: float = 1e-5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 5
    total_epochs: int = 30
    step: int = 0
    moments: dict = field(default_factory=dict)


# -- augmentations ------------------------------------------------------------


def _resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    ys = np.minimum((np.arange(out_h) * h / out_h).astype(int), h - 1)
    xs = np.minimum((np.arange(out_w) * w / out_w).astype(int), w - 1)
    return img[:, ys[:, None], xs[None, :]]


def _blur3(img: np.ndarray) -> np.ndarray:
    k = np.array([0.25, 0.5, 0.25])
    pad = np.pad(img, ((0, 0), (1, 1), (0, 0)), mode="edge")
    img = k[0] * pad[:, :-2] + k[1] * pad[:, 1:-1] + k[2] * pad[:, 2:]
    pad = np.pad(img, ((0, 0), (0, 0), (1, 1)), mode="edge")
    return k[0] * pad[:, :, :-2] + k[1] * pad[:, :, 1:-1] + k[2] * pad[:, :, 2:]


def _augment_image(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    c, h, w = img.shape
    scale = rng.uniform(*cfg.crop_scale)
    if scale < 1.0:
        ratio = rng.uniform(3 / 4, 4 / 3)
        ch = min(h, max(1, int(round(math.sqrt(scale / ratio) * h))))
        cw = min(w, max(1, int(round(math.sqrt(scale * ratio) * w))))
        y0 = rng.integers(0, h - ch + 1)
        x0 = rng.integers(0, w - cw + 1)
        img = _resize_nearest(img[:, y0 : y0 + ch, x0 : x0 + cw], h, w)
    if rng.random() < cfg.flip_p:
        img = img[:, :, ::-1]
    if cfg.jitter > 0:
        gain = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter, size=(c, 1, 1))
        shift = rng.uniform(-cfg.jitter / 2, cfg.jitter / 2, size=(c, 1, 1))
        img = img * gain + shift
    if rng.random() < cfg.blur_p:
        img = _blur3(img)
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0))


def _augment_audio(spec: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    spec = spec.copy()
    _, n_time, n_freq = spec.shape
    max_t = int(round(cfg.max_time_mask_frac * n_time))
    max_f = int(round(cfg.max_freq_mask_frac * n_freq))
    for _ in range(cfg.masks_per_axis):
        if max_t > 0:
            width = int(rng.integers(1, max_t + 1))
            start = int(rng.integers(0, n_time - width + 1))
            spec[:, start : start + width, :] = 0.0
        if max_f > 0:
            width = int(rng.integers(1, max_f + 1))
            start = int(rng.integers(0, n_freq - width + 1))
            spec[:, :, start : start + width] = 0.0
    return spec


def _augment_text(ids: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    ids = ids.copy()
    if cfg.token_mask_p > 0:
        mask = rng.random(ids.shape) < cfg.token_mask_p
        ids[mask] = cfg.mask_token_id
    return ids


def augment(sample: ModalitySample, cfg: AugmentationConfig, rng: np.random.Generator) -> ModalitySample:
    """Modality-specific random view; deterministic given the rng state."""
    if sample.tag == "image":
        payload = _augment_image(sample.payload, cfg, rng)
    elif sample.tag == "audio":
        payload = _augment_audio(sample.payload, cfg, rng)
    else:
        payload = _augment_text(sample.payload, cfg, rng)
    return ModalitySample(tag=sample.tag, payload=payload, label=sample.label, pair_id=sample.pair_id)


# -- minibatch scheduling -----------------------------------------------------


class MinibatchScheduler:
    """Modality-separated minibatches, cyclic by default, without replacement
    within each modality's epoch."""

    def __init__(self, stores: dict[str, list], batch_size: int, mode: str = "cyclic", seed: int = 0):
        if mode not in ("cyclic", "uniform"):
            raise ContractError(f"unknown schedule mode {mode!r}")
        for tag, store in stores.items():
            if len(store) < batch_size:
                raise DataError(f"{tag} store has {len(store)} samples, need at least {batch_size}")
        self.stores = stores
        self.tags = [m for m in MODALITIES if m in stores]
        self.batch_size = batch_size
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self._cursor = {t: 0 for t in self.tags}
        self._order = {t: self.rng.permutation(len(stores[t])) for t in self.tags}
        self._call = 0

    def steps_per_epoch(self) -> int:
        return sum(len(self.stores[t]) // self.batch_size for t in self.tags)

    def next_batch(self) -> ModalityBatch:
        if self.mode == "cyclic":
            tag = self.tags[self._call % len(self.tags)]
        else:
            tag = self.tags[self.rng.integers(0, len(self.tags))]
        self._call += 1
        store = self.stores[tag]
        if self._cursor[tag] + self.batch_size > len(store):
            self._order[tag] = self.rng.permutation(len(store))
            self._cursor[tag] = 0
        idx = self._order[tag][self._cursor[tag] : self._cursor[tag] + self.batch_size]
        self._cursor[tag] += self.batch_size
        return ModalityBatch(tag=tag, samples=[store[i] for i in idx])


def balance_datasets(stores: dict[str, list], target: int, rng: np.random.Generator) -> dict[str, list]:
    """Downsample each store without replacement to min(target, size)."""
    out = {}
    for tag, store in stores.items():
        if len(store) <= target:
            out[tag] = list(store)
        else:
            idx = rng.choice(len(store), size=target, replace=False)
            out[tag] = [store[i] for i in sorted(idx)]
    return out


# -- loss ---------------------------------------------------------------------


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise NumericError("cosine similarity of a zero vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


def nt_xent_loss(z: Tensor, pairing: np.ndarray, temperature: float) -> Tensor:
    """Mean contrastive loss over all anchors of a two-view batch.

    ``z`` holds 2N projected embeddings; ``pairing[i]`` is the row index of
    anchor i's positive view. The denominator runs over all rows except the
    anchor itself.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    n2 = z.shape[0]
    if n2 < 2:
        raise ContractError("need at least one pair (2 embeddings)")
    pairing = np.asarray(pairing)
    if pairing.shape != (n2,) or (pairing == np.arange(n2)).any():
        raise ContractError("pairing must map each anchor to a different row")
    zn = ad.l2_normalize_lastdim(z)
    scaled = ad.matmul(zn, ad.transpose(zn, (1, 0))) * (1.0 / temperature)
    mask = np.zeros((n2, n2), dtype=z.data.dtype)
    np.fill_diagonal(mask, -np.inf)
    lse = ad.logsumexp_lastdim(scaled + Tensor(mask, dtype=z.dtype))
    onehot = np.zeros((n2, n2), dtype=z.data.dtype)
    onehot[np.arange(n2), pairing] = 1.0
    pos = ad.sum_lastdim(scaled * Tensor(onehot, dtype=z.dtype))
    return ad.mean_all(lse - pos)


def two_view_pairing(n: int) -> np.ndarray:
    """Row pairing for [view1; view2] stacking: i <-> i + n."""
    return np.concatenate([np.arange(n) + n, np.arange(n)])


# -- optimization -------------------------------------------------------------


def lr_at_step(opt: OptimizerState, step: int, steps_per_epoch: int) -> float:
    warmup = opt.warmup_epochs * steps_per_epoch
    total = opt.total_epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        return opt.base_lr * step / warmup
    if total <= warmup:
        return opt.base_lr
    progress = min(1.0, (step - warmup) / (total - warmup))
    return opt.min_lr + 0.5 * (opt.base_lr - opt.min_lr) * (1.0 + math.cos(math.pi * progress))


def adamw_step(named_params, opt: OptimizerState, lr: float) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update."""
    opt.step += 1
    t = opt.step
    for name, p in named_params:
        if p.grad is None:
            continue
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        if name not in opt.moments:
            opt.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = opt.moments[name]
        m[:] = opt.beta1 * m + (1 - opt.beta1) * g
        v[:] = opt.beta2 * v + (1 - opt.beta2) * g * g
        mhat = m / (1 - opt.beta1**t)
        vhat = v / (1 - opt.beta2**t)
        p.data *= 1.0 - lr * opt.weight_decay
        p.data -= (lr * mhat / (np.sqrt(vhat) + opt.eps)).astype(p.data.dtype)


# -- training loop ------------------------------------------------------------


@dataclass
class PretrainResult:
    encoder: OmniEncoder
    log_rows: list[tuple[int, int, str, float, float]]
    diverged: bool = False


def run_pretraining(
    enc: OmniEncoder,
    stores: dict[str, list],
    contrastive: ContrastiveConfig,
    augmentation: AugmentationConfig,
    optimizer: OptimizerState,
    epochs: int,
    seed: int = 0,
    schedule_mode: str = "cyclic",
) -> PretrainResult:
    """Contrastive pretraining over modality-separated minibatches.

    Bit-reproducible given (enc initial state, stores, configs, seed). On a
    non-finite loss the parameters are rolled back to the last epoch boundary
    and training stops.
    """
    contrastive.validate()
    optimizer.total_epochs = epochs
    sched = MinibatchScheduler(stores, contrastive.batch_size, mode=schedule_mode, seed=seed)
    aug_rng = np.random.default_rng(seed + 0x5EED)
    spe = sched.steps_per_epoch()
    params = list(enc.named_parameters())
    log_rows: list[tuple[int, int, str, float, float]] = []
    snapshot = [p.data.copy() for _, p in params]
    step = 0
    for epoch in range(epochs):
        for _ in range(spe):
            batch = sched.next_batch()
            n = len(batch.samples)
            view1 = ModalityBatch(batch.tag, [augment(s, augmentation, aug_rng) for s in batch.samples])
            view2 = ModalityBatch(batch.tag, [augment(s, augmentation, aug_rng) for s in batch.samples])
            ad.reset_tape()
            ad.zero_grads(p for _, p in params)
            z1 = enc.project(enc.encode(view1), batch.tag)
            z2 = enc.project(enc.encode(view2), batch.tag)
            z = ad.concat([z1, z2], axis=0)
            loss = nt_xent_loss(z, two_view_pairing(n), contrastive.temperature)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                for (_, p), saved in zip(params, snapshot):
                    p.data = saved.copy()
                return PretrainResult(enc, log_rows, diverged=True)
            lr = lr_at_step(optimizer, step, spe)
            ad.backward(loss)
            adamw_step(params, optimizer, lr)
            log_rows.append((epoch, step, batch.tag, loss_val, lr))
            step += 1
        snapshot = [p.data.copy() for _, p in params]
    return PretrainResult(enc, log_rows)


def write_loss_log(rows, path) -> None:
    with open(path, "w") as f:
        f.write("epoch,step,modality,loss,lr\n")
        for epoch, step, tag, loss, lr in rows:
            f.write(f"{epoch},{step},{tag},{loss!r},{lr!r}\n")
