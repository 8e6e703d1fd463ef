"""Downstream adaptation: linear probing on frozen CLS features and
standard-basis low-rank (SBoRA-FA) fine-tuning with merge semantics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import ModalityBatch, ModalitySample, OmniEncoder
from .errors import ConfigError, ContractError, DataError
from .pretrain import OptimizerState, adamw_step, lr_at_step

BLOCK_TARGETS = ("q", "k", "v", "o", "up", "down")


class SBoRAAdapter:
    """Low-rank update whose fixed factor is a set of standard basis vectors.

    The effective weight delta is (alpha/rank) * B @ A where row j of A is the
    basis vector at basis_indices[j], so only those input columns are touched.
    Only B trains (FA variant); it starts at zero, so a fresh adapter leaves
    the forward pass bit-identical.
    """

    def __init__(self, layer_id: str, rank: int, alpha: float, basis_indices: np.ndarray, d_out: int, dtype: str = "f32"):
        basis_indices = np.asarray(basis_indices, dtype=np.int64)
        if len(set(basis_indices.tolist())) != rank or basis_indices.size != rank:
            raise ConfigError("basis_indices must be rank distinct values")
        self.layer_id = layer_id
        self.rank = rank
        self.alpha = alpha
        self.basis_indices = basis_indices
        self.B = Tensor(np.zeros((d_out, rank)), dtype=dtype, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        restricted = ad.take_lastdim(x, self.basis_indices)
        return ad.matmul(restricted, ad.transpose(self.B, (1, 0))) * (self.alpha / self.rank)

def _delta_weight(adapter: SBoRAAdapter, d_in: int) -> np.ndarray:
    """Dense (d_in x d_out) update, nonzero only in the selected input rows."""
    delta = np.zeros((d_in, adapter.B.shape[0]), dtype=adapter.B.data.dtype)
    delta[adapter.basis_indices, :] = (adapter.alpha / adapter.rank) * adapter.B.data.T
    return delta


def attach_sbora(
    enc: OmniEncoder,
    rank: int,
    alpha: float,
    seed: int = 0,
    targets: tuple[str, ...] = BLOCK_TARGETS,
) -> OmniEncoder:
    """Attach zero-initialized adapters to the selected per-block linear maps.

    Freezes every encoder parameter; afterwards only adapter B matrices (and
    any separately created task head) carry gradients.
    """
    rng = np.random.default_rng(seed)
    for p in enc.parameters():
        p.requires_grad = False
    for i, blk in enumerate(enc.blocks):
        for name in targets:
            lin = blk.linear_maps()[name]
            if rank > lin.d_in:
                raise ConfigError(f"rank {rank} exceeds input dim {lin.d_in} of blocks.{i}.{name}")
            idx = rng.choice(lin.d_in, size=rank, replace=False)
            lin.adapter = SBoRAAdapter(
                layer_id=f"blocks.{i}.{name}",
                rank=rank,
                alpha=alpha,
                basis_indices=np.sort(idx),
                d_out=lin.d_out,
                dtype=enc.dtype,
            )
    return enc


def adapter_parameters(enc: OmniEncoder):
    for i, blk in enumerate(enc.blocks):
        for name, lin in blk.linear_maps().items():
            if lin.adapter is not None:
                yield f"sbora.blocks.{i}.{name}.B", lin.adapter.B


def merge_sbora(enc: OmniEncoder) -> OmniEncoder:
    """Fold every adapter into its base weight and drop the adapters."""
    for blk in enc.blocks:
        for lin in blk.linear_maps().values():
            if lin.adapter is not None:
                lin.weight.data += _delta_weight(lin.adapter, lin.d_in).astype(lin.weight.data.dtype)
                lin.adapter = None
    for p in enc.parameters():
        p.requires_grad = True
    return enc


def count_trainable_fraction(enc: OmniEncoder) -> float:
    """Trainable backbone parameters / total backbone parameters.

    Adapter B matrices count as trainable; task heads and embedders are
    outside the backbone and excluded from both sides.
    """
    total = sum(p.size for _, p in enc.named_backbone_parameters())
    trainable = sum(p.size for _, p in enc.named_backbone_parameters() if p.requires_grad)
    trainable += sum(p.size for _, p in adapter_parameters(enc) if p.requires_grad)
    return trainable / total


# -- linear probe -------------------------------------------------------------


@dataclass
class ProbeConfig:
    lr: float = 1e-3
    min_lr: float = 1e-4
    weight_decay: float = 0.1
    warmup_epochs: int = 10
    epochs: int = 40
    batch_size: int = 64
    holdout_fraction: float = 0.2
    seed: int = 0


class LinearProbeHead:
    def __init__(self, d: int, n_classes: int, rng: np.random.Generator, dtype: str = "f32"):
        bound = 1.0 / math.sqrt(d)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(d, n_classes)), dtype=dtype, requires_grad=True)
        self.bias = Tensor(np.zeros(n_classes), dtype=dtype, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias

    def named_parameters(self):
        yield "probe.weight", self.weight
        yield "probe.bias", self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            logits = self(Tensor(feats, dtype=self.weight.dtype)).numpy()
        return logits.argmax(axis=1)


def extract_cls_features(enc: OmniEncoder, samples: list[ModalitySample], batch_size: int = 64) -> np.ndarray:
    """Frozen-backbone CLS features, batched, without touching the tape."""
    feats = []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            batch = ModalityBatch(chunk[0].tag, chunk)
            feats.append(enc.encode(batch).numpy())
    return np.concatenate(feats, axis=0)


def _train_head_on_features(
    feats: np.ndarray, labels: np.ndarray, n_classes: int, cfg: ProbeConfig, dtype: str
) -> LinearProbeHead:
    rng = np.random.default_rng(cfg.seed)
    head = LinearProbeHead(feats.shape[1], n_classes, rng, dtype)
    params = list(head.named_parameters())
    opt = OptimizerState(
        base_lr=cfg.lr,
        min_lr=cfg.min_lr,
        weight_decay=cfg.weight_decay,
        warmup_epochs=cfg.warmup_epochs,
        total_epochs=cfg.epochs,
    )
    n = feats.shape[0]
    spe = max(1, n // cfg.batch_size)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(spe):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            ad.reset_tape()
            ad.zero_grads(p for _, p in params)
            logits = head(Tensor(feats[idx], dtype=dtype))
            loss = ad.cross_entropy(logits, labels[idx])
            lr = lr_at_step(opt, step, spe)
            ad.backward(loss)
            adamw_step(params, opt, lr)
            step += 1
    return head


def train_linear_probe(
    enc: OmniEncoder, dataset: list[ModalitySample], cfg: ProbeConfig | None = None
) -> tuple[LinearProbeHead, float]:
    """Train a linear classifier on frozen CLS features; returns held-out top-1.

    The backbone is byte-identical before and after (features are extracted
    once under no_grad and the head trains on the cached matrix).
    """
    cfg = cfg or ProbeConfig()
    tags = {s.tag for s in dataset}
    if len(tags) != 1:
        raise ContractError(f"probe dataset must be single-modality, got {sorted(tags)}")
    labels = np.array([s.label for s in dataset])
    classes = np.unique(labels)
    if classes.size < 2:
        raise DataError("probe needs at least two classes")
    n_classes = int(classes.max()) + 1
    order = np.random.default_rng(cfg.seed).permutation(len(dataset))
    n_hold = int(round(len(dataset) * cfg.holdout_fraction))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    feats = extract_cls_features(enc, dataset)
    head = _train_head_on_features(feats[train_idx], labels[train_idx], n_classes, cfg, enc.dtype)
    if n_hold:
        acc = float((head.predict(feats[hold_idx]) == labels[hold_idx]).mean())
    else:
        acc = float((head.predict(feats[train_idx]) == labels[train_idx]).mean())
    return head, acc


# -- SBoRA fine-tuning --------------------------------------------------------


def train_sbora(
    enc: OmniEncoder,
    dataset: list[ModalitySample],
    rank: int,
    alpha: float,
    cfg: ProbeConfig | None = None,
) -> tuple[LinearProbeHead, float]:
    """Classification fine-tuning with adapters + a linear head on the CLS token."""
    cfg = cfg or ProbeConfig()
    tags = {s.tag for s in dataset}
    if len(tags) != 1:
        raise ContractError(f"fine-tuning dataset must be single-modality, got {sorted(tags)}")
    labels = np.array([s.label for s in dataset])
    if np.unique(labels).size < 2:
        raise DataError("fine-tuning needs at least two classes")
    n_classes = int(labels.max()) + 1
    attach_sbora(enc, rank=rank, alpha=alpha, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    head = LinearProbeHead(enc.config.embed_dim, n_classes, rng, enc.dtype)
    params = list(adapter_parameters(enc)) + list(head.named_parameters())
    opt = OptimizerState(
        base_lr=cfg.lr,
        min_lr=cfg.min_lr,
        weight_decay=cfg.weight_decay,
        warmup_epochs=cfg.warmup_epochs,
        total_epochs=cfg.epochs,
    )
    order = np.random.default_rng(cfg.seed + 1).permutation(len(dataset))
    n_hold = int(round(len(dataset) * cfg.holdout_fraction))
    hold = [dataset[i] for i in order[:n_hold]]
    train = [dataset[i] for i in order[n_hold:]]
    spe = max(1, len(train) // cfg.batch_size)
    step = 0
    for _ in range(cfg.epochs):
        epoch_order = rng.permutation(len(train))
        for b in range(spe):
            idx = epoch_order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            chunk = [train[i] for i in idx]
            ad.reset_tape()
            ad.zero_grads(p for _, p in params)
            cls = enc.encode(ModalityBatch(chunk[0].tag, chunk))
            loss = ad.cross_entropy(head(cls), np.array([s.label for s in chunk]))
            lr = lr_at_step(opt, step, spe)
            ad.backward(loss)
            adamw_step(params, opt, lr)
            step += 1
    eval_set = hold if hold else train
    feats = extract_cls_features(enc, eval_set)
    acc = float((head.predict(feats) == np.array([s.label for s in eval_set])).mean())
    return head, acc
