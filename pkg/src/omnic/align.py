"""Cross-modal alignment over frozen backbone features: cached feature
extraction, trainable per-modality linear projections with a symmetric
contrastive objective, and zero-shot / retrieval evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .adapt import extract_cls_features
from .data import tokenize_text
from .encoder import ModalitySample, OmniEncoder
from .errors import ContractError, DataError
from .persist import CacheRow, FeatureCache
from .pretrain import OptimizerState, adamw_step, lr_at_step

LOGIT_SCALE_MAX = 100.0


class AlignmentHead:
    """A pair of linear projections plus a learnable (log) logit scale."""

    def __init__(self, d: int, q: int, seed: int = 0, dtype: str = "f32"):
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(d)
        self.proj_a = Tensor(rng.uniform(-bound, bound, size=(d, q)), dtype=dtype, requires_grad=True)
        self.proj_b = Tensor(rng.uniform(-bound, bound, size=(d, q)), dtype=dtype, requires_grad=True)
        self.log_scale = Tensor(np.asarray(math.log(1.0 / 0.07)), dtype=dtype, requires_grad=True)
        self.dtype = dtype

    def named_parameters(self):
        yield "align.proj_a", self.proj_a
        yield "align.proj_b", self.proj_b
        yield "align.log_scale", self.log_scale

    def scale(self) -> float:
        return float(min(math.exp(self.log_scale.item()), LOGIT_SCALE_MAX))

    def project(self, feats: np.ndarray, side: str) -> np.ndarray:
        proj = self.proj_a if side == "a" else self.proj_b
        with ad.no_grad():
            z = ad.matmul(Tensor(feats, dtype=self.dtype), proj)
            return ad.l2_normalize_lastdim(z).numpy()


@dataclass
class AlignmentConfig:
    lr: float = 1e-2
    min_lr: float = 1e-3
    weight_decay: float = 0.1
    warmup_epochs: int = 10
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0


def cache_features(enc: OmniEncoder, pairs: list[tuple[ModalitySample, ModalitySample]]) -> FeatureCache:
    """Frozen-backbone CLS features for both sides of every pair.

    Rows are written in pair_id order, side A before side B per modality
    grouping; the backbone is read-only throughout.
    """
    cache = FeatureCache(dim=enc.config.embed_dim)
    if not pairs:
        return cache
    seen: dict[int, set[str]] = {}
    for a, b in pairs:
        if a.pair_id is None or b.pair_id is None or a.pair_id != b.pair_id:
            raise DataError(f"pair ids must match on both sides, got {a.pair_id} / {b.pair_id}")
        seen.setdefault(a.pair_id, set()).update({a.tag, b.tag})
    for pid, tags in seen.items():
        if len(tags) != 2:
            raise DataError(f"pair_id {pid} is missing one side")
    ordered = sorted(pairs, key=lambda p: p[0].pair_id)
    for side in range(2):
        samples = [p[side] for p in ordered]
        feats = extract_cls_features(enc, samples)
        for s, vec in zip(samples, feats):
            cache.rows.append(CacheRow(pair_id=s.pair_id, tag=s.tag, label=s.label, vector=vec))
    return cache


def _paired_matrices(cache: FeatureCache) -> tuple[np.ndarray, np.ndarray, list[int], str, str]:
    tags = sorted({r.tag for r in cache.rows})
    if len(tags) != 2:
        raise ContractError(f"alignment cache must hold exactly two modalities, got {tags}")
    tag_a, tag_b = tags
    rows_a = {r.pair_id: r for r in cache.rows if r.tag == tag_a}
    rows_b = {r.pair_id: r for r in cache.rows if r.tag == tag_b}
    pids = sorted(rows_a)
    if sorted(rows_b) != pids:
        raise DataError("pair ids differ between the two modalities")
    a = np.stack([rows_a[p].vector for p in pids])
    b = np.stack([rows_b[p].vector for p in pids])
    return a, b, pids, tag_a, tag_b


def symmetric_infonce(za: Tensor, zb: Tensor, log_scale: Tensor) -> Tensor:
    """Mean of row-wise and column-wise cross-entropy with diagonal targets."""
    m = za.shape[0]
    if m < 2:
        raise ContractError("symmetric contrastive loss needs at least 2 pairs")
    na = ad.l2_normalize_lastdim(za)
    nb = ad.l2_normalize_lastdim(zb)
    scale = ad.reshape(log_scale, (1, 1))
    sims = ad.matmul(na, ad.transpose(nb, (1, 0)))
    logits = ad.mul(sims, _exp_clamped(scale))
    targets = np.arange(m)
    loss_ab = ad.cross_entropy(logits, targets)
    loss_ba = ad.cross_entropy(ad.transpose(logits, (1, 0)), targets)
    return (loss_ab + loss_ba) * 0.5


def _exp_clamped(log_scale: Tensor) -> Tensor:
    # exp with an upper clamp; gradient is zero in the clamped region
    val = math.exp(float(log_scale.data.reshape(-1)[0]))
    clamped = val > LOGIT_SCALE_MAX
    out = Tensor(np.full((1, 1), min(val, LOGIT_SCALE_MAX)), dtype=log_scale.dtype)

    def backward(g):
        if clamped:
            return (np.zeros_like(log_scale.data),)
        return ((g * out.data).reshape(log_scale.shape),)

    return ad._record(out, (log_scale,), backward)


def train_alignment(
    cache: FeatureCache, head: AlignmentHead, cfg: AlignmentConfig | None = None
) -> list[tuple[int, int, float, float]]:
    """Train the projection pair on cached features; only head parameters move."""
    cfg = cfg or AlignmentConfig()
    a, b, _, _, _ = _paired_matrices(cache)
    n = a.shape[0]
    if n < 2:
        raise ContractError("alignment needs at least 2 pairs")
    batch = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    params = list(head.named_parameters())
    opt = OptimizerState(
        base_lr=cfg.lr,
        min_lr=cfg.min_lr,
        weight_decay=cfg.weight_decay,
        warmup_epochs=cfg.warmup_epochs,
        total_epochs=cfg.epochs,
    )
    spe = max(1, n // batch)
    log: list[tuple[int, int, float, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(spe):
            idx = order[i * batch : (i + 1) * batch]
            if idx.size < 2:
                continue
            ad.reset_tape()
            ad.zero_grads(p for _, p in params)
            za = ad.matmul(Tensor(a[idx], dtype=head.dtype), head.proj_a)
            zb = ad.matmul(Tensor(b[idx], dtype=head.dtype), head.proj_b)
            loss = symmetric_infonce(za, zb, head.log_scale)
            lr = lr_at_step(opt, step, spe)
            ad.backward(loss)
            adamw_step(params, opt, lr)
            log.append((epoch, step, loss.item(), lr))
            step += 1
    return log


def embed_class_prompts(
    enc: OmniEncoder, head: AlignmentHead, prompts: list[str], text_side: str = "b"
) -> np.ndarray:
    """Tokenize, encode and project each class prompt; rows are l2-normalized."""
    if not prompts:
        raise ContractError("need at least one class prompt")
    samples = [
        ModalitySample(tag="text", payload=tokenize_text(p, enc.config.text_len)) for p in prompts
    ]
    feats = extract_cls_features(enc, samples)
    return head.project(feats, text_side)


def zero_shot_classify(
    query_feats: np.ndarray,
    class_embeddings: np.ndarray,
    head: AlignmentHead,
    query_side: str = "a",
) -> np.ndarray:
    """Argmax cosine similarity against class prompt embeddings.

    Ties break toward the lowest class id (argmax picks the first maximum).
    """
    if class_embeddings.shape[0] < 1:
        raise ContractError("need at least one class")
    z = head.project(query_feats, query_side)
    sims = z @ class_embeddings.T
    return sims.argmax(axis=1)


def retrieval_at_k(
    cache: FeatureCache, head: AlignmentHead, k: int, match: str = "pair"
) -> dict[str, float]:
    """Recall@k under cosine similarity, both directions.

    ``match="pair"`` scores retrieving the exact paired row. ``match="class"``
    scores retrieving any row of the query's class — the meaningful notion
    when captions are shared at class level, so a query's caption is
    byte-identical to other same-class captions and the exact pair is
    undefined up to that tie.
    """
    if k < 1:
        raise ContractError("k must be at least 1")
    if match not in ("pair", "class"):
        raise ContractError(f"match must be 'pair' or 'class', got {match!r}")
    a, b, pids, tag_a, tag_b = _paired_matrices(cache)
    n = a.shape[0]
    if n < k:
        raise ContractError(f"need at least k={k} candidates, have {n}")
    za = head.project(a, "a")
    zb = head.project(b, "b")
    sims = za @ zb.T
    if match == "pair":
        ranks_ab = (sims > sims[np.arange(n), np.arange(n)][:, None]).sum(axis=1)
        ranks_ba = (sims.T > sims[np.arange(n), np.arange(n)][:, None]).sum(axis=1)
        hit_ab = ranks_ab < k
        hit_ba = ranks_ba < k
    else:
        by_pid_a = {r.pair_id: r.label for r in cache.rows if r.tag == tag_a}
        by_pid_b = {r.pair_id: r.label for r in cache.rows if r.tag == tag_b}
        la = np.array([by_pid_a[p] for p in pids])
        lb = np.array([by_pid_b[p] for p in pids])
        top_ab = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        top_ba = np.argsort(-sims.T, axis=1, kind="stable")[:, :k]
        hit_ab = (lb[top_ab] == la[:, None]).any(axis=1)
        hit_ba = (la[top_ba] == lb[:, None]).any(axis=1)
    return {
        f"{tag_a}_to_{tag_b}": float(hit_ab.mean()),
        f"{tag_b}_to_{tag_a}": float(hit_ba.mean()),
    }
