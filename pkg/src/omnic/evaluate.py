"""Evaluation suite: weighted kNN on frozen features, alignment/uniformity
metrics, average attention maps, and 2d embedding export."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .encoder import ModalityBatch, ModalitySample, OmniEncoder
from .errors import ContractError, NumericError


def knn_classify(
    train_feats: np.ndarray,
    train_labels: np.ndarray,
    query_feats: np.ndarray,
    k: int = 20,
    temperature: float = 0.07,
) -> np.ndarray:
    """Cosine-similarity weighted k-nearest-neighbor vote.

    Votes are weighted by exp(sim / temperature); ties break toward the
    lowest class id.
    """
    if train_feats.shape[0] == 0:
        raise ContractError("empty training set")
    if k > train_feats.shape[0]:
        raise ContractError(f"k={k} exceeds training size {train_feats.shape[0]}")
    train_labels = np.asarray(train_labels)
    tn = train_feats / np.linalg.norm(train_feats, axis=1, keepdims=True)
    qn = query_feats / np.linalg.norm(query_feats, axis=1, keepdims=True)
    sims = qn @ tn.T
    n_classes = int(train_labels.max()) + 1
    preds = np.empty(query_feats.shape[0], dtype=np.int64)
    for i in range(sims.shape[0]):
        top = np.argpartition(-sims[i], k - 1)[:k]
        weights = np.exp(sims[i][top] / temperature)
        votes = np.zeros(n_classes)
        np.add.at(votes, train_labels[top], weights)
        preds[i] = votes.argmax()
    return preds


def knn_accuracy(train_feats, train_labels, query_feats, query_labels, k=20, temperature=0.07) -> float:
    preds = knn_classify(train_feats, train_labels, query_feats, k=k, temperature=temperature)
    return float((preds == np.asarray(query_labels)).mean())


def _check_unit(vectors: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(vectors, axis=-1)
    if np.abs(norms - 1.0).max() > 1e-3:
        raise ContractError(f"{what} must be l2-normalized (max norm deviation {np.abs(norms-1).max():.2e})")


def alignment_metric(pairs_a: np.ndarray, pairs_b: np.ndarray) -> float:
    """Mean squared distance between positive pairs of unit vectors."""
    if pairs_a.shape != pairs_b.shape or pairs_a.shape[0] < 1:
        raise ContractError("need matching, non-empty pair arrays")
    _check_unit(pairs_a, "alignment inputs")
    _check_unit(pairs_b, "alignment inputs")
    return float(((pairs_a - pairs_b) ** 2).sum(axis=1).mean())


def uniformity_metric(feats: np.ndarray) -> float:
    """log mean over ordered distinct pairs of exp(-2 ||x - y||^2)."""
    n = feats.shape[0]
    if n < 2:
        raise ContractError("uniformity needs at least 2 vectors")
    _check_unit(feats, "uniformity inputs")
    sq = ((feats[:, None, :] - feats[None, :, :]) ** 2).sum(axis=-1)
    off = ~np.eye(n, dtype=bool)
    return float(np.log(np.exp(-2.0 * sq[off]).mean()))


def average_attention_map(enc: OmniEncoder, samples: list[ModalitySample], batch_size: int = 64) -> np.ndarray:
    """Mean over samples and heads of last-block post-softmax attention."""
    if not samples:
        raise ContractError("need at least one sample")
    tags = {s.tag for s in samples}
    if len(tags) != 1:
        raise ContractError(f"samples must share one modality, got {sorted(tags)}")
    total = None
    count = 0
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            enc.encode(ModalityBatch(chunk[0].tag, chunk), record_attention=True)
            attn = enc.last_attention()  # (B, heads, T+1, T+1)
            contrib = attn.sum(axis=(0, 1))
            total = contrib if total is None else total + contrib
            count += attn.shape[0] * attn.shape[1]
    return total / count


def export_embeddings_2d(
    feats: np.ndarray, labels: np.ndarray, tags: list[str], method: str = "pca"
) -> list[tuple[float, float, str, int]]:
    """Project features to 2d for plotting; rows are (x, y, modality, label).

    pca uses the exact eigendecomposition of the centered covariance and
    fixes each axis sign by forcing the largest-magnitude loading positive.
    """
    labels = np.asarray(labels)
    if method == "raw":
        return [(float(v[0]), float(v[1]), t, int(l)) for v, t, l in zip(feats, tags, labels)]
    if method != "pca":
        raise ContractError(f"unknown export method {method!r}")
    if feats.shape[0] < 2:
        raise ContractError("pca needs at least 2 vectors")
    centered = feats - feats.mean(axis=0)
    cov = centered.T @ centered / (feats.shape[0] - 1)
    if not cov.any():
        raise NumericError("zero-variance data cannot be projected")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    basis = evecs[:, order]
    for j in range(basis.shape[1]):
        lead = np.argmax(np.abs(basis[:, j]))
        if basis[lead, j] < 0:
            basis[:, j] = -basis[:, j]
    proj = centered @ basis
    return [(float(x), float(y), t, int(l)) for (x, y), t, l in zip(proj, tags, labels)]


def modality_purity(feats: np.ndarray, tags: list[str]) -> float:
    """Fraction of embeddings whose nearest modality centroid is their own."""
    tags = np.asarray(tags)
    names = np.unique(tags)
    centroids = np.stack([feats[tags == t].mean(axis=0) for t in names])
    dists = ((feats[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    assigned = names[dists.argmin(axis=1)]
    return float((assigned == tags).mean())


def write_table(rows, header: str, path) -> None:
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")
