"""Operator-facing command line: every pipeline stage as a subcommand.

All numeric results are printed and also written as comma-separated files
under the --out directory, next to the fully resolved config, so a run
directory is sufficient to reproduce the run bit-exactly.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import align as align_mod
from . import evaluate as eval_mod
from . import persist
from .adapt import ProbeConfig, extract_cls_features, train_linear_probe, train_sbora
from .config import RunConfig, parse_kv_file, validate_config
from .data import SyntheticCorpusSpec, class_prompts, generate_corpus, generate_paired_corpus, split_corpus
from .encoder import MODALITIES, OmniEncoder
from .errors import ConfigError, OmnicError
from .pretrain import (
    AugmentationConfig,
    ContrastiveConfig,
    OptimizerState,
    augment,
    run_pretraining,
    write_loss_log,
)

SUBCOMMANDS = (
    "gen-data",
    "pretrain",
    "knn",
    "probe",
    "sbora",
    "align",
    "zeroshot",
    "metrics",
    "attn",
    "export-emb",
)


def _load_config(args) -> RunConfig:
    doc = parse_kv_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key] = value
    return validate_config(doc, overrides)


def _prepare_out(args, cfg: RunConfig) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.txt"), "w") as f:
        f.write("\n".join(cfg.resolved_lines()) + "\n")
    return out


def _corpus_seed(cfg: RunConfig, modality: str) -> int:
    return cfg.seed * 1000 + {"image": 1, "audio": 2, "text": 3}[modality]


def _stores(cfg: RunConfig):
    """Deterministic per-modality (train, holdout) stores."""
    enc_cfg = cfg.encoder_config()
    stores = {}
    for modality in MODALITIES:
        spec = SyntheticCorpusSpec(
            modality=modality,
            n_classes=cfg.n_classes,
            per_class=cfg.per_class,
            noise=cfg.noise,
            seed=_corpus_seed(cfg, modality),
        )
        corpus = generate_corpus(spec, enc_cfg)
        stores[modality] = split_corpus(corpus, cfg.holdout_fraction, seed=cfg.seed)
    return stores


def _paired_corpus(cfg: RunConfig):
    enc_cfg = cfg.encoder_config()
    spec = SyntheticCorpusSpec(
        modality=cfg.paired_modality,
        n_classes=cfg.align_classes,
        per_class=cfg.align_pairs_per_class,
        noise=cfg.noise,
        seed=cfg.seed * 1000 + 7,
    )
    return generate_paired_corpus(spec, enc_cfg)


def _augmentation_config(cfg: RunConfig) -> AugmentationConfig:
    return AugmentationConfig(
        crop_scale=(cfg.crop_scale_min, cfg.crop_scale_max),
        flip_p=cfg.flip_p,
        jitter=cfg.jitter,
        blur_p=cfg.blur_p,
        masks_per_axis=cfg.masks_per_axis,
        max_time_mask_frac=cfg.max_time_mask_frac,
        max_freq_mask_frac=cfg.max_freq_mask_frac,
        token_mask_p=cfg.token_mask_p,
    )


def _checkpoint_path(args, out) -> str:
    return args.checkpoint or os.path.join(out, "checkpoint.bin")


def _write_metrics(out, name, rows, header):
    path = os.path.join(out, name)
    eval_mod.write_table(rows, header, path)
    return path


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig, out: str) -> int:
    rows = []
    for modality, (train, hold) in _stores(cfg).items():
        counts = np.bincount([s.label for s in train], minlength=cfg.n_classes)
        rows.append((modality, len(train), len(hold), " ".join(map(str, counts))))
    pairs = _paired_corpus(cfg)
    rows.append((f"paired_{cfg.paired_modality}_text", len(pairs), 0, ""))
    _write_metrics(out, "corpus_manifest.csv", rows, "store,train,holdout,train_class_counts")
    for row in rows:
        print(f"{row[0]}: train={row[1]} holdout={row[2]}")
    return 0


def cmd_pretrain(args, cfg: RunConfig, out: str) -> int:
    stores = {m: train for m, (train, _) in _stores(cfg).items()}
    enc = OmniEncoder(cfg.encoder_config(), seed=cfg.seed)
    opt = OptimizerState(
        base_lr=cfg.lr,
        min_lr=cfg.min_lr,
        weight_decay=cfg.weight_decay,
        warmup_epochs=cfg.warmup_epochs,
    )
    result = run_pretraining(
        enc,
        stores,
        ContrastiveConfig(temperature=cfg.temperature, batch_size=cfg.batch_size),
        _augmentation_config(cfg),
        opt,
        epochs=cfg.epochs,
        seed=cfg.seed,
        schedule_mode=cfg.schedule_mode,
    )
    write_loss_log(result.log_rows, os.path.join(out, "loss_log.csv"))
    persist.write_checkpoint(result.encoder, _checkpoint_path(args, out), meta={"run_seed": cfg.seed})
    if result.diverged:
        print("training diverged; checkpoint holds the last good epoch", file=sys.stderr)
        return 2
    print(f"pretrained {cfg.epochs} epochs, checkpoint at {_checkpoint_path(args, out)}")
    return 0


def cmd_knn(args, cfg: RunConfig, out: str) -> int:
    enc, _ = persist.read_checkpoint(_checkpoint_path(args, out))
    rows = []
    for modality, (train, hold) in _stores(cfg).items():
        train_f = extract_cls_features(enc, train)
        hold_f = extract_cls_features(enc, hold)
        acc = eval_mod.knn_accuracy(
            train_f,
            [s.label for s in train],
            hold_f,
            [s.label for s in hold],
            k=min(cfg.knn_k, len(train)),
            temperature=cfg.knn_temperature,
        )
        rows.append((modality, acc))
        print(f"knn {modality}: top1={acc:.4f}")
    _write_metrics(out, "knn.csv", rows, "modality,top1")
    return 0


def cmd_probe(args, cfg: RunConfig, out: str) -> int:
    enc, _ = persist.read_checkpoint(_checkpoint_path(args, out))
    probe_cfg = ProbeConfig(
        lr=cfg.probe_lr,
        min_lr=cfg.probe_min_lr,
        weight_decay=cfg.weight_decay,
        warmup_epochs=cfg.probe_warmup_epochs,
        epochs=cfg.probe_epochs,
        holdout_fraction=cfg.holdout_fraction,
        seed=cfg.seed,
    )
    rows = []
    for modality, (train, hold) in _stores(cfg).items():
        _, acc = train_linear_probe(enc, train + hold, probe_cfg)
        rows.append((modality, acc))
        print(f"probe {modality}: top1={acc:.4f}")
    _write_metrics(out, "probe.csv", rows, "modality,top1")
    return 0


def cmd_sbora(args, cfg: RunConfig, out: str) -> int:
    enc, _ = persist.read_checkpoint(_checkpoint_path(args, out))
    train, hold = _stores(cfg)[cfg.sbora_modality]
    probe_cfg = ProbeConfig(
        lr=cfg.probe_lr,
        min_lr=cfg.probe_min_lr,
        weight_decay=cfg.weight_decay,
        warmup_epochs=min(cfg.probe_warmup_epochs, cfg.sbora_epochs),
        epochs=cfg.sbora_epochs,
        holdout_fraction=cfg.holdout_fraction,
        seed=cfg.seed,
    )
    _, acc = train_sbora(enc, train + hold, rank=cfg.sbora_rank, alpha=cfg.sbora_alpha, cfg=probe_cfg)
    persist.write_checkpoint(enc, os.path.join(out, "sbora_checkpoint.bin"), meta={"run_seed": cfg.seed})
    _write_metrics(out, "sbora.csv", [(cfg.sbora_modality, cfg.sbora_rank, acc)], "modality,rank,top1")
    print(f"sbora {cfg.sbora_modality}: rank={cfg.sbora_rank} top1={acc:.4f}")
    return 0


def cmd_align(args, cfg: RunConfig, out: str) -> int:
    enc, _ = persist.read_checkpoint(_checkpoint_path(args, out))
    pairs = _paired_corpus(cfg)
    train_pairs, _ = split_corpus(pairs, cfg.holdout_fraction, seed=cfg.seed)
    cache = align_mod.cache_features(enc, train_pairs)
    persist.write_feature_cache(cache, os.path.join(out, "feature_cache.bin"))
    head = align_mod.AlignmentHead(enc.config.embed_dim, enc.config.proj_dim, seed=cfg.seed)
    log = align_mod.train_alignment(
        cache,
        head,
        align_mod.AlignmentConfig(
            lr=cfg.align_lr,
            min_lr=cfg.align_min_lr,
            weight_decay=cfg.weight_decay,
            warmup_epochs=cfg.align_warmup_epochs,
            epochs=cfg.align_epochs,
            batch_size=cfg.align_batch_size,
            seed=cfg.seed,
        ),
    )
    save_alignment_head(head, os.path.join(out, "align_head.bin"))
    _write_metrics(out, "align_loss.csv", log, "epoch,step,loss,lr")
    print(f"alignment trained for {cfg.align_epochs} epochs, final loss {log[-1][2]:.4f}")
    return 0


def save_alignment_head(head: align_mod.AlignmentHead, path) -> None:
    persist._write_container(
        path,
        b"OMNA",
        [f"dtype={head.dtype}"],
        [
            ("proj_a", head.dtype, head.proj_a.data),
            ("proj_b", head.dtype, head.proj_b.data),
            ("log_scale", head.dtype, head.log_scale.data),
        ],
    )


def load_alignment_head(path) -> align_mod.AlignmentHead:
    fields, tensors = persist._read_container(path, b"OMNA")
    d, q = tensors["proj_a"].shape
    head = align_mod.AlignmentHead(d, q, dtype=fields.get("dtype", "f32"))
    head.proj_a.data = np.ascontiguousarray(tensors["proj_a"], dtype=head.proj_a.data.dtype)
    head.proj_b.data = np.ascontiguousarray(tensors["proj_b"], dtype=head.proj_b.data.dtype)
    head.log_scale.data = np.ascontiguousarray(tensors["log_scale"], dtype=head.log_scale.data.dtype)
    return head


def cmd_zeroshot(args, cfg: RunConfig, out: str) -> int:
    enc, _ = persist.read_checkpoint(_checkpoint_path(args, out))
    head = load_alignment_head(args.head or os.path.join(out, "align_head.bin"))
    pairs = _paired_corpus(cfg)
    _, hold_pairs = split_corpus(pairs, cfg.holdout_fraction, seed=cfg.seed)
    queries = [a for a, _ in hold_pairs]
    labels = np.array([s.label for s in queries])
    prompts = class_prompts(cfg.align_classes)
    class_emb = align_mod.embed_class_prompts(enc, head, prompts)
    feats = extract_cls_features(enc, queries)
    preds = align_mod.zero_shot_classify(feats, class_emb, head)
    acc = float((preds == labels).mean())
    cache = align_mod.cache_features(enc, hold_pairs)
    recall = align_mod.retrieval_at_k(cache, head, k=1, match="class")
    pair_recall = align_mod.retrieval_at_k(cache, head, k=1, match="pair")
    rows = (
        [("zero_shot_top1", acc)]
        + sorted((f"class_r1_{k}", v) for k, v in recall.items())
        + sorted((f"pair_r1_{k}", v) for k, v in pair_recall.items())
    )
    _write_metrics(out, "zeroshot.csv", rows, "metric,value")
    for name, value in rows:
        print(f"{name}={value:.4f}")
    return 0


def cmd_metrics(args, cfg: RunConfig, out: str) -> int:
    enc, _ = persist.read_checkpoint(_checkpoint_path(args, out))
    aug_cfg = _augmentation_config(cfg)
    rows = []
    all_feats, all_tags = [], []
    for modality, (train, _) in _stores(cfg).items():
        rng = np.random.default_rng(cfg.seed + 11)
        samples = train[: cfg.metric_samples]
        v1 = [augment(s, aug_cfg, rng) for s in samples]
        v2 = [augment(s, aug_cfg, rng) for s in samples]
        f1 = extract_cls_features(enc, v1)
        f2 = extract_cls_features(enc, v2)
        f1n = f1 / np.linalg.norm(f1, axis=1, keepdims=True)
        f2n = f2 / np.linalg.norm(f2, axis=1, keepdims=True)
        a = eval_mod.alignment_metric(f1n, f2n)
        u = eval_mod.uniformity_metric(f1n)
        rows.append((modality, a, u, len(samples)))
        all_feats.append(extract_cls_features(enc, samples))
        all_tags.extend([modality] * len(samples))
        print(f"{modality}: alignment={a:.4f} uniformity={u:.4f}")
    purity = eval_mod.modality_purity(np.concatenate(all_feats), all_tags)
    rows.append(("modality_purity", purity, 0.0, len(all_tags)))
    print(f"modality_purity={purity:.4f}")
    _write_metrics(out, "metrics.csv", rows, "name,alignment,uniformity,samples")
    return 0


def cmd_attn(args, cfg: RunConfig, out: str) -> int:
    enc, _ = persist.read_checkpoint(_checkpoint_path(args, out))
    for modality, (train, _) in _stores(cfg).items():
        avg = eval_mod.average_attention_map(enc, train[: cfg.metric_samples])
        rows = [tuple(map(float, row)) for row in avg]
        _write_metrics(out, f"attn_{modality}.csv", rows, ",".join(f"t{j}" for j in range(avg.shape[1])))
        print(f"attn {modality}: {avg.shape[0]}x{avg.shape[1]} map, row sums ~1")
    return 0


def cmd_export_emb(args, cfg: RunConfig, out: str) -> int:
    enc, _ = persist.read_checkpoint(_checkpoint_path(args, out))
    feats, labels, tags = [], [], []
    for modality, (train, _) in _stores(cfg).items():
        samples = train[: cfg.metric_samples]
        feats.append(extract_cls_features(enc, samples))
        labels.extend(s.label for s in samples)
        tags.extend([modality] * len(samples))
    rows = eval_mod.export_embeddings_2d(np.concatenate(feats), np.array(labels), tags, method=args.method)
    _write_metrics(out, "embeddings_2d.csv", rows, "x,y,modality,label")
    print(f"exported {len(rows)} embedding rows")
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "knn": cmd_knn,
    "probe": cmd_probe,
    "sbora": cmd_sbora,
    "align": cmd_align,
    "zeroshot": cmd_zeroshot,
    "metrics": cmd_metrics,
    "attn": cmd_attn,
    "export-emb": cmd_export_emb,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnic", description="Unified multimodal encoder pipeline")
    sub = parser.add_subparsers(dest="command")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", default="run", help="output directory")
        p.add_argument("--checkpoint", default=None, help="checkpoint path (default <out>/checkpoint.bin)")
        if name == "zeroshot":
            p.add_argument("--head", default=None, help="alignment head path")
        if name == "export-emb":
            p.add_argument("--method", default="pca", choices=["pca", "raw"])
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = _load_config(args)
        out = _prepare_out(args, cfg)
        return _HANDLERS[args.command](args, cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (OmnicError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
