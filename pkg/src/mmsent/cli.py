"""Command-line surface for the whole pipeline.

Subcommands:
  gen-synthetic   write a synthetic two-modality corpus
  extract         cache acoustic features, one file per utterance per kind
  train-branch    pretrain one branch (--modality audio|text)
  train-fusion    train the fused model end to end
  evaluate        score a trained fused checkpoint on the test split
  export-heatmap  dump per-video attention weight tables
  grad-check      finite-difference audit of layers and the full model

Exit codes: 0 on success; 1 on data, config, or numeric errors, with a
single-line message on stderr; 2 on usage errors (unknown subcommand
or flag).  Artifacts land under --out, or a fresh directory named by
seed and timestamp when --out is omitted; outputs contain no
timestamps, so a rerun into the same directory writes the same bytes.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import dsp
from .audio import AudioBranch
from .audit import TOLERANCE, run_grad_audit
from .config import load_config
from .containers import (
    load_checkpoint,
    load_embedding_table,
    save_checkpoint,
    save_feature_cache,
)
from .data import CorpusManifest, generate_synthetic_corpus, load_manifest, split_corpus
from .errors import ConfigError, DataError, MmsentError
from .fusion import FusedModel
from .metrics import multi_run_average
from .text import EmbeddingProvider, TextBranch
from .train import (
    BranchHead,
    evaluate_branch,
    evaluate_fusion,
    export_heatmaps,
    train_branch,
    train_fusion,
    write_curve,
)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mmsent",
        description="Audio-text sentiment fusion pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic",
                       help="write a synthetic two-modality corpus")
    p.add_argument("--spec", help="configuration file ([synthetic] section)")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--seed", type=int, help="override synthetic.seed")
    p.add_argument("--classes", type=int, help="override synthetic.classes")

    p = sub.add_parser("extract",
                       help="cache acoustic features per utterance per kind")
    p.add_argument("--manifest", required=True, help="corpus manifest path")
    p.add_argument("--config", help="configuration file")
    p.add_argument("--kinds", help="comma-separated feature kinds "
                                   "(default: audio.feature_kinds)")
    p.add_argument("--out", required=True, help="cache output directory")

    for modality in ("train-branch", "train-fusion"):
        p = sub.add_parser(modality,
                           help="pretrain one branch" if modality == "train-branch"
                           else "train the fused model")
        p.add_argument("--manifest", required=True, help="corpus manifest path")
        p.add_argument("--config", help="configuration file")
        p.add_argument("--out", help="run directory (default: run-s<seed>-<stamp>)")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--runs", type=int, help="override train.runs")
        if modality == "train-branch":
            p.add_argument("--modality", required=True,
                           choices=("audio", "text"),
                           help="which branch to pretrain")

    p = sub.add_parser("evaluate",
                       help="score a trained fused checkpoint on the test split")
    p.add_argument("--manifest", required=True, help="corpus manifest path")
    p.add_argument("--config", help="configuration file")
    p.add_argument("--model", required=True, help="fused checkpoint path")
    p.add_argument("--out", help="directory for metrics.json (optional)")

    p = sub.add_parser("export-heatmap",
                       help="dump per-video attention weight tables")
    p.add_argument("--manifest", required=True, help="corpus manifest path")
    p.add_argument("--config", help="configuration file")
    p.add_argument("--model", required=True, help="fused checkpoint path")
    p.add_argument("--out", required=True, help="heatmap output directory")

    p = sub.add_parser("grad-check",
                       help="finite-difference audit of layers and the full model")
    p.add_argument("--seed", type=int, default=0, help="audit seed")
    p.add_argument("--runs", type=int, default=100,
                   help="seeded trials per check (default 100)")

    return parser


def _run_dir(out, seed):
    if out:
        return out
    return f"run-s{seed}-{time.strftime('%Y%m%d-%H%M%S')}"


def _overrides(args, keys):
    """Flag values, when present, become config overrides."""
    pairs = []
    for flag, dotted in keys:
        value = getattr(args, flag, None)
        if value is not None:
            pairs.append(f"{dotted}={value}")
    return pairs


def _report_dict(report):
    return {
        "run_id": report.run_id,
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
        "per_class": report.per_class,
        "confusion": report.confusion.tolist(),
    }


def _write_metrics(out_dir, per_run, averaged):
    payload = {"runs": [_report_dict(r) for r in per_run],
               "averaged": _report_dict(averaged)}
    path = os.path.join(out_dir, "metrics.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(averaged.lines()) + "\n")
    return path


def _load_provider(cfg, manifest_path):
    """Embedding table from text.embeddings, falling back to
    embeddings.bin next to the manifest."""
    path = cfg.get("text", "embeddings")
    if not path:
        path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)),
                            "embeddings.bin")
    if not os.path.isfile(path):
        raise ConfigError(
            f"no embedding table at {path}; set text.embeddings or place "
            "embeddings.bin next to the manifest"
        )
    table, width = load_embedding_table(path)
    want = cfg.get("text", "embedding_width")
    if width != want:
        raise ConfigError(
            f"embedding table at {path} is {width} wide but "
            f"text.embedding_width is {want}"
        )
    return EmbeddingProvider(table)


def _fit_featurizer(cfg, manifest):
    featurizer = cfg.featurizer()
    featurizer.fit(manifest.split("train"))
    return featurizer


def _train_val_split(manifest, val_fraction, seed):
    train_manifest = CorpusManifest(manifest.split("train"), manifest.n_classes)
    return split_corpus(train_manifest, 1.0 - val_fraction, seed=seed)


def cmd_gen_synthetic(args):
    cfg = load_config(args.spec, _overrides(args, (
        ("seed", "synthetic.seed"), ("classes", "synthetic.classes"))))
    manifest = generate_synthetic_corpus(cfg.synthetic_spec(), args.out)
    print(f"wrote {len(manifest)} utterances in {len(manifest.videos)} videos "
          f"to {args.out}")
    return 0


def cmd_extract(args):
    cfg = load_config(args.config)
    manifest = load_manifest(args.manifest)
    kinds = (tuple(k.strip() for k in args.kinds.split(",") if k.strip())
             if args.kinds else cfg.get("audio", "feature_kinds"))
    if not kinds:
        raise ConfigError("no feature kinds requested")
    window = cfg.get("features", "window")
    hop = cfg.get("features", "hop")
    n_mels = cfg.get("features", "n_mels")
    os.makedirs(args.out, exist_ok=True)
    written = 0
    for rec in manifest.records:
        w = dsp.load_wav(rec.wav)
        for kind in kinds:
            seq = dsp.extract_feature(kind, w, window, hop, n_mels)
            save_feature_cache(os.path.join(args.out, f"{rec.id}.{kind}.feat"),
                               seq)
            written += 1
    print(f"wrote {written} feature files ({len(manifest)} utterances x "
          f"{len(kinds)} kinds) to {args.out}")
    return 0


def _branch_pieces(cfg, modality, manifest_path, rng):
    """Trainable dict, vector width, forward closure, and extra
    checkpoint state for one modality."""
    if modality == "audio":
        branch = AudioBranch(cfg.audio_config(), cfg.lstm_in_width(), rng)

        def forward(item, mode, drop_rng):
            return branch.forward_asv(item.lstm_features, item.cnn_input,
                                      mode=mode, rng=drop_rng).values

        return (branch.parameters(), branch.cfg.asv_width, forward,
                lambda: branch.conv.running_stats("conv/"))
    provider = _load_provider(cfg, manifest_path)
    branch = TextBranch(cfg.text_config(), rng)

    def forward(item, mode, drop_rng):
        return branch.forward_tsv(provider, item.tokens, item.pos_tags,
                                  mode=mode, rng=drop_rng).values

    return branch.parameters(), branch.cfg.tsv_width, forward, None


def cmd_train_branch(args):
    cfg = load_config(args.config, _overrides(args, (
        ("seed", "train.seed"), ("runs", "train.runs"))))
    tc = cfg.train_config()
    manifest = load_manifest(args.manifest)
    out_dir = _run_dir(args.out, tc.seed)
    os.makedirs(out_dir, exist_ok=True)
    featurizer = _fit_featurizer(cfg, manifest)
    fit_part, val_part = _train_val_split(manifest, tc.val_fraction, tc.seed)
    train_items = [featurizer.featurize(r) for r in fit_part.records]
    val_items = [featurizer.featurize(r) for r in val_part.records]
    test_items = [featurizer.featurize(r) for r in manifest.split("test")]

    reports = []
    for run in range(tc.runs):
        run_cfg = cfg.train_config()
        run_cfg.seed = tc.seed + run
        rng = np.random.default_rng(run_cfg.seed)
        trainable, width, forward, extra = _branch_pieces(
            cfg, args.modality, args.manifest, rng)
        head = BranchHead(width, manifest.n_classes, rng)
        result = train_branch(forward, trainable, head, train_items,
                              val_items, run_cfg, extra_state=extra)
        write_curve(os.path.join(out_dir, f"run{run}-curve.jsonl"),
                    result.records)
        state = dict(result.best_state)
        state.update(featurizer.state_arrays())
        save_checkpoint(os.path.join(out_dir, f"run{run}-best.ckpt"), state)
        if test_items:
            reports.append(evaluate_branch(forward, head, test_items,
                                           run_id=run))
    if reports:
        _write_metrics(out_dir, reports, multi_run_average(reports))
        averaged = multi_run_average(reports)
        print(f"{args.modality} branch: test accuracy "
              f"{averaged.accuracy:.4f}, macro-F1 {averaged.macro_f1:.4f} "
              f"over {tc.runs} runs; artifacts in {out_dir}")
    else:
        print(f"{args.modality} branch trained ({tc.runs} runs, no test "
              f"split); artifacts in {out_dir}")
    return 0


def _build_fused(cfg, manifest_path, rng):
    provider = _load_provider(cfg, manifest_path)
    audio = AudioBranch(cfg.audio_config(), cfg.lstm_in_width(), rng)
    text = TextBranch(cfg.text_config(), rng)
    return FusedModel(audio, text, provider, cfg.fusion_config(), rng)


def _featurized_videos(featurizer, manifest, split):
    return [(video, [featurizer.featurize(r) for r in records])
            for video, records in manifest.split_videos(split).items()]


def cmd_train_fusion(args):
    cfg = load_config(args.config, _overrides(args, (
        ("seed", "train.seed"), ("runs", "train.runs"))))
    tc = cfg.train_config()
    manifest = load_manifest(args.manifest)
    out_dir = _run_dir(args.out, tc.seed)
    os.makedirs(out_dir, exist_ok=True)
    featurizer = _fit_featurizer(cfg, manifest)
    fit_part, val_part = _train_val_split(manifest, tc.val_fraction, tc.seed)
    train_videos = [(v, [featurizer.featurize(r) for r in recs])
                    for v, recs in fit_part.videos.items()]
    val_videos = [(v, [featurizer.featurize(r) for r in recs])
                  for v, recs in val_part.videos.items()]
    test_videos = _featurized_videos(featurizer, manifest, "test")

    reports = []
    best_overall = None
    for run in range(tc.runs):
        run_cfg = cfg.train_config()
        run_cfg.seed = tc.seed + run
        model = _build_fused(cfg, args.manifest, np.random.default_rng(run_cfg.seed))
        result = train_fusion(model, train_videos, val_videos, run_cfg)
        write_curve(os.path.join(out_dir, f"run{run}-curve.jsonl"),
                    result.records)
        state = dict(result.best_state)
        state.update(featurizer.state_arrays())
        save_checkpoint(os.path.join(out_dir, f"run{run}-best.ckpt"), state)
        val_losses = [r["loss"] for r in result.records if r["split"] == "val"]
        run_best = min(val_losses) if val_losses else float("inf")
        if best_overall is None or run_best < best_overall[0]:
            best_overall = (run_best, state)
        if test_videos:
            model.load_state_arrays(result.best_state)
            reports.append(evaluate_fusion(model, test_videos, run_id=run)[0])
    save_checkpoint(os.path.join(out_dir, "model.ckpt"), best_overall[1])
    if reports:
        averaged = multi_run_average(reports)
        _write_metrics(out_dir, reports, averaged)
        print(f"fused model: test accuracy {averaged.accuracy:.4f}, "
              f"macro-F1 {averaged.macro_f1:.4f} over {tc.runs} runs; "
              f"artifacts in {out_dir}")
    else:
        print(f"fused model trained ({tc.runs} runs, no test split); "
              f"artifacts in {out_dir}")
    return 0


def _restore_fused(cfg, manifest_path, model_path):
    arrays = load_checkpoint(model_path)
    feat_state = {k: v for k, v in arrays.items() if k.startswith("feat/")}
    model_state = {k: v for k, v in arrays.items() if not k.startswith("feat/")}
    featurizer = cfg.featurizer()
    featurizer.load_state_arrays(feat_state)
    model = _build_fused(cfg, manifest_path, np.random.default_rng(0))
    model.load_state_arrays(model_state)
    return featurizer, model


def cmd_evaluate(args):
    cfg = load_config(args.config)
    manifest = load_manifest(args.manifest)
    featurizer, model = _restore_fused(cfg, args.manifest, args.model)
    test_videos = _featurized_videos(featurizer, manifest, "test")
    if not test_videos:
        raise DataError("manifest has no test split to evaluate")
    report, _ = evaluate_fusion(model, test_videos)
    for line in report.lines():
        print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_metrics(args.out, [report], report)
    return 0


def cmd_export_heatmap(args):
    cfg = load_config(args.config)
    manifest = load_manifest(args.manifest)
    featurizer, model = _restore_fused(cfg, args.manifest, args.model)
    test_videos = _featurized_videos(featurizer, manifest, "test")
    if not test_videos:
        raise DataError("manifest has no test split to export")
    paths = export_heatmaps(model, test_videos, args.out)
    print(f"wrote {len(paths)} heatmap files to {args.out}")
    return 0


def cmd_grad_check(args):
    rows = run_grad_audit(seed=args.seed, trials=args.runs)
    for row in rows:
        verdict = "ok" if row["ok"] else "FAIL"
        print(f"{verdict:4s} {row['name']:20s} max_rel_err={row['max_rel_err']:.3e} "
              f"tolerance={TOLERANCE:.0e} trials={row['trials']}")
    return 0 if all(row["ok"] for row in rows) else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "gen-synthetic": cmd_gen_synthetic,
        "extract": cmd_extract,
        "train-branch": cmd_train_branch,
        "train-fusion": cmd_train_fusion,
        "evaluate": cmd_evaluate,
        "export-heatmap": cmd_export_heatmap,
        "grad-check": cmd_grad_check,
    }
    try:
        return handlers[args.command](args)
    except MmsentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
