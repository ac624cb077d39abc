"""Command-line entry point: ``patchadapt <command> ...``.

Commands share a few on-disk artefacts: a benchmark root written by
``gen-data`` (one dataset directory per split), checkpoints, split
manifests from ``rank`` and pseudo-label datasets from ``pseudo-label``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .curriculum import (MODES, PatchSample, build_plan, evaluate, new_bundle, predict_labels,
                         run_curriculum, run_stage)
from .dataio import (MANIFEST, PALETTE, DatasetError, make_benchmark, read_benchmark,
                     read_dataset, write_benchmark, write_dataset)
from .nets import CheckpointError, load_checkpoint, save_checkpoint
from .report import comparison_table, dumps_report, read_report, write_report
from .uncertainty import generate_pseudo_labels, rank_scores, read_split_manifest, score_patches, \
    write_split_manifest

STAGES = ("1a", "1b", "2a", "2b")


class CliError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _benchmark(cfg: RunConfig, data):
    if data is None:
        return make_benchmark(cfg.seed, cfg.n_source, cfg.n_target, cfg.n_test,
                              cfg.patch_size, cfg.class_count, cfg.val_fraction)
    root = Path(data)
    if not root.is_dir():
        raise CliError(f"{root}: no such benchmark directory")
    return read_benchmark(root)


def _load(path):
    if not Path(path).exists():
        raise CliError(f"{path}: no such checkpoint")
    return load_checkpoint(path)


def _split_pools(bench, split_path) -> dict:
    if not Path(split_path).exists():
        raise CliError(f"{split_path}: no such split manifest")
    ranked = read_split_manifest(split_path)
    by_id = {s.id: s for s in bench.target}
    missing = [r.patch_id for r in ranked if r.patch_id not in by_id]
    if missing:
        raise CliError(f"split manifest names unknown target patch {missing[0]!r}")
    pools = {"easy": [], "hard": []}
    for r in ranked:
        s = by_id[r.patch_id]
        pools[r.bucket].append(PatchSample(s.image, None, "target", s.id, r.bucket))
    return pools


def _metrics_line(bundle, bench) -> str:
    val = evaluate(bundle, bench.target_val)["miou"]
    test = evaluate(bundle, bench.target_test)["miou"]
    return f"target val mIoU {val:.4f}  target test mIoU {test:.4f}"


# commands ---------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _config(args)
    bench = _benchmark(cfg, None)
    write_benchmark(bench, args.out)
    (Path(args.out) / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    counts = ", ".join(f"{k}={v}" for k, v in bench.stats().items())
    print(f"wrote {args.out}: {counts}")


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    bench = _benchmark(cfg, args.data)
    bundle = new_bundle(cfg, cfg.seed)
    stage = build_plan("canonical").stages[0]
    run_stage(stage, bundle, {"source": bench.source}, cfg, np.random.default_rng([cfg.seed, 1, 0]))
    save_checkpoint(bundle, args.out)
    src = evaluate(bundle, bench.source_test)["miou"]
    print(f"pretrain: source test mIoU {src:.4f}  {_metrics_line(bundle, bench)}")


def cmd_rank(args) -> None:
    cfg = _config(args)
    gamma = cfg.gamma if args.gamma is None else args.gamma
    if not 0 <= gamma <= 1:
        raise CliError(f"--gamma must lie in [0, 1], got {gamma}")
    bench = _benchmark(cfg, args.data)
    bundle = _load(args.checkpoint)
    ranked = rank_scores(score_patches(bundle.seg, bench.target), gamma)
    write_split_manifest(ranked, args.out)
    n_easy = sum(r.bucket == "easy" for r in ranked)
    print(f"wrote {args.out}: {n_easy} easy, {len(ranked) - n_easy} hard")


def cmd_pseudo_label(args) -> None:
    cfg = _config(args)
    bench = _benchmark(cfg, args.data)
    bundle = _load(args.checkpoint)
    pool = _split_pools(bench, args.split)[args.bucket]
    threshold = cfg.pseudo_threshold if args.threshold is None else args.threshold
    labels = generate_pseudo_labels(bundle, pool, threshold=threshold)
    by_id = {p.patch_id: p.labels for p in labels}
    write_dataset([PatchSample(s.image, by_id[s.id], "target", s.id) for s in pool], args.out)
    print(f"wrote {len(labels)} pseudo-labelled patches to {args.out}")


def cmd_adapt(args) -> None:
    cfg = _config(args)
    bench = _benchmark(cfg, args.data)
    bundle = _load(args.checkpoint)
    stage = {st.name: st for st in build_plan(args.mode).stages}[f"stage{args.stage}"]
    pools = {"source": bench.source, "all": bench.target}
    if stage.target in ("easy", "hard"):
        if args.split is None:
            raise CliError(f"stage {args.stage} needs --split (run `rank` first)")
        pools.update(_split_pools(bench, args.split))
    if "pseudo" in stage.labeled:
        if args.pseudo is None:
            raise CliError(f"stage {args.stage} needs --pseudo (run `pseudo-label` first)")
        pools["pseudo"] = [PatchSample(s.image, None, "target", s.id, None, s.label)
                           for s in read_dataset(args.pseudo)]
    rng = np.random.default_rng([cfg.seed, 1, bundle.stage_index])
    run_stage(stage, bundle, pools, cfg, rng)
    save_checkpoint(bundle, args.out)
    print(f"{stage.describe()}: {_metrics_line(bundle, bench)}")


def cmd_run(args) -> None:
    cfg = _config(args)
    bench = _benchmark(cfg, args.data)
    out = Path(args.out)
    report = run_curriculum(build_plan(args.mode), bench, cfg, seed=cfg.seed, out_dir=out)
    print(f"{args.mode} seed {cfg.seed}: final target test mIoU "
          f"{report['final']['test']['miou']:.4f} ({out / 'report.json'})")


def cmd_eval(args) -> None:
    bundle = _load(args.checkpoint)
    data = Path(args.data)
    if not (data / MANIFEST).exists():
        raise CliError(f"{data}: not a dataset directory (no {MANIFEST})")
    samples = [s for s in read_dataset(data) if s.label is not None]
    if not samples:
        raise CliError(f"{data}: no labelled samples to evaluate")
    metrics = evaluate(bundle, samples)
    report = {
        "checkpoint": str(args.checkpoint),
        "checkpoint_stage": bundle.stage,
        "fingerprint": bundle.fingerprint(),
        "data": str(data),
        "n_samples": len(samples),
        "test": metrics,
    }
    if args.out:
        write_report(report, args.out)
    else:
        sys.stdout.write(dumps_report(report))
    if args.png_dir:
        dump_label_pngs(samples, predict_labels(bundle, samples), args.png_dir)
    print(f"mIoU {metrics['miou']:.4f}  mean F1 {metrics['mean_f1']:.4f}", file=sys.stderr)


def dump_label_pngs(samples, preds, directory) -> None:
    """One palette-indexed PNG per prediction; pixel values are class indices."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    palette = (PALETTE * 255).round().astype(np.uint8).ravel().tolist()
    for s, pred in zip(samples, preds):
        img = Image.fromarray(np.ascontiguousarray(pred, dtype=np.uint8), mode="P")
        img.putpalette(palette)
        img.save(directory / f"{s.id}.png")


def cmd_report(args) -> None:
    reports = []
    for path in args.reports:
        p = Path(path)
        if p.is_dir():
            p = p / "report.json"
        if not p.exists():
            raise CliError(f"{path}: no such report")
        rep = read_report(p)
        if "mode" not in rep or "final" not in rep:
            raise CliError(f"{p}: not a curriculum run report")
        reports.append(rep)
    table = comparison_table(reports)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)


# parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patchadapt",
                                description="Easy-to-hard patch-level domain adaptation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data", help="benchmark root from gen-data (default: generate in memory)")

    sp = sub.add_parser("gen-data", help="write the synthetic benchmark to disk")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="train on labelled source patches only")
    common(sp)
    sp.add_argument("--out", required=True, help="checkpoint to write")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("rank", help="score target patches and write the easy/hard manifest")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--out", required=True, help="split manifest to write")
    sp.set_defaults(func=cmd_rank)

    sp = sub.add_parser("pseudo-label", help="label one bucket of target patches with a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--bucket", choices=("easy", "hard"), default="easy")
    sp.add_argument("--threshold", type=float, help="confidence below which pixels are ignored")
    sp.add_argument("--out", required=True, help="dataset directory to write")
    sp.set_defaults(func=cmd_pseudo_label)

    sp = sub.add_parser("adapt", help="run a single adaptation stage")
    common(sp)
    sp.add_argument("--stage", required=True, choices=STAGES)
    sp.add_argument("--mode", choices=MODES[:-1], default="canonical",
                    help="curriculum order that defines the stage's pools and classifier")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split")
    sp.add_argument("--pseudo", help="pseudo-label dataset for stages 2a/2b")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("run", help="full pipeline: pretrain, curriculum stages, report")
    common(sp)
    sp.add_argument("--mode", choices=MODES, default="canonical")
    sp.add_argument("--out", required=True, help="run directory")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a labelled dataset directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="report file (default: stdout)")
    sp.add_argument("--png-dir", help="also write palette-indexed prediction PNGs here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="merge run reports into a comparison table")
    sp.add_argument("reports", nargs="+", help="report.json files or run directories")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, DatasetError, CheckpointError, ValueError, OSError) as exc:
        print(f"patchadapt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
