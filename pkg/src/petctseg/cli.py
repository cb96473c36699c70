"""Single command-line entry point: synth, stats, train, boost, predict,
evaluate, render-overlay, describe-policy.

Exit codes: 0 success, 1 validation/config error (including usage errors),
2 runtime failure. Every run writes a reproducibility record (command,
arguments, seed, package version) next to its output.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .errors import ConfigError, FormatError, PetctsegError, ValidationError

DEFAULT_OUT_ENV = "PETCTSEG_OUT"


def _parse_triple(text: str, kind=int) -> tuple:
    parts = [kind(p) for p in str(text).replace("x", ",").split(",")]
    if len(parts) != 3:
        raise ConfigError(f"expected 3 comma-separated values, got {text!r}")
    return tuple(parts)


def _write_repro(out: Path, command: str, argv: Sequence[str], seed: Optional[int], extra: Optional[dict] = None) -> None:
    out = Path(out)
    target_dir = out if out.is_dir() or not out.suffix else out.parent
    target_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "package_version": __version__,
    }
    if extra:
        record.update(extra)
    (target_dir / f"repro-{command}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load_config(path: str):
    from . import io as pio

    return pio.load_run_config(path)


def _network_config(cfg):
    from . import network

    if cfg.network:
        return network.NetworkConfig.from_dict(cfg.network)
    return network.toy_config(patch_size=cfg.patch_size)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, argv) -> int:
    from . import synth

    out = Path(args.out)
    difficulties = args.difficulties
    synth.generate_corpus(
        out_dir=out,
        seed=args.seed,
        n_studies=args.n,
        shape=_parse_triple(args.shape),
        spacing=_parse_triple(args.spacing, float),
        difficulties=difficulties,
        n_lesions_range=(args.min_lesions, args.max_lesions),
    )
    _write_repro(out, "synth", argv, args.seed)
    print(f"wrote {args.n} synthetic studies to {out}")
    return 0


def cmd_stats(args, argv) -> int:
    from . import io as pio
    from . import preprocess

    manifest = pio.load_manifest(args.manifest)
    corpus = pio.Corpus(manifest)
    studies = [corpus.get(sid) for sid in manifest.positive_ids()]
    stats = preprocess.compute_foreground_stats(studies)
    out = Path(args.out)
    preprocess.save_stats(stats, out)
    _write_repro(out, "stats", argv, None)
    print(f"stats over {len(studies)} positive studies -> {out}")
    return 0


def cmd_describe_policy(args, argv) -> int:
    from . import augment

    print(augment.describe_policy(augment.get_policy(args.name)))
    return 0


def cmd_train(args, argv) -> int:
    from . import augment, io as pio, preprocess, trainer

    cfg = _load_config(args.config)
    manifest = pio.load_manifest(args.manifest or cfg.paths.get("manifest"))
    stats = preprocess.load_stats(args.stats or cfg.paths.get("stats"))
    out = Path(args.out or cfg.paths.get("out_dir") or _default_out())
    out.mkdir(parents=True, exist_ok=True)

    corpus = pio.Corpus(manifest)
    studies = [corpus.get(sid) for sid in manifest.positive_ids()]
    data = trainer.TrainingData(studies, stats, cfg.normalization)
    net_cfg = _network_config(cfg)

    from .types import SampleWeightTable

    if args.resume:
        ckpt = pio.load_checkpoint(args.resume)
        from . import network as net_mod

        net_cfg = net_mod.NetworkConfig.from_dict(ckpt.network)
        state = trainer.make_state(net_cfg, seed=cfg.seed)
        state.network.load_state_dict(ckpt.weights)
        state.lineage = tuple(ckpt.lineage)
        table = ckpt.weight_table.with_ids_added(data.ids())
    else:
        state = trainer.make_state(net_cfg, seed=cfg.seed)
        table = SampleWeightTable({sid: 1 for sid in data.ids()})

    policy = augment.get_policy(cfg.augmentation)

    def checkpoint_cb(abs_epoch: int) -> None:
        pio.save_checkpoint(
            out / f"checkpoint_epoch{abs_epoch:05d}.pt",
            weights=state.network.state_dict(),
            network=net_cfg.to_dict(),
            weight_table=table,
            round_index=0,
            per_sample_dice={},
            lineage=state.lineage,
            run_config=cfg,
        )

    state = trainer.train(
        state,
        data,
        table,
        policy,
        cfg.epochs,
        cfg.learning_rate,
        batch_size=cfg.batch_size,
        patch_size=cfg.patch_size,
        log_path=out / "train.log.jsonl",
        epoch_callback=checkpoint_cb if cfg.checkpoint_every else None,
        checkpoint_every=cfg.checkpoint_every,
    )
    pio.save_checkpoint(
        out / "checkpoint_final.pt",
        weights=state.network.state_dict(),
        network=net_cfg.to_dict(),
        weight_table=table,
        round_index=0,
        per_sample_dice={},
        lineage=state.lineage,
        run_config=cfg,
    )
    _write_repro(out, "train", argv, cfg.seed, {"config": cfg.to_dict()})
    print(f"trained {cfg.epochs} epochs -> {out / 'checkpoint_final.pt'}")
    return 0


def cmd_boost_run(args, argv) -> int:
    from . import boosting, io as pio, preprocess, trainer

    cfg = _load_config(args.config)
    if not cfg.boost_rounds:
        raise ConfigError("run config has no boost_rounds")
    manifest = pio.load_manifest(cfg.paths.get("manifest"))
    stats = preprocess.load_stats(cfg.paths.get("stats"))
    out = Path(args.out or cfg.paths.get("out_dir") or _default_out())
    out.mkdir(parents=True, exist_ok=True)

    if not cfg.partition_sizes:
        raise ConfigError("config partition_sizes must name the initial split, e.g. {'A': 30, 'B': 10}")
    partitions = pio.split_dataset(manifest, cfg.seed, cfg.partition_sizes)

    corpus = pio.Corpus(manifest)
    studies = [corpus.get(sid) for sid in manifest.positive_ids()]
    by_id = {s.id: s for s in studies}
    data = trainer.TrainingData(studies, stats, cfg.normalization)
    net_cfg = _network_config(cfg)

    rounds = [boosting.BoostRound.from_dict(d) for d in cfg.boost_rounds]
    train_fn = boosting.default_train_fn(
        data, net_cfg, batch_size=cfg.batch_size, patch_size=cfg.patch_size, log_dir=out
    )
    evaluate_fn = boosting.default_evaluate_fn(by_id, stats, patch_size=cfg.patch_size, overlap=cfg.overlap)
    result = boosting.run_schedule(rounds, partitions, cfg.seed, train_fn, evaluate_fn, out_dir=out)

    for name, rr in result.rounds.items():
        pio.save_checkpoint(
            out / f"checkpoint_{name}.pt",
            weights=rr.state.network.state_dict(),
            network=net_cfg.to_dict(),
            weight_table=rr.weight_table,
            round_index=list(result.rounds).index(name),
            per_sample_dice=dict(rr.dice.values),
            lineage=rr.state.lineage,
            run_config=cfg,
        )
    _write_repro(out, "boost-run", argv, cfg.seed, {"config": cfg.to_dict()})
    print(boosting.format_audit_table(result.audit, partitions=tuple(result.partitions)))
    print(f"schedule complete -> {out}")
    return 0


def cmd_boost_audit(args, argv) -> int:
    from . import boosting

    audit_path = Path(args.run_dir) / "audit.jsonl"
    if not audit_path.exists():
        raise ConfigError(f"no audit log at {audit_path}")
    entries = [json.loads(ln) for ln in audit_path.read_text().splitlines() if ln.strip()]
    names: list[str] = []
    for e in entries:
        for p in e.get("extras_by_partition", {}):
            if p not in names:
                names.append(p)
    print(boosting.format_audit_table(entries, partitions=tuple(names)))
    return 0


def cmd_predict(args, argv) -> int:
    from . import inference, io as pio, network as net_mod, preprocess, trainer

    ckpt = pio.load_checkpoint(args.checkpoint)
    net_cfg = net_mod.NetworkConfig.from_dict(ckpt.network)
    state = trainer.make_state(net_cfg, seed=0)
    state.network.load_state_dict(ckpt.weights)

    manifest = pio.load_manifest(args.manifest)
    corpus = pio.Corpus(manifest)
    study = corpus.get(args.study)
    stats = preprocess.load_stats(args.stats)
    normalized = preprocess.normalize_study(study, stats)

    out = Path(args.out)
    patch = _parse_triple(args.patch) if args.patch else None
    prob = inference.probability_map(state, normalized, patch_size=patch, overlap=args.overlap)
    mask = pio.LabelMask(grid=prob.grid, values=(prob.values > 0.5).astype("uint8"))
    pio.save_mask(mask, out)
    if args.prob:
        pio.save_volume(prob, Path(args.prob))
    _write_repro(out, "predict", argv, None)
    print(f"predicted {args.study}: {int(mask.values.sum())} foreground voxels -> {out}")
    return 0


def cmd_evaluate(args, argv) -> int:
    from . import io as pio, metrics

    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    pred_files = sorted(pred_dir.glob("*.nii.gz"))
    if not pred_files:
        raise ConfigError(f"no .nii.gz predictions under {pred_dir}")
    rows = []
    voxel_volumes = []
    for pf in pred_files:
        study_id = pf.name[: -len(".nii.gz")]
        gf = gt_dir / pf.name
        if not gf.exists():
            raise ConfigError(f"missing ground truth for {study_id!r}: {gf}")
        pred = pio.load_mask(pf)
        gt = pio.load_mask(gf)
        rows.append(metrics.evaluate_pair(study_id, pred, gt, connectivity=args.connectivity))
        voxel_volumes.append(pred.grid.voxel_volume_ml)
    report = metrics.aggregate(rows, connectivity=args.connectivity, voxel_volumes_ml=voxel_volumes)
    out = Path(args.out)
    metrics.write_report_csv(report, out)
    metrics.write_report_metadata(report, out.with_suffix(".meta.json"))
    _write_repro(out, "evaluate", argv, None)
    print(
        f"evaluated {len(rows)} studies: mean dice {report.mean_dice:.4f}, "
        f"FPvol {report.mean_fpvol_ml:.4f} mL, FNvol {report.mean_fnvol_ml:.4f} mL -> {out}"
    )
    return 0


def cmd_render_overlay(args, argv) -> int:
    from . import io as pio, render

    manifest = pio.load_manifest(args.manifest)
    corpus = pio.Corpus(manifest)
    study = corpus.get(args.study)
    gt = study.label if args.gt == "manifest" else (pio.load_mask(args.gt) if args.gt else None)
    pred = pio.load_mask(args.pred) if args.pred else None
    out = Path(args.out)
    manifest_out = render.render_overlay(study, gt, pred, out, mode=args.mode)
    _write_repro(out, "render-overlay", argv, None)
    print(f"rendered {len(manifest_out['files'])} panels -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch


def _default_out() -> str:
    import os

    return os.environ.get(DEFAULT_OUT_ENV, "runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="petctseg",
        description="Dual-channel PET/CT lesion segmentation with sample-attention boosting.",
    )
    parser.add_argument("--version", action="version", version=f"petctseg {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic phantom corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--shape", default="32,32,32")
    p.add_argument("--spacing", default="3,2,2")
    p.add_argument("--difficulties", default="uniform", choices=("uniform", "bimodal"))
    p.add_argument("--min-lesions", type=int, default=1)
    p.add_argument("--max-lesions", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="compute corpus foreground normalization statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("describe-policy", help="print an augmentation policy's full parameterization")
    p.add_argument("name")
    p.set_defaults(func=cmd_describe_policy)

    p = sub.add_parser("train", help="plain training from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest")
    p.add_argument("--stats")
    p.add_argument("--out")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("boost", help="boosting schedule commands")
    bsub = p.add_subparsers(dest="boost_command")
    pb = bsub.add_parser("run", help="run the boosting schedule from a run config")
    pb.add_argument("--config", required=True)
    pb.add_argument("--out")
    pb.set_defaults(func=cmd_boost_run)
    pa = bsub.add_parser("audit", help="print the per-round boosting table for a run directory")
    pa.add_argument("run_dir")
    pa.set_defaults(func=cmd_boost_audit)

    p = sub.add_parser("predict", help="sliding-window inference for one study")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--study", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prob")
    p.add_argument("--patch")
    p.add_argument("--overlap", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Dice/FPvol/FNvol report over prediction and truth directories")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--connectivity", type=int, default=18, choices=(6, 18, 26))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render-overlay", help="PET overlay images with mask contours")
    p.add_argument("--manifest", required=True)
    p.add_argument("--study", required=True)
    p.add_argument("--pred")
    p.add_argument("--gt", default="manifest", help="'manifest', a mask path, or '' for none")
    p.add_argument("--mode", default="slice", choices=("slice", "mip"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_overlay)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if not getattr(args, "func", None):
        parser.print_usage(file=sys.stderr)
        return 1
    try:
        return int(args.func(args, argv) or 0)
    except (ConfigError, ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PetctsegError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
