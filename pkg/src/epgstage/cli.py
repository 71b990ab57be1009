"""Command-line pipeline: generate, preprocess, train, evaluate, cam, report.

All commands operate inside a run directory and leave a manifest (arguments,
config digest, input/output checksums, timing) under ``manifests/``.  Failures
print a one-line JSON object to stderr; exit codes are 0 (ok), 2 (bad input or
configuration), 3 (missing artifacts) and 4 (numeric failure).

Environment: ``EPG_SEED`` overrides the configured seed, ``EPG_THREADS`` caps
backend threads.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, explain, metrics, synthgen, zoo
from .checkpoint import CheckpointFormatError
from .config import RunConfig, config_digest, dump_config, load_config
from .metrics import PredictionTrace
from .preprocess import preprocess_recording
from .signal_io import (
    CLASS_NAMES,
    CLASS_PHASES,
    Phase,
    Segment,
    StoreCorruptionError,
    StoreFormatError,
    list_recordings,
    load_recording,
    read_store,
    write_store,
)
from .svgplot import line_chart
from .trainer import (
    FoldPlan,
    TrainingDivergedError,
    make_folds,
    predict,
    thread_limit,
    train_fold,
)


class MissingArtifactError(FileNotFoundError):
    """A command needs artifacts that an earlier stage has not produced."""


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(
    run: Path,
    command: str,
    args: argparse.Namespace,
    cfg: RunConfig,
    inputs: list[Path],
    outputs: list[Path],
    t0: float,
) -> None:
    mdir = run / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "tool_version": __version__,
        "config_digest": config_digest(cfg),
        "arguments": {
            k: str(v) for k, v in vars(args).items() if k != "func" and v is not None
        },
        "inputs": {str(p.relative_to(run)): _sha256(p) for p in sorted(inputs)},
        "outputs": {str(p.relative_to(run)): _sha256(p) for p in sorted(outputs)},
        "elapsed_s": round(time.perf_counter() - t0, 3),
    }
    (mdir / f"{command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _resolve_config(args: argparse.Namespace, run: Path) -> RunConfig:
    """--config beats the run's stored config; env/flag seeds beat the file."""
    explicit = getattr(args, "config", None)
    stored = run / "config.json"
    if explicit:
        cfg = load_config(explicit)
    elif stored.exists():
        cfg = load_config(stored)
    else:
        cfg = RunConfig()
    seed = None
    if os.environ.get("EPG_SEED"):
        seed = int(os.environ["EPG_SEED"])
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed is not None and seed != cfg.seed:
        cfg = dataclasses.replace(cfg, seed=seed)
        cfg.generator = dataclasses.replace(cfg.generator, seed=seed)
        cfg.train.seed = seed
    return cfg


def _load_stores(run: Path) -> dict[str, dict[str, list[Segment]]]:
    """{'PPS': {subject: segments}, 'Control': {...}} from the run's stores."""
    out: dict[str, dict[str, list[Segment]]] = {}
    for group, fname in (("PPS", "pps.epgs"), ("Control", "control.epgs")):
        path = run / "stores" / fname
        if not path.exists():
            raise MissingArtifactError(
                f"{path} not found; run `epgstage preprocess` first"
            )
        segments, _rate = read_store(path)
        by_subject: dict[str, list[Segment]] = {}
        for seg in segments:
            by_subject.setdefault(seg.subject_id, []).append(seg)
        for segs in by_subject.values():
            segs.sort(key=lambda s: s.start_time_s)
        out[group] = by_subject
    return out


def _fold_dirs(run: Path) -> list[Path]:
    train_dir = run / "train"
    if not train_dir.exists():
        return []
    return sorted(p for p in train_dir.iterdir() if (p / "checkpoint.epgw").exists())


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    cfg = _resolve_config(args, run)
    (run / "config.json").write_text(dump_config(cfg))
    rec_dir = run / "recordings"
    cohort = synthgen.make_cohort(cfg.generator, cfg.n_pps, cfg.n_control, rec_dir)
    outputs = [run / "config.json"] + sorted(rec_dir.iterdir())
    _write_manifest(run, "generate", args, cfg, [], outputs, t0)
    print(f"generated {len(cohort)} recordings into {rec_dir}")
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    run = Path(args.run)
    cfg = _resolve_config(args, run)
    rec_dir = run / "recordings"
    subjects = list_recordings(rec_dir)
    if not subjects:
        raise MissingArtifactError(
            f"no recordings under {rec_dir}; run `epgstage generate` first"
        )
    stores_dir = run / "stores"
    stores_dir.mkdir(parents=True, exist_ok=True)
    by_group: dict[str, list[Segment]] = {"PPS": [], "Control": []}
    summary: dict[str, dict] = {}
    inputs: list[Path] = []
    for sid in subjects:
        rec = load_recording(rec_dir, sid)
        inputs += [rec_dir / f"{sid}.npy", rec_dir / f"{sid}.meta.json"]
        segments, seg_summary = preprocess_recording(rec, cfg.outliers, cfg.discard)
        by_group[rec.group].extend(segments)
        summary[sid] = {
            "group": rec.group,
            "kept": seg_summary.n_kept,
            "discarded_missing": seg_summary.n_discarded_missing,
            "unlabeled": seg_summary.n_unlabeled,
            "outlier_samples": seg_summary.n_outlier_samples,
            "missing_samples": seg_summary.n_missing_samples,
            "discard_fraction": round(seg_summary.discard_fraction, 5),
            "per_phase": seg_summary.per_phase,
        }
    outputs = []
    for group, fname in (("PPS", "pps.epgs"), ("Control", "control.epgs")):
        path = stores_dir / fname
        write_store(path, by_group[group])
        outputs.append(path)
    summary_path = stores_dir / "preprocess_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    outputs.append(summary_path)
    _write_manifest(run, "preprocess", args, cfg, inputs, outputs, t0)
    kept = sum(s["kept"] for s in summary.values())
    print(f"preprocessed {len(subjects)} recordings; {kept} windows kept")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    run = Path(args.run)
    cfg = _resolve_config(args, run)
    model_name = args.model or cfg.model
    stores = _load_stores(run)
    pps = stores["PPS"]
    folds = make_folds(sorted(pps))
    if args.fold:
        folds = [f for f in folds if f.held_out == args.fold]
        if not folds:
            raise ValueError(
                f"no such subject {args.fold!r}; have {sorted(pps)}"
            )
    outputs = []
    for fold in folds:
        result = train_fold(pps, fold, model_name, cfg.model_overrides or None, cfg.train)
        fold_dir = run / "train" / f"fold_{fold.held_out}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        ckpt = fold_dir / "checkpoint.epgw"
        zoo.save_model(
            ckpt,
            result.model,
            extra_meta={
                "held_out": fold.held_out,
                "best_epoch": result.best_epoch,
                "n_train": result.n_train,
                "n_val": result.n_val,
                "seed": cfg.train.seed,
            },
        )
        curve = _write_csv(
            fold_dir / "curve.csv",
            ["epoch", "train_loss", "val_loss", "val_accuracy"],
            [
                [r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}", f"{r.val_accuracy:.4f}"]
                for r in result.curve
            ],
        )
        outputs += [ckpt, curve]
        print(
            f"fold {fold.held_out}: {len(result.curve)} epochs, best {result.best_epoch}, "
            f"val acc {result.curve[result.best_epoch].val_accuracy:.3f}, "
            f"{result.elapsed_s:.1f}s"
        )
    _write_manifest(run, "train", args, cfg, [], outputs, t0)
    return 0


def _load_fold_models(run: Path) -> list[tuple[str, zoo.Model]]:
    fold_dirs = _fold_dirs(run)
    if not fold_dirs:
        raise ValueError(
            f"no checkpoints under {run / 'train'}; run `epgstage train` first"
        )
    models = []
    for fd in fold_dirs:
        model, meta = zoo.load_model(fd / "checkpoint.epgw")
        models.append((meta.get("held_out", fd.name.removeprefix("fold_")), model))
    return models


def cmd_evaluate(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    run = Path(args.run)
    cfg = _resolve_config(args, run)
    stores = _load_stores(run)
    pps, controls = stores["PPS"], stores["Control"]
    models = _load_fold_models(run)

    eval_dir = run / "eval"
    traces_dir = eval_dir / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []

    held_traces: list[PredictionTrace] = []
    control_traces: list[PredictionTrace] = []
    fold_rows, fold_scores = [], []
    curves_series = []
    for held_out, model in models:
        if held_out not in pps:
            raise ValueError(f"checkpoint fold {held_out!r} has no stored segments")
        trace = predict(model, pps[held_out])
        held_traces.append(trace)
        path = traces_dir / f"heldout_{held_out}.csv"
        metrics.write_trace_csv(path, trace)
        outputs.append(path)
        for c, name in enumerate(CLASS_NAMES):
            auc, _ = metrics.roc_auc_ova(trace.probs, trace.labels, c)
            fold_rows.append([held_out, name, f"{auc:.6f}", len(trace)])
        fold_scores.append(
            metrics.score_fold([trace], held_out, cfg.eval.report_pool_s)
        )
        for sid, segs in sorted(controls.items()):
            ctrace = predict(model, segs)
            control_traces.append(ctrace)
            path = traces_dir / f"control_{held_out}_{sid}.csv"
            metrics.write_trace_csv(path, ctrace)
            outputs.append(path)
        curve_path = run / "train" / f"fold_{held_out}" / "curve.csv"
        if curve_path.exists():
            with open(curve_path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            curves_series.append(
                (
                    f"fold {held_out}",
                    np.array([int(r["epoch"]) for r in rows]),
                    np.array([float(r["val_loss"]) for r in rows]),
                )
            )

    outputs.append(
        _write_csv(
            eval_dir / "per_fold_auc.csv", ["fold", "class", "auc", "n_windows"], fold_rows
        )
    )

    # summary table at the configured report pooling
    srows = metrics.summary_rows(fold_scores)
    header = list(srows[0].keys())
    outputs.append(
        _write_csv(
            eval_dir / "metrics_summary.csv",
            header,
            [[r.get(k, "") for k in header] for r in srows],
        )
    )

    # aggregation curve (held-out subjects, fold-mean)
    pools = tuple(cfg.eval.pool_lengths_s)
    curve = metrics.auc_vs_pool_curve([[t] for t in held_traces], pools)
    pool_rows = [
        [p, f"{curve[p]['macro']:.6f}"] + [f"{curve[p][n]:.6f}" for n in CLASS_NAMES]
        for p in sorted(curve)
    ]
    outputs.append(
        _write_csv(
            eval_dir / "auc_vs_pool.csv",
            ["pool_s", "macro_auc"] + [f"auc_{n}" for n in CLASS_NAMES],
            pool_rows,
        )
    )
    xs = np.array(sorted(curve))
    outputs.append(
        line_chart(
            eval_dir / "auc_vs_pool.svg",
            [("macro AUC", xs, np.array([curve[int(p)]["macro"] for p in xs]))]
            + [
                (n, xs, np.array([curve[int(p)][n] for p in xs]))
                for n in CLASS_NAMES
            ],
            title="AUC vs aggregation window",
            x_label="pool length (s)",
            y_label="one-vs-all AUC",
            y_range=(0.5, 1.0),
        )
    )

    # pooled ROC points per class (native windows)
    probs, labels = metrics.concat_traces(held_traces)
    for c, name in enumerate(CLASS_NAMES):
        auc, points = metrics.roc_auc_ova(probs, labels, c)
        outputs.append(
            _write_csv(
                eval_dir / f"roc_{name}.csv",
                ["fpr", "tpr"],
                [[f"{x:.6f}", f"{y:.6f}"] for x, y in points],
            )
        )

    # control AUC, pooled across folds and control subjects
    if control_traces:
        cprobs, clabels = metrics.concat_traces(control_traces)
        rows = []
        for c, name in enumerate(CLASS_NAMES):
            auc, _ = metrics.roc_auc_ova(cprobs, clabels, c)
            rows.append([name, f"{auc:.6f}"])
        rows.append([
            "macro",
            f"{metrics.macro_auc(cprobs, clabels):.6f}",
        ])
        outputs.append(
            _write_csv(eval_dir / "control_auc.csv", ["class", "auc"], rows)
        )

    # score timelines: first held-out subject and first control, fold 0 model
    timeline_specs = [("pps", held_traces[0])]
    if control_traces:
        timeline_specs.append(("control", control_traces[0]))
    for kind, trace in timeline_specs:
        t, smoothed = metrics.class_score_timeline(trace, cfg.eval.smooth_s)
        rows = [
            [f"{t[i]:.1f}"] + [f"{smoothed[i, c]:.6f}" for c in range(len(CLASS_NAMES))]
            for i in range(t.size)
        ]
        outputs.append(
            _write_csv(
                eval_dir / f"timeline_{kind}_{trace.subject_id}.csv",
                ["time_s"] + [f"p_{n}" for n in CLASS_NAMES],
                rows,
            )
        )
        # shade true phase spans
        spans = []
        colors = {0: "#1f77b4", 1: "#ff7f0e", 2: "#d62728"}
        for c in range(3):
            idx = np.flatnonzero(trace.labels == c)
            if idx.size:
                spans.append(
                    (float(t[idx[0]]), float(t[idx[-1]] + 5.0), colors[c])
                )
        outputs.append(
            line_chart(
                eval_dir / f"timeline_{kind}_{trace.subject_id}.svg",
                [
                    (n, t, smoothed[:, c])
                    for c, n in enumerate(CLASS_NAMES)
                ],
                title=f"smoothed class scores: {trace.subject_id}",
                x_label="time (s)",
                y_label="score",
                y_range=(0.0, 1.0),
                spans=spans,
            )
        )

    if curves_series:
        outputs.append(
            line_chart(
                eval_dir / "val_loss_curves.svg",
                curves_series,
                title="validation loss per fold",
                x_label="epoch",
                y_label="val loss",
            )
        )

    _write_manifest(run, "evaluate", args, cfg, [], outputs, t0)
    macro5 = curve[min(curve)]["macro"]
    print(f"evaluated {len(models)} folds; unaggregated macro AUC {macro5:.3f}")
    return 0


def cmd_cam(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    run = Path(args.run)
    cfg = _resolve_config(args, run)
    stores = _load_stores(run)
    models = _load_fold_models(run)
    if args.fold:
        models = [m for m in models if m[0] == args.fold]
        if not models:
            raise ValueError(f"no checkpoint for fold {args.fold!r}")
    held_out, model = models[0]
    if not zoo.has_cam_head(model):
        raise explain.UnsupportedArchitectureError(
            f"{model.spec.name} has no activation-map head"
        )
    model64 = model.astype(np.float64)
    segments = stores["PPS"][held_out]

    cam_dir = run / "cam"
    cam_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []

    profile = explain.channel_profile(model64, segments)
    n_ch = profile.mean_activation.shape[1]
    outputs.append(
        _write_csv(
            cam_dir / "channel_profile.csv",
            ["channel"]
            + [f"mean_{n}" for n in CLASS_NAMES]
            + [f"norm_{n}" for n in CLASS_NAMES],
            [
                [ch]
                + [f"{profile.mean_activation[c, ch]:.6f}" for c in range(3)]
                + [f"{profile.normalized[c, ch]:.6f}" for c in range(3)]
                for ch in range(n_ch)
            ],
        )
    )
    sel_rows = []
    for c, name in enumerate(CLASS_NAMES):
        ratios = profile.selectivity(c)
        for ch in np.argsort(-ratios)[:5]:
            sel_rows.append([name, int(ch), f"{ratios[ch]:.3f}"])
    outputs.append(
        _write_csv(
            cam_dir / "selective_channels.csv", ["class", "channel", "ratio"], sel_rows
        )
    )

    trace = predict(model, segments)
    for c, name in enumerate(CLASS_NAMES):
        of_class = [i for i, s in enumerate(segments) if int(s.label) == c]
        if not of_class:
            continue
        ranked = sorted(of_class, key=lambda i: -trace.probs[i, c])[: args.count]
        for i in ranked:
            seg = segments[i]
            m = explain.cam(model64, seg, c)
            stem = f"cam_{name}_{seg.subject_id}_{int(seg.start_time_s)}"
            outputs.append(
                _write_csv(
                    cam_dir / f"{stem}.csv",
                    ["sample", "signal", "map", "highlight"],
                    [
                        [j, f"{seg.values[j]:.3f}", f"{m.upsampled[j]:.6f}", int(m.highlight[j])]
                        for j in range(seg.values.size)
                    ],
                )
            )
            t = np.arange(seg.values.size) / 512.0
            hl = [
                (float(lo / 512.0), float(hi / 512.0), "#d62728")
                for lo, hi in explain.highlight_spans(m.highlight)
            ]
            scale = float(np.abs(seg.values).max()) or 1.0
            map_scaled = m.upsampled / (np.abs(m.upsampled).max() or 1.0) * scale
            outputs.append(
                line_chart(
                    cam_dir / f"{stem}.svg",
                    [("signal", t, seg.values), ("activation map", t, map_scaled)],
                    title=f"{name} map, {seg.subject_id} @ {seg.start_time_s:.0f}s "
                    f"(p={m.prob:.2f})",
                    x_label="time (s)",
                    y_label="amplitude",
                    spans=hl,
                )
            )

    _write_manifest(run, "cam", args, cfg, [], outputs, t0)
    print(f"wrote activation maps for fold {held_out} into {cam_dir}")
    return 0


_REPORT_REQUIRED = (
    "config.json",
    "stores/preprocess_summary.json",
    "eval/per_fold_auc.csv",
    "eval/metrics_summary.csv",
    "eval/auc_vs_pool.csv",
    "eval/auc_vs_pool.svg",
    "eval/control_auc.csv",
    "cam/channel_profile.csv",
)


def cmd_report(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    run = Path(args.run)
    cfg = _resolve_config(args, run)
    missing = [rel for rel in _REPORT_REQUIRED if not (run / rel).exists()]
    if missing:
        raise MissingArtifactError(
            "report needs artifacts that are not present: " + ", ".join(missing)
        )
    lines = [
        "# Staging run report",
        "",
        f"- tool version: {__version__}",
        f"- config digest: `{config_digest(cfg)}`",
        f"- model: {cfg.model}",
        "",
        "## Windows kept per subject",
        "",
    ]
    summary = json.loads((run / "stores/preprocess_summary.json").read_text())
    lines.append("| subject | group | kept | discarded | discard % |")
    lines.append("|---|---|---|---|---|")
    for sid, s in sorted(summary.items()):
        lines.append(
            f"| {sid} | {s['group']} | {s['kept']} | {s['discarded_missing']} | "
            f"{100 * s['discard_fraction']:.2f} |"
        )

    def _table(rel: str, title: str):
        lines.extend(["", f"## {title}", ""])
        with open(run / rel, newline="") as fh:
            rows = list(csv.reader(fh))
        lines.append("| " + " | ".join(rows[0]) + " |")
        lines.append("|" + "---|" * len(rows[0]))
        for row in rows[1:]:
            lines.append("| " + " | ".join(row) + " |")

    _table("eval/per_fold_auc.csv", "Per-fold one-vs-all AUC (no aggregation)")
    _table("eval/metrics_summary.csv", "Cross-fold summary")
    _table("eval/auc_vs_pool.csv", "AUC vs aggregation window")
    _table("eval/control_auc.csv", "Control-cohort AUC (pooled)")
    lines.extend(
        [
            "",
            "## Figures",
            "",
            "- [AUC vs aggregation window](../eval/auc_vs_pool.svg)",
        ]
    )
    for svg in sorted((run / "eval").glob("timeline_*.svg")):
        lines.append(f"- [{svg.stem}](../eval/{svg.name})")
    for svg in sorted((run / "cam").glob("*.svg"))[:6]:
        lines.append(f"- [{svg.stem}](../cam/{svg.name})")
    report_dir = run / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    report_path = report_dir / "report.md"
    report_path.write_text("\n".join(lines) + "\n")
    _write_manifest(run, "report", args, cfg, [], [report_path], t0)
    print(f"wrote {report_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epgstage",
        description="Stage epileptogenesis phases from single-channel EEG windows.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--run", required=True, help="run directory")
        p.add_argument("--config", help="JSON config (otherwise RUN/config.json)")
        if seed:
            p.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser("generate", help="synthesize a labeled cohort")
    common(p, seed=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="clean recordings into segment stores")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train leave-one-subject-out folds")
    common(p)
    p.add_argument("--model", help="zoo member (default from config)")
    p.add_argument("--fold", help="train only the fold holding out this subject")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score held-out subjects and controls")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cam", help="write activation maps and channel profiles")
    common(p)
    p.add_argument("--fold", help="which fold's checkpoint to use")
    p.add_argument("--count", type=int, default=3, help="segments per class")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("report", help="assemble a markdown report from artifacts")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with thread_limit():
            return args.func(args)
    except MissingArtifactError as exc:
        return _fail(exc, 3)
    except (TrainingDivergedError, FloatingPointError, ArithmeticError) as exc:
        return _fail(exc, 4)
    except (
        StoreFormatError,
        StoreCorruptionError,
        CheckpointFormatError,
        ValueError,
        OSError,
        KeyError,
    ) as exc:
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
