"""Command-line interface.

Commands: generate, pretrain, train, evaluate, export-graphs,
sweep-thresholds, report. One YAML config file drives a full experiment;
flags override file values. Exit codes: 0 success, 2 config error, 3 data
error, 4 storage/IO error, 5 runtime error (e.g. diverged training),
1 unexpected failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import storage
from .config import (
    RunConfig,
    load_run_config,
    parse_ratio,
)
from .data import Recording, SegmentSet, segment
from .errors import (
    ConfigError,
    DataValidationError,
    EpiwaveError,
    MappingError,
    SamplingInfeasibleError,
    SaturationError,
    StorageError,
    TrainingDivergedError,
    UndefinedMetricError,
    UndefinedScoreError,
)
from .metrics import evaluate, make_eval_sets, ratio_label
from .model import (
    AblationFlags,
    DetectionModel,
    load_detection_checkpoint,
    save_detection_checkpoint,
)
from .pretraining import load_checkpoint, pretrain, save_checkpoint
from .reporting import render_run, write_history_csv, write_metrics_outputs, write_rows_csv
from .synth import PlantedTruth, event_segment_windows, generate, truth_alignment_score
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_STORAGE = 4
EXIT_RUNTIME = 5

OUT_ROOT_ENV = "EPIWAVE_OUT_ROOT"

_DATA_ERRORS = (DataValidationError, MappingError, SamplingInfeasibleError,
                SaturationError, UndefinedScoreError, UndefinedMetricError)


def _resolve_out(explicit: str | None, config: RunConfig, command: str) -> Path:
    if explicit:
        return Path(explicit)
    root = config.paths.out_root or os.environ.get(OUT_ROOT_ENV, "epiwave_runs")
    return Path(root) / command


def _load_config(args) -> RunConfig:
    overrides: dict[str, dict] = {}
    seed = getattr(args, "seed", None)
    if seed is not None:
        overrides = {
            "scenario": {"seed": seed},
            "pretraining": {"seed": seed},
            "training": {"seed": seed},
            "evaluation": {"seed": seed},
        }
    return load_run_config(getattr(args, "config", None), overrides)


def _load_segments(path: str | Path, config: RunConfig) -> SegmentSet:
    obj = storage.load(path)
    if isinstance(obj, Recording):
        return segment(obj, config.segmentation)
    return obj


def _train_span(segments: SegmentSet, config: RunConfig) -> SegmentSet:
    n_train = int(segments.n_segments * config.split.train_fraction)
    return segments.take(np.arange(n_train))


def _eval_span(segments: SegmentSet, config: RunConfig) -> tuple[SegmentSet, int]:
    n_train = int(segments.n_segments * config.split.train_fraction)
    return segments.take(np.arange(n_train, segments.n_segments)), n_train


def _normal_pretrain_pool(segments: SegmentSet, max_segments: int,
                          seed: int) -> np.ndarray:
    """One-channel segments with label 0, uniformly subsampled."""
    t_idx, c_idx = np.nonzero(segments.channel_labels == 0)
    if len(t_idx) == 0:
        raise DataValidationError("no normal segments available for pretraining")
    rng = np.random.default_rng(seed)
    take = min(max_segments, len(t_idx))
    pick = rng.choice(len(t_idx), size=take, replace=False)
    return segments.data[t_idx[pick], c_idx[pick], :]


def cmd_generate(args) -> int:
    config = _load_config(args)
    out = _resolve_out(args.out, config, "generate")
    recording, truth = generate(config.scenario)
    out.mkdir(parents=True, exist_ok=True)
    rec_path = storage.store(recording, out / "recording.epw")
    truth_path = truth.save(out / "truth.json")
    ratio = float(recording.labels.mean())
    print(f"recording: {rec_path}")
    print(f"truth: {truth_path}")
    print(f"seed: {config.scenario.seed}")
    print(f"events: {len(truth.events)}")
    print(f"positive_ratio: {ratio:.6f}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    out = _resolve_out(args.out, config, "pretrain")
    segments = _load_segments(args.data, config)
    train_span = _train_span(segments, config)
    settings = config.pretraining
    if args.steps is not None:
        settings.steps = args.steps
    pool = _normal_pretrain_pool(train_span, args.sample_segments, settings.seed)
    model, history = pretrain(pool, config.contrastive, settings)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = save_checkpoint(model, out / "pretrained.pt",
                           extra={"settings": settings.to_dict(),
                                  "config_hash": config.config_hash()})
    write_history_csv(history, out / "pretrain_curve.csv")
    print(f"checkpoint: {ckpt}")
    print(f"steps: {settings.steps}")
    print(f"final_val_loss: {history['val_loss'][-1]:.6f}")
    return EXIT_OK


def _parse_ablation(tokens: list[str] | None) -> AblationFlags:
    flags = {}
    known = set(AblationFlags().to_dict())
    for token in tokens or []:
        for name in token.split(","):
            name = name.strip()
            if not name:
                continue
            if name not in known:
                raise ConfigError(f"unknown ablation flag {name!r}; known: {sorted(known)}")
            flags[name] = True
    return AblationFlags(**flags)


def cmd_train(args) -> int:
    config = _load_config(args)
    out = _resolve_out(args.out, config, "train")
    ablation = _parse_ablation(args.ablate)
    train_cfg: TrainConfig = config.training
    train_cfg.ablation = ablation
    if args.freeze_encoder:
        train_cfg.freeze_encoder = True
    if args.epochs is not None:
        train_cfg.epochs = args.epochs

    segments = _load_segments(args.data, config)
    train_span = _train_span(segments, config)
    pretrained = None
    if not ablation.no_bcpc:
        if args.pretrained is None:
            raise ConfigError("--pretrained is required unless --ablate no_bcpc")
        pretrained, _ = load_checkpoint(args.pretrained)
    try:
        result = train(pretrained, train_span, None, train_cfg)
    except TrainingDivergedError as exc:
        out.mkdir(parents=True, exist_ok=True)
        if exc.last_good_state is not None:
            import torch

            torch.save({"kind": "last_good_state", "state_dict": exc.last_good_state},
                       out / "last_good.pt")
            print(f"last-good state saved to {out / 'last_good.pt'}", file=sys.stderr)
        raise
    out.mkdir(parents=True, exist_ok=True)
    ckpt = save_detection_checkpoint(
        result.model, out / "model.pt",
        extra={"train_config": train_cfg.to_dict(),
               "ablation": ablation.tag(),
               "config_hash": config.config_hash(),
               "best_epoch": result.best_epoch,
               "best_val_f2": result.best_val_f2})
    write_history_csv(result.history, out / "curve.csv")
    print(f"checkpoint: {ckpt}")
    print(f"ablation: {ablation.tag()}")
    print(f"best_epoch: {result.best_epoch}")
    print(f"best_val_f2: {result.best_val_f2:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    out = _resolve_out(args.out, config, "evaluate")
    model, extra = load_detection_checkpoint(args.model)
    segments = _load_segments(args.data, config)
    span, offset = _eval_span(segments, config)
    ratios = ([parse_ratio(r) for r in args.ratios.split(",")]
              if args.ratios else config.evaluation.ratio_tuples())
    eval_sets = make_eval_sets(span, ratios=ratios,
                               count_positive=config.evaluation.count_positive,
                               seed=config.evaluation.seed)
    report = evaluate(model, span, eval_sets, metadata={
        "seed": config.evaluation.seed,
        "config_hash": config.config_hash(),
        "ablation": extra.get("ablation", model.ablation.tag()),
        "eval_span_offset": offset,
        "counts": {label: int(s.n_pairs) for label, s in eval_sets.items()},
    })
    write_metrics_outputs(report, out)
    print(report.grid_text())
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


def cmd_export_graphs(args) -> int:
    config = _load_config(args)
    out = _resolve_out(args.out, config, "export-graphs")
    model, _ = load_detection_checkpoint(args.model)
    segments = _load_segments(args.data, config)
    start, length = args.start, args.length
    if start < 0 or length < 1 or start + length > segments.n_segments:
        raise DataValidationError(
            f"span [{start}, {start + length}) outside 0..{segments.n_segments}")
    span = segments.take(np.arange(start, start + length))
    traced = model.trace_graphs(span.data)

    n_files = 0
    for level, kinds in traced.items():
        for kind, graphs in kinds.items():
            for t, graph in enumerate(graphs):
                if graph is None:
                    continue
                graph.save(out / level / f"{kind}_t{start + t:05d}.json")
                n_files += 1
    print(f"graphs_dir: {out}")
    print(f"files: {n_files}")

    truth = None
    truth_path = args.truth
    if truth_path is None:
        candidate = Path(args.data).parent / "truth.json"
        truth_path = candidate if candidate.exists() else None
    if truth_path is not None:
        truth = PlantedTruth.load(truth_path)
    if truth is not None:
        planted = np.asarray(truth.planted_graph) > 0
        off_diag = ~np.eye(planted.shape[0], dtype=bool)
        windows_abs = event_segment_windows(truth, segments.config, segments.n_segments)
        active = set(int(w) for w in windows_abs)
        rows = []
        cross_graphs = traced["channel"]["cross"]
        for t, graph in enumerate(cross_graphs):
            adj = graph.adjacency
            rows.append({
                "step": start + t,
                "mean_weight_planted": float(adj[planted & off_diag].mean()),
                "mean_weight_other": float(adj[(~planted) & off_diag].mean()),
                "edges": int((adj > 0).sum()),
                "event_active": int((start + t) in active),
            })
        write_rows_csv(rows, out / "edge_weights.csv")
        local_windows = [w - start for w in windows_abs
                         if start <= w < start + length]
        if local_windows:
            score = truth_alignment_score(
                [g.adjacency for g in cross_graphs], truth, local_windows)
            (out / "alignment.json").write_text(json.dumps(
                {"alignment_score": score, "event_windows": len(local_windows)},
                indent=2) + "\n")
            print(f"alignment_score: {score:.4f}")
        else:
            print("alignment_score: n/a (no event windows in span)")
    return EXIT_OK


def _grid_values(text: str | None, default: list[float]) -> list[float]:
    if not text:
        return default
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad threshold grid {text!r}") from exc
    if not values:
        raise ConfigError("threshold grid is empty")
    return values


def cmd_sweep_thresholds(args) -> int:
    config = _load_config(args)
    out = _resolve_out(args.out, config, "sweep-thresholds")
    inner_grid = _grid_values(args.inner, [0.05, 0.1, 0.3, 0.6])
    cross_grid = _grid_values(args.cross, [0.02, 0.05, 0.2, 0.5])
    metric_ratio = parse_ratio(args.ratio)

    segments = _load_segments(args.data, config)
    train_span = _train_span(segments, config)
    eval_span, _ = _eval_span(segments, config)
    eval_sets = make_eval_sets(eval_span, ratios=[metric_ratio],
                               count_positive=config.evaluation.count_positive,
                               seed=config.evaluation.seed)
    pretrained = None
    if args.pretrained is not None:
        pretrained, _ = load_checkpoint(args.pretrained)

    base_cfg = config.training
    if args.epochs is not None:
        base_cfg.epochs = args.epochs
    if pretrained is None:
        base_cfg.ablation = AblationFlags(no_bcpc=True)

    label = ratio_label(metric_ratio)
    rows = []
    reference_model: DetectionModel | None = None
    ref_point = (min(inner_grid), min(cross_grid))
    for theta_in in inner_grid:
        for theta_cr in cross_grid:
            cfg = TrainConfig(**{**base_cfg.to_dict(),
                                 "inner_threshold": theta_in,
                                 "cross_threshold": theta_cr})
            result = train(pretrained, train_span, None, cfg)
            report = evaluate(result.model, eval_span, eval_sets)
            m = report.results[label]["channel"]
            rows.append({
                "inner_threshold": theta_in,
                "cross_threshold": theta_cr,
                "channel_f2": m.f2,
                "channel_auc": m.auc,
                "best_val_f2": result.best_val_f2,
            })
            if (theta_in, theta_cr) == ref_point:
                reference_model = result.model

    # sparsity column: apply each grid threshold to the score matrices of the
    # reference run (trained at the loosest grid point, so its surviving
    # weights equal the raw scores wherever any grid threshold could keep
    # them); counts are then exactly non-increasing in theta
    probe_len = min(64, eval_span.n_segments)
    traced = reference_model.trace_graphs(eval_span.take(np.arange(probe_len)).data)
    cross_w = np.concatenate([g.adjacency.ravel()
                              for g in traced["channel"]["cross"]])
    inner_w = np.concatenate([g.adjacency.ravel()
                              for g in traced["channel"]["inner"]])
    for row in rows:
        row["cross_edges"] = int((cross_w >= row["cross_threshold"]).sum())
        row["inner_edges"] = int((inner_w >= row["inner_threshold"]).sum())

    best = max(rows, key=lambda r: r["channel_f2"])
    on_boundary = (
        best["inner_threshold"] in (min(inner_grid), max(inner_grid))
        or best["cross_threshold"] in (min(cross_grid), max(cross_grid)))
    summary = {
        "best_inner_threshold": best["inner_threshold"],
        "best_cross_threshold": best["cross_threshold"],
        "best_channel_f2": best["channel_f2"],
        "best_on_grid_boundary": bool(on_boundary),
        "boundary_note": ("best point sits on the swept grid boundary; widen "
                          "the grid to bracket the optimum" if on_boundary else ""),
        "metric_ratio": label,
        "grid_inner": inner_grid,
        "grid_cross": cross_grid,
    }
    out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, out / "sweep.csv")
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"sweep: {out / 'sweep.csv'}")
    print(f"best: inner={best['inner_threshold']:g} cross={best['cross_threshold']:g} "
          f"channel_f2={best['channel_f2']:.2f}")
    if on_boundary:
        print("note: best point on grid boundary")
    return EXIT_OK


def cmd_report(args) -> int:
    rendered = render_run(args.run)
    if not rendered:
        print(f"nothing to render under {args.run}")
    for path in rendered:
        print(f"figure: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epiwave",
        description="Synthetic-data pipeline for multichannel epileptic-wave "
                    "detection with learned diffusion graphs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run-config file")
        p.add_argument("--seed", type=int, help="override every section seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("generate", help="simulate a recording + planted truth")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="self-supervised pretraining on normal segments")
    common(p)
    p.add_argument("--data", required=True, help="recording or segment-set file")
    p.add_argument("--steps", type=int, help="override pretraining steps")
    p.add_argument("--sample-segments", type=int, default=4096,
                   help="max normal segments sampled for the pretext task")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the detection model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", help="pretraining checkpoint")
    p.add_argument("--ablate", action="append",
                   help="ablation flags (repeatable or comma-separated): "
                        "no_bcpc,no_graph,no_inner,no_cross,no_hierarchy")
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metric grid on ratio-stratified subsets")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="detection checkpoint")
    p.add_argument("--ratios", help="comma list, default 1:5,1:50,1:500")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-graphs", help="dump learned diffusion graphs for a span")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--start", type=int, default=0, help="first segment index")
    p.add_argument("--length", type=int, default=10, help="segments in the span")
    p.add_argument("--truth", help="planted-truth JSON (default: alongside --data)")
    p.set_defaults(func=cmd_export_graphs)

    p = sub.add_parser("sweep-thresholds", help="train/evaluate over a threshold grid")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", help="pretraining checkpoint (omit to ablate)")
    p.add_argument("--inner", help="comma list of inner-time thresholds")
    p.add_argument("--cross", help="comma list of cross-time thresholds")
    p.add_argument("--ratio", default="1:50", help="ratio for the swept metric")
    p.add_argument("--epochs", type=int, help="override training epochs per point")
    p.set_defaults(func=cmd_sweep_thresholds)

    p = sub.add_parser("report", help="render figures for a run directory")
    p.add_argument("--run", required=True, help="directory with run outputs")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StorageError, FileNotFoundError) as exc:
        print(f"storage error: {exc}", file=sys.stderr)
        return EXIT_STORAGE
    except TrainingDivergedError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except EpiwaveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
