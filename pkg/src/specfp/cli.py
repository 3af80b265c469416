"""Command-line interface.

Subcommands: ingest, synth, spectrogram, train, evaluate, sweep, crosseval.
Exit codes: 0 success, 1 internal error, 2 input validation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .config import (
    RunConfig,
    Sections,
    apply_overrides,
    derive_seed,
    load_sections,
    run_config_from_sections,
)
from .errors import ParseError, ValidationError
from .evaluation import (
    ExperimentConfig,
    SweepRow,
    cross_config_eval,
    enumerate_configs,
    evaluate,
    write_crossconfig_cells_csv,
    write_crossconfig_grid_csv,
    write_confusion_csv,
    write_per_class_csv,
    write_report_csv,
    write_sweep_csv,
)
from .figures import (
    save_confusion_figure,
    save_crosseval_figure,
    save_history_figure,
    save_packet_stats_figure,
    save_sweep_figure,
)
from .imaging import save_png, save_stats_sidecar
from .pipeline import (
    assemble_dataset,
    build_spectrograms,
    load_run_dir,
    rebuild_test_set,
    render_spectrogram,
    run_experiment,
    save_run_dir,
    _bounds_for,
    _check_corpus,
)
from .synth import generate_trace, profile_from_mapping
from .traces import load_traces, save_traces, trace_stats, write_stats_csv

log = logging.getLogger("specfp")

DEFAULT_SYNTH_LENGTH = 16000


def _resolve_config(args) -> RunConfig:
    """Config file, then --set overrides, then dedicated flags."""
    sections: Sections = {}
    if getattr(args, "config", None):
        sections = load_sections(args.config)
    cfg = run_config_from_sections(sections)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        dotted, sep, value = item.partition("=")
        if not sep:
            raise ParseError(f"--set expects section.key=value, got {item!r}")
        overrides[dotted.strip()] = value.strip()
    cfg = apply_overrides(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _require_traces(cfg: RunConfig) -> RunConfig:
    if not cfg.traces_path:
        raise ParseError("config is missing [data] traces=<path>")
    return replace(cfg, traces_path=os.path.abspath(cfg.traces_path))


def cmd_ingest(args) -> int:
    stats = []
    for path in args.traces:
        for trace in load_traces(path):
            stats.append(trace_stats(trace))
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "stats.csv")
    with open(csv_path, "w") as fh:
        write_stats_csv(stats, fh)
    fig_path = os.path.join(args.out, "packet_stats.png")
    save_packet_stats_figure(stats, fig_path)
    print(f"wrote {csv_path} ({len(stats)} devices) and {fig_path}")
    return 0


def cmd_synth(args) -> int:
    sections = load_sections(args.config)
    shared = sections.get("synth", {})
    default_length = int(shared.get("length", DEFAULT_SYNTH_LENGTH))
    base_seed = args.seed if args.seed is not None else int(shared.get("seed", 0))

    device_sections = []
    for name, mapping in sections.items():
        if not name.startswith("device"):
            continue
        try:
            device_id = int(name.split(" ", 1)[1])
        except (IndexError, ValueError):
            raise ParseError(f"bad device section [{name}], expected [device N]") from None
        device_sections.append((device_id, mapping))
    if not device_sections:
        raise ParseError(f"{args.config} defines no [device N] sections")

    traces = []
    for device_id, mapping in sorted(device_sections):
        profile = profile_from_mapping(mapping)
        if "seed" not in mapping:
            profile = replace(profile, seed=derive_seed(base_seed, "synth", device_id))
        length = int(mapping.get("length", default_length))
        traces.append(generate_trace(
            profile, length, device_id, device_name=mapping.get("name")))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_traces(traces, args.out)
    print(f"wrote {args.out} ({len(traces)} devices, "
          f"{sum(t.count for t in traces)} packets)")
    return 0


def cmd_spectrogram(args) -> int:
    cfg = _require_traces(_resolve_config(args))
    traces = _check_corpus(load_traces(cfg.traces_path))
    specs = build_spectrograms(traces, cfg, args.cache)
    bundle = assemble_dataset(specs, cfg, augment_cfg=None)
    os.makedirs(args.out, exist_ok=True)
    n_png = 0
    for dev in sorted(specs):
        bounds = _bounds_for(bundle.bounds, cfg.bounds_mode, dev)
        for i, spec in enumerate(specs[dev]):
            img = render_spectrogram(spec, bounds, cfg.image_size, cfg.colormap)
            name = f"{dev}_{i}_{cfg.method}_{cfg.resolution}.png"
            save_png(img, os.path.join(args.out, name))
            n_png += 1
    sidecar = os.path.join(args.out, "stats.txt")
    save_stats_sidecar(sidecar, bundle.bounds, bundle.stats)
    print(f"wrote {n_png} images and {sidecar} to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _require_traces(_resolve_config(args))
    traces = load_traces(cfg.traces_path)
    log.info("training on %d devices from %s", len(traces), cfg.traces_path)
    result = run_experiment(traces, cfg, args.cache)
    save_run_dir(args.out, result)
    save_history_figure(result.history, os.path.join(args.out, "history.png"))
    best = next(r for r in result.history.rows if r.epoch == result.history.best_epoch)
    print(f"wrote run directory {args.out} (best epoch {best.epoch}, "
          f"val acc {100 * best.val_acc:.2f}%, "
          f"stopped_early={result.history.stopped_early})")
    return 0


def cmd_evaluate(args) -> int:
    cfg, traces, pipe = load_run_dir(args.run_dir)
    pixels, labels = rebuild_test_set(cfg, traces, pipe, args.cache)
    preds = pipe.classify_pixels(pixels)
    report = evaluate(
        preds, labels,
        num_classes=len(traces),
        resamples=cfg.resamples,
        level=cfg.ci_level,
        seed=derive_seed(cfg.seed, "bootstrap"),
    )
    out = args.out or args.run_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.csv"), "w") as fh:
        write_report_csv(report, fh)
    with open(os.path.join(out, "per_class.csv"), "w") as fh:
        write_per_class_csv(report, fh)
    with open(os.path.join(out, "confusion.csv"), "w") as fh:
        write_confusion_csv(report, fh)
    save_confusion_figure(report, os.path.join(out, "confusion.png"))
    print(f"test accuracy {report.accuracy_pct:.2f}% "
          f"(95% CI [{report.ci_low:.2f}, {report.ci_high:.2f}], "
          f"n={report.n_test}); reports in {out}")
    return 0


def _sweep_task(base_cfg: RunConfig, exp: ExperimentConfig, cache_dir) -> SweepRow:
    label = f"sweep:{exp.method}:{exp.resolution}:{exp.seg_len}:{exp.overlap!r}"
    cfg = replace(
        base_cfg,
        method=exp.method,
        resolution=exp.resolution,
        seg_len=exp.seg_len,
        overlap=exp.overlap,
        seed=derive_seed(base_cfg.seed, label),
    )
    traces = load_traces(cfg.traces_path)
    result = run_experiment(traces, cfg, cache_dir)
    best = next(r for r in result.history.rows if r.epoch == result.history.best_epoch)
    return SweepRow(
        config=exp,
        train_pct=100.0 * best.train_acc,
        val_pct=100.0 * best.val_acc,
        test_pct=result.report.accuracy_pct,
        weighted_f1=result.report.weighted_f1,
        ci_width_pct=result.report.ci_width_pct,
    )


def cmd_sweep(args) -> int:
    base_cfg = _require_traces(_resolve_config(args))
    configs = enumerate_configs()
    tasks = [(base_cfg, exp, args.cache) for exp in configs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_task, *zip(*tasks)))
    else:
        rows = []
        for i, task in enumerate(tasks, start=1):
            log.info("config %d/%d: %s", i, len(tasks), task[1])
            rows.append(_sweep_task(*task))
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    with open(csv_path, "w") as fh:
        write_sweep_csv(rows, fh)
    save_sweep_figure(rows, os.path.join(args.out, "sweep.png"))
    best = max(rows, key=lambda r: r.test_pct)
    print(f"wrote {csv_path} ({len(rows)} configs; best {best.config.method} "
          f"R{best.config.resolution} L{best.config.seg_len} "
          f"p{best.config.overlap:g} at {best.test_pct:.2f}%)")
    return 0


def cmd_crosseval(args) -> int:
    cfg, traces, pipe = load_run_dir(args.run_dir)
    report = cross_config_eval(pipe, traces, pipe.main_region_end)
    out = args.out or args.run_dir
    os.makedirs(out, exist_ok=True)
    grid_path = os.path.join(out, "crosseval.csv")
    with open(grid_path, "w") as fh:
        write_crossconfig_grid_csv(report, fh)
    with open(os.path.join(out, "crosseval_cells.csv"), "w") as fh:
        write_crossconfig_cells_csv(report, fh)
    save_crosseval_figure(report, os.path.join(out, "crosseval.png"))
    print(f"wrote {grid_path} ({len(report.cells)} cells, "
          f"max gap {report.max_gap:.2f} points)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specfp",
        description="Device fingerprinting from packet-length spectrograms.",
    )
    parser.add_argument("--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p, with_jobs=False):
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value")
        p.add_argument("--cache", default=None, help="spectrogram cache directory")
        if with_jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel experiments")

    p = sub.add_parser("ingest", help="per-device packet statistics from trace CSVs")
    p.add_argument("traces", nargs="+", help="trace CSV files")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate synthetic traces from a profile config")
    p.add_argument("--config", required=True, help="config with [device N] sections")
    p.add_argument("--out", default="traces.csv", help="output trace CSV path")
    p.add_argument("--seed", type=int, default=None, help="base seed for devices")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("spectrogram", help="render spectrogram PNGs for every segment")
    add_config_flags(p)
    p.set_defaults(func=cmd_spectrogram)

    p = sub.add_parser("train", help="run one training experiment")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test-set report for a run directory")
    p.add_argument("run_dir", help="directory written by train")
    p.add_argument("--out", default=None, help="report directory (default: run dir)")
    p.add_argument("--cache", default=None, help="spectrogram cache directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train and evaluate all 24 factorial configs")
    add_config_flags(p, with_jobs=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("crosseval", help="OOD segmentation grid for a run directory")
    p.add_argument("run_dir", help="directory written by train")
    p.add_argument("--out", default=None, help="report directory (default: run dir)")
    p.add_argument("--cache", default=None, help="spectrogram cache directory")
    p.set_defaults(func=cmd_crosseval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ParseError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))
