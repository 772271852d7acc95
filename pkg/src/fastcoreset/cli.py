"""Command-line entry point: ``select``, ``eval`` and ``graph`` subcommands."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .cf_core import METRICS, LossBreakdown
from .errors import FastError, FormatError, InvalidParameterError
from .evaluation import evaluate
from .io import ingest, load_graph, save_graph
from .manifold_graph import DatasetMatrix, build_multiscale_graph, default_embedding_dim, spectral_embed
from .optimizer import STAGES, RunConfig, StageTimer, is_stratified, run_pipeline

log = logging.getLogger("fastcoreset")

INDICES_FILE = "indices.txt"
MANIFEST_FILE = "manifest.json"
TRACE_FILE = "loss_trace.csv"
LIBRARY_FILE = "frequency_library.txt"
EMBEDDING_DIR = "embedding"
TRACE_COLUMNS = ("iteration", "main", "div", "match", "graph", "total", "tau_t")


class SelfCheckError(FastError):
    """An output failed its consistency check."""


def parse_config(items) -> dict:
    """Merge ``key=value`` tokens and ``key=value`` files, later entries winning."""
    values = {}
    for item in items or []:
        if "=" not in item and Path(item).is_file():
            lines = Path(item).read_text().splitlines()
        else:
            lines = [item]
        for line in lines:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidParameterError(f"config entry {line!r} is not key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
    return values


def build_config(args) -> RunConfig:
    values = parse_config(getattr(args, "config", None))
    for key in ("ratio", "seed", "metric", "stratified"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    return RunConfig.from_mapping(values)


def worker_count() -> int:
    raw = os.environ.get("FAST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidParameterError(f"FAST_THREADS must be an integer, got {raw!r}") from None


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def group_dir(root: Path, label) -> Path:
    return root if label is None else root / f"class_{label}"


def group_rows(data: DatasetMatrix, config: RunConfig) -> list:
    if is_stratified(data, config):
        return [(int(c), rows) for c, rows in zip(data.classes, data.class_indices())]
    return [(None, np.arange(data.n_rows))]


def build_groups(data: DatasetMatrix, config: RunConfig, timer: StageTimer) -> dict:
    """Graph and embedding for every class (or the whole set)."""
    out = {}
    for label, rows in group_rows(data, config):
        if len(rows) < 2:
            continue
        with timer("graph"):
            graph = build_multiscale_graph(data.values[rows], config.knn_scales)
        with timer("embed"):
            emb = spectral_embed(graph, min(config.embed_dim, default_embedding_dim(len(rows))))
        out[label] = (graph, emb)
    return out


def load_groups(root, data: DatasetMatrix, config: RunConfig) -> dict:
    out = {}
    for label, rows in group_rows(data, config):
        if len(rows) < 2:
            continue
        d = group_dir(Path(root), label)
        if not d.is_dir():
            raise InvalidParameterError(f"embedding directory {d} is missing")
        out[label] = load_graph(d, n_rows=len(rows))
    return out


def save_groups(root: Path, groups: dict) -> None:
    for label, (graph, emb) in groups.items():
        save_graph(group_dir(root, label), graph, emb)


def check_selection(result, data: DatasetMatrix, config: RunConfig) -> None:
    idx = result.indices
    if len(idx) and (idx.min() < 0 or idx.max() >= data.n_rows):
        raise SelfCheckError("selected index out of range")
    if np.any(np.diff(idx) <= 0):
        raise SelfCheckError("selected indices are not strictly increasing")
    for run in result.runs:
        if run.state is None:
            continue
        for t, lb in enumerate(run.state.loss_trace):
            again = LossBreakdown.combine(lb.main, lb.div, lb.match, lb.graph, config.lambda_div,
                                          config.lambda_match, config.lambda_graph)
            if again.total != lb.total:
                raise SelfCheckError(f"loss breakdown identity fails at iteration {t}")


def artifact_checksums(out: Path, names) -> dict:
    """Tie each artifact to the manifest, since the plain-text formats carry no header."""
    files = [out / n for n in names]
    files += sorted(p for p in (out / EMBEDDING_DIR).rglob("*") if p.is_file())
    return {str(p.relative_to(out)): sha256(p) for p in files}


def write_trace(path: Path, result, stratified: bool) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((("class",) if stratified else ()) + TRACE_COLUMNS)
        for run in result.runs:
            if run.state is None:
                continue
            for t, (lb, tau) in enumerate(zip(run.state.loss_trace, run.state.tau_trace)):
                row = [t] + [repr(float(getattr(lb, k))) for k in TRACE_COLUMNS[1:6]] + [repr(float(tau))]
                w.writerow(([run.label] if stratified else []) + row)


def write_library(path: Path, result) -> None:
    parts = []
    for run in result.runs:
        if run.problem is None or run.problem.library is None:
            continue
        if run.label is not None:
            parts.append(f"## class {run.label}\n")
        parts.append(run.problem.library.to_text())
    path.write_text("".join(parts))


def cmd_select(args) -> int:
    start = time.perf_counter()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = build_config(args)
    timer = StageTimer()
    timer.seconds.update({"ingest": 0.0, "write": 0.0})
    with timer("ingest"):
        data = ingest(args.input, args.format)
        checksum = sha256(args.input)
    stratified = is_stratified(data, config)
    if args.embedding:
        with timer("ingest"):
            groups = load_groups(args.embedding, data, config)
    else:
        groups = build_groups(data, config, timer)
    result = run_pipeline(data, config, timer, prebuilt=groups, workers=worker_count())
    check_selection(result, data, config)
    with timer("write"):
        (out / INDICES_FILE).write_text("".join(f"{i}\n" for i in result.indices))
        write_trace(out / TRACE_FILE, result, stratified)
        write_library(out / LIBRARY_FILE, result)
        save_groups(out / EMBEDDING_DIR, groups)
        figures = []
        if not args.no_plots:
            from .plotting import plot_loss_trace
            for run in result.runs:
                if run.state is not None and run.state.loss_trace:
                    name = "loss_trace.png" if run.label is None else f"loss_trace_class_{run.label}.png"
                    plot_loss_trace(run.state.loss_trace, run.state.tau_trace, out / name)
                    figures.append(name)
    timings = {k: v for k, v in timer.seconds.items()}
    run_id = hashlib.sha256((checksum + json.dumps(config.to_mapping(), sort_keys=True)).encode()).hexdigest()[:16]
    manifest = {
        "run_id": run_id,
        "version": __version__,
        "input": str(Path(args.input).resolve()),
        "input_sha256": checksum,
        "n_rows": data.n_rows,
        "n_dims": data.n_dims,
        "n_selected": int(len(result.indices)),
        "stratified": stratified,
        "per_class_counts": ({str(k): v for k, v in result.per_class_counts.items()}
                             if result.per_class_counts else None),
        "config": config.to_mapping(),
        "final_losses": vars(result.final_losses),
        "heldout_ecfd": result.ecfd_report,
        "iterations": {str(r.label): (r.state.iteration if r.state else 0) for r in result.runs},
        "stopped_early": {str(r.label): bool(r.state.stopped_early) if r.state else False for r in result.runs},
        "embedding_reused": bool(args.embedding),
        "workers": worker_count(),
        "figures": figures,
        "artifacts": artifact_checksums(out, [INDICES_FILE, TRACE_FILE, LIBRARY_FILE] + figures),
        "timings": timings,
        "wall_clock": time.perf_counter() - start,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"selected {len(result.indices)} of {data.n_rows} rows -> {out / INDICES_FILE}")
    return 0


def read_run(run_dir: Path):
    for name in (MANIFEST_FILE, INDICES_FILE):
        if not (run_dir / name).is_file():
            raise InvalidParameterError(f"run directory {run_dir} lacks {name}")
    manifest = json.loads((run_dir / MANIFEST_FILE).read_text())
    try:
        indices = np.array([int(v) for v in (run_dir / INDICES_FILE).read_text().split()], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{run_dir / INDICES_FILE}: {exc}") from None
    return manifest, indices


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    out = Path(args.out_dir) if args.out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest, indices = read_run(run_dir)
    data = ingest(args.input, args.format)
    if sha256(args.input) != manifest.get("input_sha256"):
        raise InvalidParameterError("input file does not match the one recorded in the run manifest")
    config = RunConfig.from_mapping({k: str(v) for k, v in manifest["config"].items()})
    if not (run_dir / EMBEDDING_DIR).is_dir():
        raise InvalidParameterError(f"run directory {run_dir} lacks {EMBEDDING_DIR}/")
    groups = load_groups(run_dir / EMBEDDING_DIR, data, config)
    report = evaluate(data, indices, config, groups, n_random=args.n_random, compare=not args.no_compare)
    (out / "report.txt").write_text(f"run_id = {manifest.get('run_id')}\n" + report.to_text())
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("statistic", "name", "index", "value"))
        for row in report.csv_rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    if report.traces:
        with open(out / "convergence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            names = list(report.traces)
            w.writerow(["iteration"] + names)
            for t in range(len(report.traces[names[0]])):
                w.writerow([t] + [repr(float(report.traces[n][t])) for n in names])
    if not args.no_plots:
        from .plotting import plot_convergence, plot_moments
        plot_moments(report, out / "moments.png")
        if report.traces:
            plot_convergence(report, out / "convergence.png")
    sys.stdout.write(report.to_text())
    return 0


def cmd_graph(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = build_config(args)
    data = ingest(args.input, args.format)
    groups = build_groups(data, config, StageTimer())
    save_groups(out, groups)
    print(f"wrote graph artifacts for {len(groups)} group(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastcoreset", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--input", required=True, help="dataset file (CSV or rawf32)")
        sp.add_argument("--format", choices=("csv", "rawf32"), help="input format (default: sniff)")

    sel = sub.add_parser("select", help="select a coreset")
    common(sel)
    sel.add_argument("--ratio", type=float, help="fraction of rows to keep (per class when stratified)")
    sel.add_argument("--out-dir", required=True)
    sel.add_argument("--seed", type=int)
    sel.add_argument("--config", action="append", metavar="KEY=VALUE|FILE",
                     help="override a default; repeatable, files hold one key=value per line")
    sel.add_argument("--stratified", choices=("auto", "true", "false"))
    sel.add_argument("--metric", choices=METRICS)
    sel.add_argument("--embedding", metavar="DIR", help="reuse graph artifacts from the graph command")
    sel.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    sel.set_defaults(func=cmd_select)

    ev = sub.add_parser("eval", help="compare a selection with random subsets and other strategies")
    common(ev)
    ev.add_argument("--run-dir", required=True)
    ev.add_argument("--out-dir", help="where to write the report (default: the run directory)")
    ev.add_argument("--n-random", type=int, default=20)
    ev.add_argument("--no-compare", action="store_true", help="skip the frequency-strategy comparison")
    ev.add_argument("--no-plots", action="store_true")
    ev.set_defaults(func=cmd_eval)

    gr = sub.add_parser("graph", help="build and save the manifold graph and embedding")
    common(gr)
    gr.add_argument("--out-dir", required=True)
    gr.add_argument("--config", action="append", metavar="KEY=VALUE|FILE")
    gr.add_argument("--stratified", choices=("auto", "true", "false"))
    gr.set_defaults(func=cmd_graph)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FastError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
