"""Held-out comparisons of a selection against random subsets and other frequency strategies."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cf_core import cfd_naive
from .errors import InvalidParameterError
from .freq_sampler import STRATEGIES
from .manifold_graph import DatasetMatrix
from .optimizer import (RunConfig, class_seed, class_size, holdout_frequencies, matching_space,
                        run_pipeline)

log = logging.getLogger(__name__)

MOMENT_NAMES = ("mean", "variance", "skewness", "kurtosis")
NOT_REACHED = "not reached"
THRESHOLD_FACTOR = 1.5


@dataclass
class EvalReport:
    ecfd_fast: float
    ecfd_random_median: float
    ecfd_random: list
    moment_errors_fast: np.ndarray
    moment_errors_random: np.ndarray
    iterations_to_threshold: dict = field(default_factory=dict)
    threshold: Optional[float] = None
    traces: dict = field(default_factory=dict)

    @property
    def moment_wins(self) -> int:
        """Orders where the selection's relative error is below the random median."""
        return int(np.sum(self.moment_errors_fast < self.moment_errors_random))

    def to_text(self) -> str:
        lines = [
            f"ecfd_fast = {self.ecfd_fast!r}",
            f"ecfd_random_median = {self.ecfd_random_median!r}",
            f"ecfd_ratio = {self.ecfd_fast / max(self.ecfd_random_median, 1e-300)!r}",
            f"n_random = {len(self.ecfd_random)}",
            "ecfd_random = " + ", ".join(repr(v) for v in self.ecfd_random),
        ]
        for name, f, r in zip(MOMENT_NAMES, self.moment_errors_fast, self.moment_errors_random):
            lines.append(f"moment_error.{name} = fast {float(f)!r} random {float(r)!r}")
        if self.threshold is not None:
            lines.append(f"threshold = {self.threshold!r}")
        for name, it in self.iterations_to_threshold.items():
            lines.append(f"iterations_to_threshold.{name} = {it}")
        return "\n".join(lines) + "\n"

    def csv_rows(self) -> list[tuple]:
        rows = [("ecfd", "fast", "", self.ecfd_fast), ("ecfd", "random_median", "", self.ecfd_random_median)]
        rows += [("ecfd", "random", i, v) for i, v in enumerate(self.ecfd_random)]
        for order, (f, r) in enumerate(zip(self.moment_errors_fast, self.moment_errors_random), start=1):
            rows += [("moment_error", "fast", order, float(f)), ("moment_error", "random", order, float(r))]
        rows += [("iterations_to_threshold", k, "", v) for k, v in self.iterations_to_threshold.items()]
        return rows


def marginal_moments(x: np.ndarray) -> np.ndarray:
    """Per-column mean, variance, skewness and (non-excess) kurtosis, shape ``4 x D``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu = x.mean(axis=0)
    c = x - mu
    var = (c ** 2).mean(axis=0)
    sd = np.sqrt(var)
    safe = np.where(sd > 0, sd, 1.0)
    skew = np.where(sd > 0, (c ** 3).mean(axis=0) / safe ** 3, 0.0)
    kurt = np.where(sd > 0, (c ** 4).mean(axis=0) / safe ** 4, 0.0)
    return np.vstack([mu, var, skew, kurt])


def moment_errors(subset: np.ndarray, full: np.ndarray) -> np.ndarray:
    """Relative error of each moment order, averaged over columns."""
    ref = marginal_moments(full)
    got = marginal_moments(subset)
    return (np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12)).mean(axis=1)


def random_subsets(groups: Sequence[np.ndarray], ratio: float, n_random: int, seed: int) -> list[np.ndarray]:
    """Uniform subsets with the same per-group sizes as the selection."""
    out = []
    for r in range(n_random):
        rng = np.random.default_rng([seed, 808, r])
        parts = [rng.choice(rows, class_size(ratio, len(rows)), replace=False) for rows in groups]
        out.append(np.sort(np.concatenate(parts)))
    return out


def grouped_ecfd(indices: np.ndarray, groups, anchors: Sequence[np.ndarray], holdouts) -> float:
    """Size-weighted held-out ECFD, each class measured in its own embedding."""
    total, weight = 0.0, 0
    for rows, a, h in zip(groups, anchors, holdouts):
        local = np.flatnonzero(np.isin(rows, indices))
        if len(local) == 0:
            raise InvalidParameterError("a class has no selected rows")
        total += len(local) * cfd_naive(a[local], a, h)
        weight += len(local)
    return total / weight


def threshold_crossings(traces: dict, reference: str = "pdas", factor: float = THRESHOLD_FACTOR):
    """First iteration at or below ``factor`` times the reference strategy's final value."""
    if reference not in traces:
        raise InvalidParameterError(f"reference strategy {reference!r} missing")
    thr = factor * float(traces[reference][-1])
    hits = {}
    for name, trace in traces.items():
        below = np.flatnonzero(np.asarray(trace) <= thr)
        hits[name] = int(below[0]) if len(below) else NOT_REACHED
    return thr, hits


def strategy_traces(data: DatasetMatrix, config: RunConfig, strategies=STRATEGIES,
                    prebuilt: Optional[dict] = None) -> dict:
    """Held-out ECFD of the continuous coreset per iteration for each frequency strategy.

    Early stopping is disabled so all traces span ``total_iters``. Classes are
    combined by coreset size.
    """
    cfg = replace(config, early_stop_tol=0.0)
    out = {}
    for name in strategies:
        res = run_pipeline(data, replace(cfg, freq_strategy=name), prebuilt=prebuilt, monitor=True)
        sizes = np.array([len(r.indices) for r in res.runs if r.state is not None], dtype=np.float64)
        traces = [np.asarray(r.state.holdout_trace) for r in res.runs if r.state is not None]
        if not traces:
            log.warning("no class was optimized; skipping the strategy comparison")
            return {}
        out[name] = np.average(np.vstack(traces), axis=0, weights=sizes)
    return out


def evaluate(data: DatasetMatrix, indices: np.ndarray, config: RunConfig, embeddings: dict,
             n_random: int = 20, strategies=STRATEGIES, compare: bool = True) -> EvalReport:
    """Build the report for one selection.

    ``embeddings`` maps each class label (``None`` when unstratified) to the
    ``(graph, embedding)`` pair the run used.
    """
    if n_random < 1:
        raise InvalidParameterError("n_random must be at least 1")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0 or indices.min() < 0 or indices.max() >= data.n_rows:
        raise InvalidParameterError("indices out of range for the dataset")
    labels = sorted(embeddings, key=lambda k: -1 if k is None else k)
    if labels == [None]:
        groups = [np.arange(data.n_rows)]
    else:
        groups = [np.flatnonzero(data.labels == c) for c in labels]
    anchors = [matching_space(embeddings[c][1]) for c in labels]
    # the same evaluation frequencies the optimizer monitors for each class
    holdouts = [holdout_frequencies(a, config.holdout_n, class_seed(config.seed, pos))
                for pos, a in enumerate(anchors)]
    fast = grouped_ecfd(indices, groups, anchors, holdouts)
    subsets = random_subsets(groups, config.ratio, n_random, config.seed)
    rand = [grouped_ecfd(s, groups, anchors, holdouts) for s in subsets]
    m_fast = moment_errors(data.values[indices], data.values)
    m_rand = np.median([moment_errors(data.values[s], data.values) for s in subsets], axis=0)
    report = EvalReport(float(fast), float(np.median(rand)), [float(v) for v in rand], m_fast, m_rand)
    if compare:
        report.traces = strategy_traces(data, config, strategies, prebuilt=embeddings)
        if report.traces:
            report.threshold, report.iterations_to_threshold = threshold_crossings(report.traces)
    return report
