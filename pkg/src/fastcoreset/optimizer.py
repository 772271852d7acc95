"""Joint optimization of the continuous coreset and extraction of row indices.

The loop runs in a *matching space*: the unit-norm spectral embedding scaled
by ``sqrt(N)`` so coordinates have unit mean square. Every loss term is
invariant to that choice except through the step size, which is why the
scaling is fixed here rather than left to callers.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from . import alignment as al
from .cf_core import AMP_FLOOR, METRICS, LossBreakdown, PhasePenaltyParams, cfd_naive, ecf_batch, main_loss_and_grad
from .errors import InvalidParameterError, NumericalError
from .freq_sampler import (STRATEGIES, BandGeometry, CurriculumSchedule, FrequencyLibrary, build_library,
                           collinear_batch, metric_penalty, optimize_band_scales, pdas_sample, tau_at,
                           topk_amplitude, uniform_sample)
from .manifold_graph import (DatasetMatrix, ManifoldGraph, SpectralEmbedding, build_multiscale_graph,
                             default_embedding_dim, spectral_embed)

log = logging.getLogger(__name__)

STAGES = ("graph", "embed", "afl", "optimize", "extract")


def _parse_scales(value) -> tuple:
    if isinstance(value, str):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return tuple(int(v) for v in value)


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a selection run; flat so it maps onto ``key=value`` files."""

    ratio: float = 0.1
    total_iters: int = 1000
    step_size: float = 1e-2
    lambda_div: float = 0.01
    lambda_match: float = 1.0
    lambda_graph: float = 1e-5
    lambda_p: float = 0.3
    alpha: float = 1.2
    amp_floor: float = AMP_FLOOR
    metric: str = "pdcfd"
    freq_strategy: str = "pdas"
    batch_k: int = 64
    n_lib: int = 300
    tau_ramp: float = 0.5
    n_mc: int = 256
    n_opt: int = 30
    afl_lr: float = 0.1
    afl_gradient: str = "pathwise"
    afl_ref_max: int = 1024
    d_rff: int = 512
    delta: float = 1e-3
    eps: float = 1e-8
    assign_cadence: int = 10
    early_stop_tol: float = 1e-5
    early_stop_window: int = 50
    holdout_n: int = 256
    knn_scales: tuple = (10, 15, 30)
    embed_dim: int = 32
    stratified: str = "auto"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "knn_scales", _parse_scales(self.knn_scales))
        if not 0 < self.ratio <= 1:
            raise InvalidParameterError("ratio must be in (0, 1]")
        for name in ("total_iters", "batch_k", "n_lib", "n_mc", "d_rff", "assign_cadence",
                     "early_stop_window", "holdout_n", "embed_dim", "afl_ref_max"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        if self.n_opt < 0:
            raise InvalidParameterError("n_opt must be >= 0")
        for name in ("step_size", "delta", "eps", "amp_floor"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        for name in ("lambda_div", "lambda_match", "lambda_graph", "lambda_p", "alpha", "early_stop_tol"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidParameterError(f"{name} must be finite and >= 0")
        if self.metric not in METRICS:
            raise InvalidParameterError(f"metric must be one of {METRICS}")
        if self.freq_strategy not in STRATEGIES:
            raise InvalidParameterError(f"freq_strategy must be one of {STRATEGIES}")
        if self.stratified not in ("auto", "true", "false"):
            raise InvalidParameterError("stratified must be auto, true or false")
        if not 0 < self.tau_ramp <= 1:
            raise InvalidParameterError("tau_ramp must be in (0, 1]")

    @property
    def penalty(self) -> PhasePenaltyParams:
        return PhasePenaltyParams(self.lambda_p, self.alpha)

    @classmethod
    def from_mapping(cls, values: dict, base: Optional["RunConfig"] = None) -> "RunConfig":
        """Build from string values (config files, CLI), rejecting unknown keys."""
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {', '.join(unknown)}")
        parsed = {}
        for key, raw in values.items():
            kind = types[key]
            if kind is tuple:
                parsed[key] = _parse_scales(raw)
            elif kind is bool:
                parsed[key] = str(raw).lower() in ("1", "true", "yes")
            else:
                try:
                    parsed[key] = kind(raw)
                except ValueError as exc:
                    raise InvalidParameterError(f"bad value for {key}: {raw!r}") from exc
        return replace(base, **parsed)

    def to_mapping(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else v
        return out


class Adam:
    """Bias-corrected adaptive-moment descent on one parameter array."""

    def __init__(self, shape, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class ClassProblem:
    """Fixed per-class context: anchors in matching space, graph data, frequency library."""

    anchors: np.ndarray
    degrees: np.ndarray
    laplacian: object
    rff: al.RffMap
    library: Optional[FrequencyLibrary] = None
    schedule: Optional[CurriculumSchedule] = None
    ref_ecf: Optional[tuple] = None
    holdout: Optional[np.ndarray] = None
    fixed_batch: Optional[tuple] = None
    holdout_ecf: Optional[tuple] = None

    @property
    def n(self) -> int:
        return self.anchors.shape[0]


@dataclass
class CoresetState:
    y_tilde: np.ndarray
    assignment: al.Assignment
    iteration: int = 0
    loss_trace: list = field(default_factory=list)
    tau_trace: list = field(default_factory=list)
    holdout_trace: list = field(default_factory=list)
    adam: Optional[Adam] = None
    l_sub: Optional[np.ndarray] = None
    stopped_early: bool = False


@dataclass
class ClassRun:
    """Outcome of one class pipeline; ``indices`` are global row ids."""

    label: Optional[int]
    indices: np.ndarray
    final_losses: LossBreakdown
    ecfd: float
    state: Optional[CoresetState] = None
    problem: Optional[ClassProblem] = None
    graph: Optional[ManifoldGraph] = None
    embedding: Optional[SpectralEmbedding] = None


@dataclass
class SelectionResult:
    indices: np.ndarray
    final_losses: LossBreakdown
    ecfd_report: float
    per_class_counts: Optional[dict] = None
    runs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


class StageTimer:
    def __init__(self):
        self.seconds = {s: 0.0 for s in STAGES}

    @contextmanager
    def __call__(self, stage: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[stage] += time.perf_counter() - start


def matching_space(embedding: SpectralEmbedding) -> np.ndarray:
    """Embedding at float32 precision, scaled to unit mean-square coordinates."""
    feats = np.asarray(embedding.features, dtype=np.float32).astype(np.float64)
    return feats * np.sqrt(feats.shape[0])


def holdout_frequencies(reference: np.ndarray, n: int = 256, seed: int = 0) -> np.ndarray:
    """Isotropic evaluation frequencies with ``<w, y>`` of unit order on the reference."""
    ref = np.atleast_2d(reference)
    d = ref.shape[1]
    scale = 1.0 / (max(float(ref.std(axis=0).mean()), 1e-12) * np.sqrt(d))
    return np.random.default_rng([seed, 505]).standard_normal((n, d)) * scale


def farthest_point_rows(points: np.ndarray, m: int, seed: int = 0) -> np.ndarray:
    """Greedy k-center seeding from a seeded random start; ties go to the lower index."""
    n = points.shape[0]
    if not 1 <= m <= n:
        raise InvalidParameterError(f"cannot seed {m} rows from {n}")
    start = int(np.random.default_rng([seed, 606]).integers(n))
    chosen = [start]
    best = ((points - points[start]) ** 2).sum(axis=1)
    best[start] = -1.0
    for _ in range(m - 1):
        j = int(np.argmax(best))
        chosen.append(j)
        best = np.minimum(best, ((points - points[j]) ** 2).sum(axis=1))
        best[chosen] = -1.0
    return np.array(chosen, dtype=np.int64)


def refresh_assignment(state: CoresetState, problem: ClassProblem, eps: float) -> None:
    cost = al.cost_matrix(state.y_tilde, problem.anchors, problem.degrees, eps)
    state.assignment = al.hungarian(cost)
    state.l_sub = al.laplacian_submatrix(problem.laplacian, state.assignment)


def init_coreset(problem: ClassProblem, m: int, seed: int = 0, eps: float = 1e-8,
                 step_size: float = 1e-2) -> CoresetState:
    """Start from farthest-point rows of the anchors and assign them."""
    if m > problem.n:
        raise InvalidParameterError(f"coreset size {m} exceeds {problem.n} rows")
    rows = farthest_point_rows(problem.anchors, m, seed)
    y = problem.anchors[rows].copy()
    state = CoresetState(y, al.Assignment(rows, 0.0), adam=Adam(y.shape, lr=step_size))
    refresh_assignment(state, problem, eps)
    return state


def prepare_problem(embedding: SpectralEmbedding, graph: ManifoldGraph, config: RunConfig,
                    seed: int) -> ClassProblem:
    anchors = matching_space(embedding)
    bandwidth = al.median_heuristic(anchors, seed=seed)
    rff = al.RffMap.create(anchors.shape[1], config.d_rff, bandwidth, seed)
    return ClassProblem(anchors, graph.degrees, graph.laplacian, rff,
                        holdout=holdout_frequencies(anchors, config.holdout_n, seed))


def attach_library(problem: ClassProblem, state: CoresetState, config: RunConfig, seed: int) -> None:
    """Optimize band scales against the initial coreset and build the library."""
    ref = problem.anchors
    if ref.shape[0] > config.afl_ref_max:
        rows = np.random.default_rng([seed, 707]).choice(ref.shape[0], config.afl_ref_max, replace=False)
        ref = ref[np.sort(rows)]
    geometry = BandGeometry.from_reference(problem.anchors, seed)
    penalty = metric_penalty(config.metric, config.penalty)
    scales = np.array([
        optimize_band_scales(ref, state.y_tilde, b, geometry, penalty, n_mc=config.n_mc,
                             n_opt=config.n_opt, lr=config.afl_lr, gradient=config.afl_gradient, seed=seed)
        for b in range(3)])
    library = build_library(scales, geometry, config.n_lib, seed=seed)
    problem.library = library
    problem.schedule = CurriculumSchedule.for_library(library, config.batch_k, config.total_iters,
                                                      config.tau_ramp)
    problem.ref_ecf = ecf_batch(problem.anchors, library.omegas)


def draw_batch(state: CoresetState, problem: ClassProblem, config: RunConfig, seed: int):
    """Frequencies for this iteration plus the reference ECF at them."""
    lib, t = problem.library, state.iteration
    strategy = config.freq_strategy
    if strategy == "collinear":
        if problem.fixed_batch is None:
            om = collinear_batch(lib, config.batch_k, seed)
            problem.fixed_batch = (om, ecf_batch(problem.anchors, om))
        return problem.fixed_batch
    if strategy == "pdas":
        idx = pdas_sample(lib, problem.schedule, t, config.batch_k, state.y_tilde,
                          penalty=metric_penalty(config.metric, config.penalty), seed=seed,
                          metric=config.metric, ref_ecf=problem.ref_ecf)
    elif strategy == "uniform":
        idx = uniform_sample(lib, config.batch_k, t, seed)
    else:
        idx = topk_amplitude(lib, config.batch_k, *problem.ref_ecf)
    return lib.omegas[idx], (problem.ref_ecf[0][idx], problem.ref_ecf[1][idx])


def evaluate_terms(y: np.ndarray, state: CoresetState, problem: ClassProblem, config: RunConfig,
                   omegas, ref_ecf):
    """Values and gradients of the four loss terms at ``y``."""
    main, g_main = main_loss_and_grad(y, omegas, ref_ecf[0], ref_ecf[1],
                                      config.penalty, config.metric, config.amp_floor)
    div, g_div = al.dpp_loss_and_grad(y, problem.rff, config.delta)
    match, g_match = al.match_loss(y, problem.anchors, state.assignment)
    graph, g_graph = al.graph_loss(y, state.l_sub)
    return (main, div, match, graph), (g_main, g_div, g_match, g_graph)


def step(state: CoresetState, problem: ClassProblem, config: RunConfig, seed: int = 0) -> CoresetState:
    """One PDAS batch, one Adam update on the total loss, periodic re-assignment."""
    if not np.all(np.isfinite(state.y_tilde)):
        raise NumericalError(f"non-finite coreset coordinates at iteration {state.iteration}")
    omegas, ref_ecf = draw_batch(state, problem, config, seed)
    values, grads = evaluate_terms(state.y_tilde, state, problem, config, omegas, ref_ecf)
    for name, v, g in zip(("main", "div", "match", "graph"), values, grads):
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite {name} loss or gradient at iteration {state.iteration}")
    weights = (1.0, config.lambda_div, config.lambda_match, config.lambda_graph)
    total_grad = sum(w * g for w, g in zip(weights, grads))
    state.loss_trace.append(LossBreakdown.combine(*values, config.lambda_div, config.lambda_match,
                                                  config.lambda_graph))
    state.tau_trace.append(tau_at(problem.schedule, state.iteration))
    if state.adam is None:
        state.adam = Adam(state.y_tilde.shape, lr=config.step_size)
    state.y_tilde = state.adam.update(state.y_tilde, total_grad)
    state.iteration += 1
    if state.iteration % config.assign_cadence == 0:
        refresh_assignment(state, problem, config.eps)
    return state


def _should_stop(state: CoresetState, config: RunConfig) -> bool:
    w = config.early_stop_window
    t = state.iteration
    if config.early_stop_tol <= 0 or t < 2 * w or t < config.tau_ramp * config.total_iters + w:
        return False
    totals = [lb.total for lb in state.loss_trace[-2 * w:]]
    prev, cur = np.mean(totals[:w]), np.mean(totals[w:])
    return (prev - cur) / max(abs(prev), 1e-300) < config.early_stop_tol


def holdout_gap(y: np.ndarray, problem: ClassProblem) -> float:
    """``cfd_naive(y, anchors, holdout)`` with the reference side computed once."""
    if problem.holdout_ecf is None:
        problem.holdout_ecf = ecf_batch(problem.anchors, problem.holdout)
    rre, rim = problem.holdout_ecf
    cre, cim = ecf_batch(y, problem.holdout)
    return float(np.mean((cre - rre) ** 2 + (cim - rim) ** 2))


def optimize(state: CoresetState, problem: ClassProblem, config: RunConfig, seed: int = 0,
             monitor: bool = False, callback: Optional[Callable] = None) -> CoresetState:
    """Iterate ``step`` up to ``total_iters`` with early stopping after the curriculum ramp.

    With ``monitor`` set, the held-out ECFD of the continuous coreset is
    recorded before every step.
    """
    while state.iteration < config.total_iters:
        if monitor:
            state.holdout_trace.append(holdout_gap(state.y_tilde, problem))
        step(state, problem, config, seed)
        if callback is not None:
            callback(state)
        if _should_stop(state, config):
            state.stopped_early = True
            log.info("early stop at iteration %d", state.iteration)
            break
    if monitor:
        state.holdout_trace.append(holdout_gap(state.y_tilde, problem))
    return state


def extract(state: CoresetState, problem: ClassProblem, config: RunConfig,
            mode: str = "assignment") -> tuple[np.ndarray, float]:
    """Snap the continuous coreset to rows; returns ``(local indices, held-out ECFD)``.

    ``mode='nearest'`` maps every proxy to its cheapest row independently and
    can return fewer than ``M`` distinct rows; it exists for ablations.
    """
    if mode == "assignment":
        refresh_assignment(state, problem, config.eps)
        idx = np.sort(state.assignment.pi)
    elif mode == "nearest":
        cost = al.cost_matrix(state.y_tilde, problem.anchors, problem.degrees, config.eps)
        idx = np.unique(np.argmin(cost, axis=1))
    else:
        raise InvalidParameterError(f"unknown extraction mode {mode!r}")
    return idx, cfd_naive(problem.anchors[idx], problem.anchors, problem.holdout)


def class_size(ratio: float, n: int) -> int:
    return max(1, min(n, int(np.floor(ratio * n + 0.5))))


def selection_ecfd(anchors: np.ndarray, rows: np.ndarray, holdout: np.ndarray) -> float:
    return cfd_naive(anchors[rows], anchors, holdout)


def run_class(x: np.ndarray, rows: np.ndarray, config: RunConfig, seed: int, label=None,
              timer: Optional[StageTimer] = None, prebuilt=None, monitor: bool = False,
              extract_mode: str = "assignment") -> ClassRun:
    """Graph, embedding, library, optimization and extraction for one class.

    ``prebuilt`` may carry a ``(graph, embedding)`` pair to skip the first two stages.
    """
    timer = timer or StageTimer()
    n = len(rows)
    m = class_size(config.ratio, n)
    zero = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)
    if n < 2 or m >= n:
        if n < 2:
            log.warning("class %s has %d sample(s); keeping all of them", label, n)
        return ClassRun(label, np.sort(rows), zero, 0.0)
    if prebuilt is None:
        with timer("graph"):
            graph = build_multiscale_graph(x[rows], config.knn_scales)
        with timer("embed"):
            embedding = spectral_embed(graph, min(config.embed_dim, default_embedding_dim(n)))
    else:
        graph, embedding = prebuilt
    with timer("afl"):
        problem = prepare_problem(embedding, graph, config, seed)
        state = init_coreset(problem, m, seed, config.eps, config.step_size)
        attach_library(problem, state, config, seed)
    with timer("optimize"):
        optimize(state, problem, config, seed, monitor=monitor)
    with timer("extract"):
        local, ecfd = extract(state, problem, config, extract_mode)
    final = state.loss_trace[-1] if state.loss_trace else zero
    return ClassRun(label, rows[local], final, ecfd, state, problem, graph, embedding)


def is_stratified(data: DatasetMatrix, config: RunConfig) -> bool:
    if config.stratified == "auto":
        return data.labels is not None
    if config.stratified == "true" and data.labels is None:
        raise InvalidParameterError("stratified mode needs labels")
    return config.stratified == "true"


def class_seed(seed: int, c: int) -> int:
    return seed + 7919 * c


def run_pipeline(data: DatasetMatrix, config: RunConfig, timer: Optional[StageTimer] = None,
                 prebuilt: Optional[dict] = None, workers: int = 1, monitor: bool = False,
                 extract_mode: str = "assignment") -> SelectionResult:
    """End-to-end selection, per class when stratified, merged into global row ids."""
    timer = timer or StageTimer()
    if is_stratified(data, config):
        groups = [(pos, int(c), rows) for pos, (c, rows) in
                  enumerate(zip(data.classes, data.class_indices()))]
    else:
        groups = [(0, None, np.arange(data.n_rows))]
    prebuilt = prebuilt or {}

    def job(item):
        pos, label, rows = item
        return run_class(data.values, rows, config, class_seed(config.seed, pos), label, timer,
                         prebuilt.get(label), monitor, extract_mode)

    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(job, groups))
    else:
        runs = [job(g) for g in groups]
    indices = np.sort(np.concatenate([r.indices for r in runs]))
    sizes = np.array([len(r.indices) for r in runs], dtype=np.float64)
    ecfd = float(np.dot(sizes, [r.ecfd for r in runs]) / sizes.sum())
    if len(runs) == 1:
        final = runs[0].final_losses
    else:
        parts = np.array([[lb.main, lb.div, lb.match, lb.graph] for lb in (r.final_losses for r in runs)])
        final = LossBreakdown.combine(*parts.sum(axis=0), config.lambda_div, config.lambda_match,
                                      config.lambda_graph)
    counts = {r.label: len(r.indices) for r in runs} if groups[0][1] is not None else None
    return SelectionResult(indices, final, ecfd, counts, runs, dict(timer.seconds))
