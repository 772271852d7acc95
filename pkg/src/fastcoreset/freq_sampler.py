"""Anisotropic frequency library and progressive discrepancy-aware sampling.

Frequencies live in the same space as the reference samples. A per-dimension
base scale ``1 / (std_j * sqrt(d))`` makes ``<w, y>`` order one for a pilot
draw; band edges are percentiles of the pilot norms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cf_core import AMP_FLOOR, PhasePenaltyParams, ecf_batch, per_frequency_loss, wrap_phase
from .errors import InvalidParameterError

log = logging.getLogger(__name__)

BANDS = ("low", "mid", "high")
DEFAULT_SPLIT = (0.4, 0.4, 0.2)
STRATEGIES = ("pdas", "uniform", "topk", "collinear")


def band_index(band) -> int:
    if isinstance(band, str):
        if band not in BANDS:
            raise InvalidParameterError(f"unknown band {band!r}")
        return BANDS.index(band)
    if int(band) not in (0, 1, 2):
        raise InvalidParameterError(f"unknown band {band!r}")
    return int(band)


def metric_penalty(metric: str, penalty: PhasePenaltyParams) -> PhasePenaltyParams:
    """Phase penalty in effect for a main-loss metric (none unless pdcfd)."""
    return penalty if metric == "pdcfd" else PhasePenaltyParams(0.0, penalty.alpha)


@dataclass(frozen=True)
class BandGeometry:
    """Per-dimension base scale and the four norm edges of the low/mid/high bands."""

    base_scale: np.ndarray
    edges: np.ndarray

    @classmethod
    def from_reference(cls, reference, seed: int = 0, n_pilot: int = 4096,
                       percentiles: Sequence[float] = (33.0, 67.0, 99.0)) -> "BandGeometry":
        ref = np.atleast_2d(np.asarray(reference, dtype=np.float64))
        d = ref.shape[1]
        std = ref.std(axis=0)
        std = np.where(std > 0, std, max(std.max(), 1.0))
        base = 1.0 / (std * np.sqrt(d))
        z = np.random.default_rng([seed, 7]).standard_normal((n_pilot, d))
        norms = np.linalg.norm(z * base, axis=1)
        edges = np.concatenate([[0.0], np.percentile(norms, percentiles)])
        return cls(base, edges)

    def bounds(self, band) -> tuple[float, float]:
        b = band_index(band)
        return float(self.edges[b]), float(self.edges[b + 1])

    def contains(self, norms: np.ndarray, band) -> np.ndarray:
        lo, hi = self.bounds(band)
        if band_index(band) == 2:
            return (norms >= lo) & (norms <= hi)
        return (norms >= lo) & (norms < hi)

    def isotropic_scales(self, band, seed: int = 0, n_pilot: int = 4096) -> np.ndarray:
        """Base scale multiplied so the median draw norm sits at the band center."""
        lo, hi = self.bounds(band)
        z = np.random.default_rng([seed, 11]).standard_normal((n_pilot, len(self.base_scale)))
        med = np.median(np.linalg.norm(z * self.base_scale, axis=1))
        return self.base_scale * (0.5 * (lo + hi) / med)


@dataclass
class FrequencyLibrary:
    """Banded frequency atoms with their generating scales and a score cache."""

    omegas: np.ndarray
    bands: np.ndarray
    band_scales: np.ndarray
    edges: np.ndarray
    seed: int
    scores: np.ndarray = field(default=None)

    def __post_init__(self):
        self.norms = np.linalg.norm(self.omegas, axis=1)
        if self.scores is None:
            self.scores = np.zeros(len(self.omegas))

    def __len__(self):
        return len(self.omegas)

    def population(self) -> tuple[int, int, int]:
        return tuple(int((self.bands == b).sum()) for b in range(3))

    def to_text(self) -> str:
        lines = ["# band norm components..."]
        for name, s in zip(BANDS, self.band_scales):
            lines.append(f"# scale {name} " + " ".join(repr(float(v)) for v in s))
        lines.append("# edges " + " ".join(repr(float(v)) for v in self.edges))
        lines.append(f"# seed {self.seed}")
        for om, b, nrm in zip(self.omegas, self.bands, self.norms):
            lines.append(f"{BANDS[b]} {float(nrm)!r} " + " ".join(repr(float(v)) for v in om))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FrequencyLibrary":
        scales, edges, seed, omegas, bands = {}, None, 0, [], []
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#":
                if parts[1] == "scale":
                    scales[parts[2]] = [float(v) for v in parts[3:]]
                elif parts[1] == "edges":
                    edges = np.array([float(v) for v in parts[2:]])
                elif parts[1] == "seed":
                    seed = int(parts[2])
                continue
            bands.append(band_index(parts[0]))
            omegas.append([float(v) for v in parts[2:]])
        return cls(np.array(omegas), np.array(bands), np.array([scales[b] for b in BANDS]), edges, seed)


@dataclass(frozen=True)
class CurriculumSchedule:
    tau_low: float
    tau_max: float
    ramp_fraction: float
    total_iters: int

    def __post_init__(self):
        if not (self.tau_low > 0 and self.tau_max >= self.tau_low):
            raise InvalidParameterError("need 0 < tau_low <= tau_max")
        if not 0 < self.ramp_fraction <= 1:
            raise InvalidParameterError("ramp_fraction must be in (0, 1]")

    @classmethod
    def for_library(cls, library: FrequencyLibrary, batch_k: int, total_iters: int,
                    ramp_fraction: float = 0.5) -> "CurriculumSchedule":
        """Start at the low/mid edge (or the k-th smallest norm) and end at the largest norm."""
        norms = np.sort(library.norms)
        kth = norms[min(batch_k, len(norms)) - 1]
        tau_low = max(float(library.edges[1]), float(kth))
        return cls(tau_low, max(tau_low, float(norms[-1])), ramp_fraction, total_iters)


def tau_at(schedule: CurriculumSchedule, t: int) -> float:
    """Linear ramp from ``tau_low`` to ``tau_max`` over the first ``ramp_fraction`` of the run."""
    ramp = schedule.ramp_fraction * schedule.total_iters
    if ramp <= 0 or t >= ramp:
        return schedule.tau_max
    frac = max(t, 0) / ramp
    return schedule.tau_low + frac * (schedule.tau_max - schedule.tau_low)


def _band_draws(log_s, z, geometry, band):
    t = np.exp(log_s) * z
    return t, geometry.contains(np.linalg.norm(t, axis=1), band)


def band_objective(log_s, z, geometry: BandGeometry, band, reference, coreset,
                   penalty: PhasePenaltyParams) -> float:
    """Monte-Carlo mean of the per-frequency loss over draws that land in the band."""
    t, keep = _band_draws(log_s, z, geometry, band)
    if not keep.any():
        return 0.0
    t = t[keep]
    rre, rim = ecf_batch(reference, t)
    cre, cim = ecf_batch(coreset, t)
    return float(per_frequency_loss(cre, cim, rre, rim, t, penalty).mean())


def _ecf_and_jacobian(points, t):
    phases = t @ points.T
    c, s = np.cos(phases), np.sin(phases)
    m = points.shape[0]
    return c.sum(1) / m, s.sum(1) / m, -(s @ points) / m, (c @ points) / m


def band_objective_grad(log_s, z, geometry: BandGeometry, band, reference, coreset,
                        penalty: PhasePenaltyParams, amp_floor: float = AMP_FLOOR):
    """Objective and its pathwise gradient in log-scale with the accepted set held fixed."""
    t, keep = _band_draws(log_s, z, geometry, band)
    if not keep.any():
        return 0.0, np.zeros_like(log_s)
    t = t[keep]
    rre, rim, drre, drim = _ecf_and_jacobian(reference, t)
    cre, cim, dcre, dcim = _ecf_and_jacobian(coreset, t)
    losses = per_frequency_loss(cre, cim, rre, rim, t, penalty, amp_floor=amp_floor)
    g_rre, g_rim = 2 * (rre - cre), 2 * (rim - cim)
    g_cre, g_cim = -g_rre, -g_rim
    grad_t = np.zeros_like(t)
    if penalty.lambda_p > 0:
        amp_r2, amp_c2 = rre ** 2 + rim ** 2, cre ** 2 + cim ** 2
        active = (np.sqrt(amp_r2) >= amp_floor) & (np.sqrt(amp_c2) >= amp_floor)
        lam = penalty.weight(t)
        dtheta = np.where(active, wrap_phase(np.arctan2(rim, rre) - np.arctan2(cim, cre)), 0.0)
        kr = 2 * lam * dtheta / np.where(active, amp_r2, 1.0)
        kc = 2 * lam * dtheta / np.where(active, amp_c2, 1.0)
        g_rre, g_rim = g_rre - kr * rim, g_rim + kr * rre
        g_cre, g_cim = g_cre + kc * cim, g_cim - kc * cre
        tn2 = np.einsum("ij,ij->i", t, t)
        dlam = -2 * penalty.alpha * penalty.lambda_p / (1 + penalty.alpha * tn2) ** 2
        grad_t += (dlam * dtheta ** 2)[:, None] * t
    grad_t += (g_rre[:, None] * drre + g_rim[:, None] * drim
               + g_cre[:, None] * dcre + g_cim[:, None] * dcim)
    return float(losses.mean()), (grad_t * t).mean(axis=0)


def band_objective_fd_grad(log_s, z, geometry, band, reference, coreset, penalty, h: float = 1e-4):
    """Central finite differences of the band objective in log-scale (common random numbers)."""
    grad = np.zeros_like(log_s)
    for j in range(len(log_s)):
        e = np.zeros_like(log_s)
        e[j] = h
        up = band_objective(log_s + e, z, geometry, band, reference, coreset, penalty)
        dn = band_objective(log_s - e, z, geometry, band, reference, coreset, penalty)
        grad[j] = (up - dn) / (2 * h)
    return grad


def optimize_band_scales(reference, init_coreset, band, geometry: BandGeometry,
                         penalty: PhasePenaltyParams = PhasePenaltyParams(),
                         n_mc: int = 256, n_opt: int = 30, lr: float = 0.1,
                         gradient: str = "pathwise", clamp: float = 10.0, seed: int = 0) -> np.ndarray:
    """Projected ascent on log-scales maximizing the band's mean per-frequency loss.

    Each step redraws ``n_mc`` standard-normal directions and moves every log
    scale by at most ``lr`` along the normalized gradient. Scales stay within
    a factor ``clamp`` of the isotropic start. Falls back to the isotropic
    start when no draw lands in the band.
    """
    ref = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    cor = np.atleast_2d(np.asarray(init_coreset, dtype=np.float64))
    b = band_index(band)
    init = geometry.isotropic_scales(b, seed)
    log_s = np.log(init)
    lo, hi = log_s - np.log(clamp), log_s + np.log(clamp)
    d = ref.shape[1]
    accepted_any = False
    for step in range(n_opt):
        z = np.random.default_rng([seed, b, step]).standard_normal((n_mc, d))
        if not _band_draws(log_s, z, geometry, b)[1].any():
            continue
        accepted_any = True
        if gradient == "fd":
            g = band_objective_fd_grad(log_s, z, geometry, b, ref, cor, penalty)
        elif gradient == "pathwise":
            g = band_objective_grad(log_s, z, geometry, b, ref, cor, penalty)[1]
        else:
            raise InvalidParameterError(f"unknown gradient mode {gradient!r}")
        gmax = np.abs(g).max()
        if gmax > 0:
            log_s = np.clip(log_s + lr * g / gmax, lo, hi)
    if not accepted_any:
        log.warning("band %s: no Monte-Carlo draw accepted, keeping isotropic scales", BANDS[b])
        return init
    return np.exp(log_s)


def band_counts(n_lib: int, split: Sequence[float] = DEFAULT_SPLIT) -> list[int]:
    counts = [int(np.floor(n_lib * f + 0.5)) for f in split[:2]]
    counts.append(n_lib - sum(counts))
    if min(counts) < 1:
        raise InvalidParameterError(f"library of {n_lib} atoms leaves an empty band: {counts}")
    return counts


def build_library(band_scales, geometry: BandGeometry, n_lib: int = 300,
                  split: Sequence[float] = DEFAULT_SPLIT, seed: int = 0,
                  max_draws_per_atom: int = 10000) -> FrequencyLibrary:
    """Draw each band's atoms from ``N(0, diag(s_band^2))`` with rejection by norm."""
    band_scales = np.asarray(band_scales, dtype=np.float64)
    if np.any(band_scales <= 0):
        raise InvalidParameterError("band scales must be positive")
    counts = band_counts(n_lib, split)
    d = band_scales.shape[1]
    omegas, bands = [], []
    for b, need in enumerate(counts):
        rng = np.random.default_rng([seed, 101, b])
        got, drawn = [], 0
        while sum(len(g) for g in got) < need:
            if drawn >= max_draws_per_atom * need:
                raise InvalidParameterError(
                    f"rejection budget exhausted for band {BANDS[b]!r}")
            chunk = max(4 * need, 256)
            t = rng.standard_normal((chunk, d)) * band_scales[b]
            drawn += chunk
            got.append(t[geometry.contains(np.linalg.norm(t, axis=1), b)])
        omegas.append(np.concatenate(got)[:need])
        bands.append(np.full(need, b))
    return FrequencyLibrary(np.concatenate(omegas), np.concatenate(bands), band_scales,
                            geometry.edges.copy(), seed)


def candidate_pool(library: FrequencyLibrary, tau: float) -> np.ndarray:
    return np.flatnonzero(library.norms <= tau)


def refresh_scores(library: FrequencyLibrary, pool: np.ndarray, coreset, ref_re, ref_im,
                   penalty: PhasePenaltyParams, metric: str = "pdcfd") -> np.ndarray:
    """Recompute the cached per-frequency loss for the pooled atoms only."""
    om = library.omegas[pool]
    cre, cim = ecf_batch(coreset, om)
    library.scores[pool] = per_frequency_loss(cre, cim, ref_re[pool], ref_im[pool], om, penalty, metric)
    return library.scores[pool]


def selection_probabilities(scores: np.ndarray, max_cos: np.ndarray, available: np.ndarray) -> np.ndarray:
    """Next-pick probabilities ``score * (1 - max|cos|)`` over available atoms.

    Falls back to uniform over the available atoms when every weight is zero.
    """
    w = np.where(available, np.maximum(scores * (1.0 - max_cos), 0.0), 0.0)
    if not w.sum() > 0:
        w = available.astype(np.float64)
    return w / w.sum()


def diverse_draw(scores: np.ndarray, directions: np.ndarray, k: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Sequential draw without replacement, probability proportional to score times diversity.

    Diversity is ``1 - max |cos|`` to the atoms already picked.
    """
    n = len(scores)
    k = min(k, n)
    norms = np.linalg.norm(directions, axis=1)
    unit = directions / np.where(norms > 0, norms, 1.0)[:, None]
    max_cos = np.zeros(n)
    available = np.ones(n, dtype=bool)
    picks = []
    for _ in range(k):
        p = selection_probabilities(scores, max_cos, available)
        cdf = np.cumsum(p)
        j = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), n - 1)
        while p[j] <= 0:
            j -= 1
        picks.append(j)
        available[j] = False
        max_cos = np.maximum(max_cos, np.abs(unit @ unit[j]))
    return np.array(picks, dtype=np.int64)


def pdas_sample(library: FrequencyLibrary, schedule: CurriculumSchedule, t: int, batch_k: int,
                coreset, reference=None, penalty: PhasePenaltyParams = PhasePenaltyParams(),
                seed: int = 0, metric: str = "pdcfd", ref_ecf=None) -> np.ndarray:
    """Library indices of a discrepancy- and diversity-weighted batch from the pool ``C_t``.

    Pass ``ref_ecf=(re, im)`` over the whole library to skip recomputing the
    reference ECF.
    """
    pool = candidate_pool(library, tau_at(schedule, t))
    if len(pool) == 0:
        raise InvalidParameterError("candidate pool is empty; tau_low is below every atom norm")
    if len(pool) < batch_k:
        log.info("iteration %d: pool holds %d atoms, fewer than batch size %d", t, len(pool), batch_k)
    if ref_ecf is None:
        ref_ecf = ecf_batch(reference, library.omegas)
    scores = refresh_scores(library, pool, coreset, ref_ecf[0], ref_ecf[1], penalty, metric)
    rng = np.random.default_rng([seed, 202, t])
    return pool[diverse_draw(scores, library.omegas[pool], batch_k, rng)]


def uniform_sample(library: FrequencyLibrary, batch_k: int, t: int, seed: int = 0) -> np.ndarray:
    """Uniform draw over the whole library, no curriculum."""
    rng = np.random.default_rng([seed, 303, t])
    return np.sort(rng.choice(len(library), min(batch_k, len(library)), replace=False))


def topk_amplitude(library: FrequencyLibrary, batch_k: int, ref_re, ref_im) -> np.ndarray:
    """The atoms with the largest reference ECF amplitude."""
    amp = np.hypot(ref_re, ref_im)
    return np.sort(np.argsort(-amp, kind="stable")[:batch_k])


def collinear_batch(library: FrequencyLibrary, batch_k: int, seed: int = 0) -> np.ndarray:
    """Degenerate batch: ``batch_k`` frequencies on one line, norms spanning the library."""
    rng = np.random.default_rng([seed, 404])
    u = rng.standard_normal(library.omegas.shape[1])
    u /= np.linalg.norm(u)
    mags = np.quantile(library.norms, np.linspace(0.0, 1.0, batch_k))
    return mags[:, None] * u[None, :]
