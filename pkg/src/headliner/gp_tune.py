"""Bayesian optimization of decoding parameters with a Gaussian process.

The tuner maximizes a black-box objective (mean headline-set BLEU in
the pipeline) over a box of decoding parameters: diversity penalty,
repetition penalty, and length decay. Inputs are min-max normalized to
the unit cube, the surrogate is GP regression with an anisotropic RBF
kernel (per-dimension length scales) around a constant prior mean equal
to the observation mean, and the acquisition is closed-form expected
improvement maximized over a scrambled Sobol candidate set plus local
coordinate refinement. Everything is deterministic given seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.stats import norm, qmc

Point = tuple[float, ...]

# Default search box: diversity penalty, repetition penalty, length decay.
DECODING_BOUNDS = ((0.0, 2.0), (0.0, 3.0), (0.5, 1.0))


@dataclass(frozen=True)
class Bounds:
    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.intervals) == 0:
            raise ValueError("at least one dimension required")
        for lo, hi in self.intervals:
            if not lo < hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")

    @property
    def dim(self) -> int:
        return len(self.intervals)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        arr = np.asarray(self.intervals, dtype=np.float64)
        return arr[:, 0], arr[:, 1]

    def contains(self, point: Sequence[float]) -> bool:
        lo, hi = self.as_arrays()
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def normalize(self, points: np.ndarray) -> np.ndarray:
        lo, hi = self.as_arrays()
        return (np.asarray(points, dtype=np.float64) - lo) / (hi - lo)

    def denormalize(self, unit: np.ndarray) -> np.ndarray:
        lo, hi = self.as_arrays()
        return lo + np.asarray(unit, dtype=np.float64) * (hi - lo)


def decoding_bounds() -> Bounds:
    return Bounds(DECODING_BOUNDS)


@dataclass(frozen=True)
class KernelParams:
    signal_var: float = 1.0
    length_scales: tuple[float, ...] = ()
    noise_var: float = 1e-6

    def __post_init__(self):
        if self.signal_var <= 0:
            raise ValueError("signal_var must be positive")
        if self.noise_var <= 0:
            raise ValueError("noise_var must be positive")
        if any(ls <= 0 for ls in self.length_scales):
            raise ValueError("length scales must be positive")


def rbf_kernel(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Anisotropic squared-exponential kernel on already-normalized inputs."""
    ls = np.asarray(params.length_scales, dtype=np.float64)
    sq = (((a[:, None, :] - b[None, :, :]) / ls) ** 2).sum(axis=-1)
    return params.signal_var * np.exp(-0.5 * sq)


@dataclass
class GPState:
    bounds: Bounds
    x_unit: np.ndarray  # (n, d) normalized observation points
    y: np.ndarray  # (n,) objective values
    kernel: KernelParams
    prior_mean: float
    chol: np.ndarray
    alpha: np.ndarray


_JITTERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


def _factorize(xu: np.ndarray, y: np.ndarray, kernel: KernelParams):
    k = rbf_kernel(xu, xu, kernel)
    n = xu.shape[0]
    for jitter in _JITTERS:
        try:
            chol = cholesky(
                k + (kernel.noise_var + jitter) * np.eye(n), lower=True
            )
        except np.linalg.LinAlgError:
            continue
        return chol
    raise ValueError("kernel matrix is not positive definite after jitter escalation")


def _log_marginal(xu, y_centered, kernel: KernelParams) -> float:
    try:
        chol = _factorize(xu, y_centered, kernel)
    except ValueError:
        return -np.inf
    alpha = cho_solve((chol, True), y_centered)
    return float(
        -0.5 * y_centered @ alpha
        - np.log(np.diag(chol)).sum()
        - 0.5 * len(y_centered) * math.log(2.0 * math.pi)
    )


def fit(
    observations: Sequence[tuple[Sequence[float], float]],
    bounds: Bounds,
    kernel: KernelParams | None = None,
    *,
    refit: bool = False,
    seed: int = 0,
) -> GPState:
    """Exact GP regression posterior over the observations.

    The prior mean is the observation mean, so with every observation
    equal the posterior mean is flat and acquisition reduces to pure
    variance. With ``refit`` the signal variance and length scales are
    re-estimated by multi-start local maximization of the marginal
    likelihood (noise is kept fixed).
    """
    if len(observations) == 0:
        raise ValueError("GP fit needs at least one observation")
    points = np.asarray([p for p, _ in observations], dtype=np.float64)
    y = np.asarray([v for _, v in observations], dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("objective values must be finite")
    for p in points:
        if not bounds.contains(p):
            raise ValueError(f"observation {tuple(p)} outside bounds")
    xu = bounds.normalize(points)
    if kernel is None:
        sv = float(np.var(y))
        kernel = KernelParams(
            signal_var=sv if sv > 1e-12 else 1.0,
            length_scales=(0.3,) * bounds.dim,
            noise_var=1e-6,
        )
    elif len(kernel.length_scales) != bounds.dim:
        raise ValueError("one length scale per dimension required")
    prior_mean = float(y.mean())
    yc = y - prior_mean

    if refit and len(observations) >= 3:
        rng = np.random.default_rng(seed)
        base = np.log(np.array(
            [kernel.signal_var, *kernel.length_scales], dtype=np.float64
        ))
        lo = np.log(np.array([1e-6] + [0.02] * bounds.dim))
        hi = np.log(np.array([1e6] + [10.0] * bounds.dim))
        starts = [base]
        starts += [
            np.clip(base + rng.normal(0.0, 1.0, base.shape), lo, hi)
            for _ in range(2)
        ]

        def objective(logp):
            k = KernelParams(
                signal_var=float(np.exp(logp[0])),
                length_scales=tuple(np.exp(logp[1:])),
                noise_var=kernel.noise_var,
            )
            return -_log_marginal(xu, yc, k)

        best_logp, best_val = base, objective(base)
        for start in starts:
            res = optimize.minimize(
                objective, start, method="L-BFGS-B",
                bounds=list(zip(lo, hi)),
            )
            if res.fun < best_val:
                best_logp, best_val = res.x, res.fun
        kernel = KernelParams(
            signal_var=float(np.exp(best_logp[0])),
            length_scales=tuple(np.exp(best_logp[1:])),
            noise_var=kernel.noise_var,
        )

    chol = _factorize(xu, yc, kernel)
    alpha = cho_solve((chol, True), yc)
    return GPState(bounds, xu, y, kernel, prior_mean, chol, alpha)


def predict(state: GPState, points) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and latent variance at raw-coordinate points."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pu = state.bounds.normalize(p)
    ks = rbf_kernel(state.x_unit, pu, state.kernel)
    mu = state.prior_mean + ks.T @ state.alpha
    v = solve_triangular(state.chol, ks, lower=True)
    var = np.clip(state.kernel.signal_var - (v * v).sum(axis=0), 0.0, None)
    return mu, var


def expected_improvement(state: GPState, points, best_so_far: float) -> np.ndarray:
    """Closed-form EI for maximization; max(mu - best, 0) where sigma = 0."""
    mu, var = predict(state, points)
    sigma = np.sqrt(var)
    improve = mu - best_so_far
    ei = np.where(improve > 0, improve, 0.0)
    pos = sigma > 0
    z = np.zeros_like(mu)
    np.divide(improve, sigma, out=z, where=pos)
    ei_pos = improve * norm.cdf(z) + sigma * norm.pdf(z)
    return np.where(pos, ei_pos, ei)


def _sobol_points(bounds: Bounds, n: int, seed: int) -> np.ndarray:
    sampler = qmc.Sobol(d=bounds.dim, scramble=True, seed=seed)
    unit = sampler.random_base2(max(1, math.ceil(math.log2(n))))[:n]
    return bounds.denormalize(unit)


def suggest_next(
    state: GPState,
    bounds: Bounds,
    seed: int,
    *,
    n_candidates: int = 2048,
    best_so_far: float | None = None,
) -> np.ndarray:
    """EI argmax over a Sobol candidate set, then coordinate refinement."""
    if best_so_far is None:
        best_so_far = float(state.y.max())
    cands = _sobol_points(bounds, n_candidates, seed)
    ei = expected_improvement(state, cands, best_so_far)
    best = cands[int(np.argmax(ei))].copy()
    best_ei = float(ei.max())
    lo, hi = bounds.as_arrays()
    for round_idx in range(1, 4):
        radius = (hi - lo) * 0.1 * (0.5 ** (round_idx - 1))
        for d in range(bounds.dim):
            line = np.tile(best, (17, 1))
            line[:, d] = np.clip(
                np.linspace(best[d] - radius[d], best[d] + radius[d], 17),
                lo[d], hi[d],
            )
            line_ei = expected_improvement(state, line, best_so_far)
            j = int(np.argmax(line_ei))
            if line_ei[j] > best_ei:
                best_ei = float(line_ei[j])
                best = line[j].copy()
    return best


@dataclass
class TuneResult:
    best_point: Point
    best_value: float
    trace: list[dict] = field(default_factory=list)
    n_failures: int = 0


def tune(
    objective: Callable[[Point], float],
    bounds: Bounds,
    budget: int,
    n_init: int | None = None,
    seed: int = 0,
    *,
    integer_dims: tuple[int, ...] = (),
) -> TuneResult:
    """Quasi-random initialization, then fit/suggest/evaluate to budget.

    Non-finite objective values are recorded as failures and replaced by
    a floor below the worst finite observation so the search continues.
    The trace records every evaluation with the running incumbent, which
    is non-decreasing by construction. ``integer_dims`` rounds those
    coordinates before evaluation for parameters with integer semantics.
    """
    if n_init is None:
        n_init = max(4, 2 * bounds.dim)
    if not 2 <= n_init <= budget:
        raise ValueError("need budget >= n_init >= 2")

    observations: list[tuple[np.ndarray, float]] = []
    trace: list[dict] = []
    n_failures = 0
    best_point: np.ndarray | None = None
    best_value = -math.inf

    def floor_value() -> float:
        finite = [v for _, v in observations if v > -math.inf]
        return (min(finite) - 1.0) if finite else -1e9

    def evaluate(point: np.ndarray) -> None:
        nonlocal n_failures, best_point, best_value
        p = point.copy()
        for d in integer_dims:
            p[d] = np.clip(round(p[d]), *bounds.intervals[d])
        raw = objective(tuple(float(c) for c in p))
        try:
            value = float(raw)
            failed = not math.isfinite(value)
        except (TypeError, ValueError):
            failed = True
        if failed:
            n_failures += 1
            value = floor_value()
        observations.append((p, value))
        if value > best_value:
            best_value = value
            best_point = p
        trace.append({
            "point": tuple(float(c) for c in p),
            "value": value if not failed else None,
            "failed": failed,
            "incumbent": best_value,
        })

    for point in _sobol_points(bounds, n_init, seed):
        evaluate(point)

    while len(observations) < budget:
        state = fit(
            [(p, v) for p, v in observations], bounds,
            refit=True, seed=seed + len(observations),
        )
        suggestion = suggest_next(
            state, bounds, seed + 7919 * len(observations),
            best_so_far=best_value,
        )
        evaluate(suggestion)

    assert best_point is not None
    return TuneResult(
        best_point=tuple(float(c) for c in best_point),
        best_value=best_value,
        trace=trace,
        n_failures=n_failures,
    )
