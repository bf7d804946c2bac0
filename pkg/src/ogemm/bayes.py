"""Gaussian-process Bayesian optimisation over the unit box, and the device driver.

Surrogate: Matern-5/2 kernel with one length-scale per dimension, signal and
observation-noise variances fitted by maximising the log marginal likelihood.
Acquisition: expected improvement with offset ``xi``, maximised by a batched
multi-start gradient ascent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.stats import norm

from . import device as dev
from .errors import NumericalError
from .rng import stream
from .trace import OptimizationTrace

SQRT5 = np.sqrt(5.0)
JITTER = 1e-8
LOG_BOUNDS_LS = (np.log(1e-2), np.log(20.0))
LOG_BOUNDS_SF2 = (np.log(1e-3), np.log(1e2))
LOG_BOUNDS_NOISE = (np.log(1e-8), np.log(1.0))


def _scaled_diff(X1, X2, ls):
    return (X1[:, None, :] - X2[None, :, :]) / ls


def matern52(X1, X2, ls, sf2) -> np.ndarray:
    r = np.sqrt(np.sum(_scaled_diff(X1, X2, ls) ** 2, axis=-1))
    return sf2 * (1.0 + SQRT5 * r + 5.0 / 3.0 * r ** 2) * np.exp(-SQRT5 * r)


@dataclass
class GpState:
    """Observations and kernel hyperparameters (targets standardised internally)."""

    dim: int
    lengthscales: np.ndarray = None
    signal_var: float = 1.0           # in standardised units
    noise_var: float = 1e-4           # in standardised units
    xi: float = 0.01
    fit_noise: bool = True
    X: np.ndarray = None
    y: np.ndarray = None
    _chol: np.ndarray = field(default=None, repr=False)
    _alpha: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.lengthscales is None:
            self.lengthscales = np.full(self.dim, 0.3)
        self.lengthscales = np.asarray(self.lengthscales, dtype=float)
        if self.X is None:
            self.X = np.zeros((0, self.dim))
            self.y = np.zeros(0)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def y_mean(self) -> float:
        return float(np.mean(self.y)) if self.n else 0.0

    @property
    def y_scale(self) -> float:
        s = float(np.std(self.y)) if self.n > 1 else 0.0
        return s if s > 1e-12 else 1.0

    @property
    def signal_variance(self) -> float:
        """Prior variance in the units of ``y``."""
        return self.signal_var * self.y_scale ** 2

    def add(self, x, y) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if np.any(x < -1e-12) or np.any(x > 1 + 1e-12):
            raise ValueError("GP inputs must lie in the unit box")
        self.X = np.vstack([self.X, x])
        self.y = np.append(self.y, np.asarray(y, dtype=float).ravel())
        self._chol = None

    def kernel_matrix(self) -> np.ndarray:
        return matern52(self.X, self.X, self.lengthscales, self.signal_var)

    def _factor(self):
        if self._chol is not None:
            return
        K = self.kernel_matrix()
        base = self.noise_var + JITTER * self.signal_var
        for extra in (0.0, 1e-6, 1e-4):
            try:
                L = cholesky(K + (base + extra * self.signal_var) * np.eye(self.n), lower=True)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise NumericalError(
                f"kernel matrix not positive definite after jitter (n={self.n}, "
                f"lengthscales={self.lengthscales.round(4).tolist()}, noise={self.noise_var:.3g}, "
                f"min eig={np.linalg.eigvalsh(K).min():.3g})")
        yn = (self.y - self.y_mean) / self.y_scale
        self._chol = L
        self._alpha = cho_solve((L, True), yn)

    def fit(self, restarts: int = 1, rng: np.random.Generator | None = None) -> None:
        """Maximise the log marginal likelihood over (log) hyperparameters."""
        if self.n < 2:
            return
        yn = (self.y - self.y_mean) / self.y_scale
        d = self.dim
        D2 = _scaled_diff(self.X, self.X, np.ones(d)) ** 2   # (n, n, d)

        def nll(theta):
            ls = np.exp(theta[:d])
            sf2 = np.exp(theta[d])
            noise = np.exp(theta[d + 1]) if self.fit_noise else self.noise_var
            s = D2 / ls ** 2
            r = np.sqrt(np.sum(s, axis=-1))
            e = np.exp(-SQRT5 * r)
            K0 = (1.0 + SQRT5 * r + 5.0 / 3.0 * r ** 2) * e
            K = sf2 * K0 + (noise + JITTER * sf2) * np.eye(self.n)
            try:
                L = cholesky(K, lower=True)
            except np.linalg.LinAlgError:
                return 1e25, np.zeros_like(theta)
            alpha = cho_solve((L, True), yn)
            val = 0.5 * yn @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * self.n * np.log(2 * np.pi)
            W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(self.n))
            grad = np.zeros_like(theta)
            # dK/dlog(ls_k) = sf2 * 5/3 (1 + sqrt5 r) e^{-sqrt5 r} * s_k
            common = sf2 * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e
            for k in range(d):
                grad[k] = -0.5 * np.sum(W * (common * s[..., k]))
            grad[d] = -0.5 * np.sum(W * (sf2 * K0 + JITTER * sf2 * np.eye(self.n)))
            if self.fit_noise:
                grad[d + 1] = -0.5 * np.trace(W) * noise
            return val, grad

        bounds = [LOG_BOUNDS_LS] * d + [LOG_BOUNDS_SF2] + ([LOG_BOUNDS_NOISE] if self.fit_noise else [])
        theta0 = np.concatenate([np.log(self.lengthscales), [np.log(self.signal_var)],
                                 [np.log(max(self.noise_var, 1e-8))] if self.fit_noise else []])
        starts = [np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])]
        starts.append(np.array([np.log(0.3)] * d + [0.0] + ([np.log(1e-2)] if self.fit_noise else [])))
        rng = rng or np.random.default_rng(0)
        for _ in range(max(0, restarts - 1)):
            starts.append(np.array([rng.uniform(*b) for b in bounds]))
        best = None
        for th in starts:
            res = minimize(nll, th, jac=True, method="L-BFGS-B", bounds=bounds)
            if best is None or res.fun < best.fun:
                best = res
        th = best.x
        self.lengthscales = np.exp(th[:d])
        self.signal_var = float(np.exp(th[d]))
        if self.fit_noise:
            self.noise_var = float(np.exp(th[d + 1]))
        self._chol = None

    def posterior(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance (units of ``y``) at points ``x`` (m, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.n == 0:
            return np.zeros(len(x)), np.full(len(x), self.signal_var)
        self._factor()
        Ks = matern52(x, self.X, self.lengthscales, self.signal_var)
        mu = Ks @ self._alpha
        v = solve_triangular(self._chol, Ks.T, lower=True)
        var = np.maximum(self.signal_var - np.sum(v ** 2, axis=0), 0.0)
        return self.y_mean + self.y_scale * mu, var * self.y_scale ** 2

    def posterior_grad(self, x):
        """Mean, variance and their gradients w.r.t. ``x`` (m, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self._factor()
        ls, sf2 = self.lengthscales, self.signal_var
        diff = _scaled_diff(x, self.X, ls)                       # (m, n, d)
        r = np.sqrt(np.sum(diff ** 2, axis=-1))
        e = np.exp(-SQRT5 * r)
        Ks = sf2 * (1.0 + SQRT5 * r + 5.0 / 3.0 * r ** 2) * e  # (m, n)
        dK = (-5.0 / 3.0 * sf2 * (1.0 + SQRT5 * r) * e)[..., None] * diff / ls  # (m, n, d)
        mu = Ks @ self._alpha
        dmu = np.einsum("mnd,n->md", dK, self._alpha)
        Kinv_k = cho_solve((self._chol, True), Ks.T)             # (n, m)
        var = np.maximum(sf2 - np.sum(Ks * Kinv_k.T, axis=1), 0.0)
        dvar = -2.0 * np.einsum("mnd,nm->md", dK, Kinv_k)
        s = self.y_scale
        return self.y_mean + s * mu, var * s ** 2, s * dmu, dvar * s ** 2


def gp_posterior(state: GpState, x) -> tuple[float, float]:
    mu, var = state.posterior(np.atleast_2d(x))
    return float(mu[0]), float(var[0])


def expected_improvement(state: GpState, x, best: float | None = None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if state.n == 0:
        return np.full(len(x), np.sqrt(state.signal_var) * norm.pdf(0.0))
    best = float(np.max(state.y)) if best is None else best
    mu, var = state.posterior(x)
    sd = np.sqrt(var)
    imp = mu - best - state.xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, imp / sd, 0.0)
    ei = np.where(sd > 0, imp * norm.cdf(z) + sd * norm.pdf(z), np.maximum(imp, 0.0))
    return np.maximum(ei, 0.0)


def _ei_and_grad(state: GpState, x, best: float):
    mu, var, dmu, dvar = state.posterior_grad(x)
    sd = np.sqrt(np.maximum(var, 1e-300))
    imp = mu - best - state.xi
    z = imp / sd
    cdf, pdf = norm.cdf(z), norm.pdf(z)
    ei = np.maximum(imp * cdf + sd * pdf, 0.0)
    dsd = dvar / (2.0 * sd[:, None])
    grad = cdf[:, None] * dmu + pdf[:, None] * dsd
    return ei, grad


def propose_next(state: GpState, rng: np.random.Generator | None = None, restarts: int = 64,
                 candidates: int = 2048, steps: int = 60, lr: float = 0.02,
                 snap: Callable[[np.ndarray], np.ndarray] | None = None,
                 frozen_dims: tuple[int, ...] = ()) -> np.ndarray:
    """Point of the unit box maximising expected improvement.

    ``snap`` maps raw points to where they will actually be evaluated (e.g.
    integer rounding); EI is scored at the snapped point. ``frozen_dims`` are
    not moved by the local search (their gradient is zero after snapping).
    """
    d = state.dim
    if state.n == 0:
        return np.full(d, 0.5)
    rng = rng or np.random.default_rng(0)
    snap = snap or (lambda z: z)
    best = float(np.max(state.y))
    top = state.X[np.argsort(state.y)[-min(8, state.n):]]
    pool = np.vstack([
        rng.random((candidates, d)),
        np.clip(np.repeat(top, 32, axis=0) + rng.normal(0, 0.05, (32 * len(top), d)), 0, 1),
    ])
    scores = expected_improvement(state, np.apply_along_axis(snap, 1, pool), best)
    x = pool[np.argsort(scores)[-restarts:]].copy()
    mask = np.ones(d)
    mask[list(frozen_dims)] = 0.0
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, steps + 1):
        xs = np.apply_along_axis(snap, 1, x)
        _, g = _ei_and_grad(state, xs, best)
        g = g * mask
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        step = lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-12)
        x = np.clip(x + step, 0.0, 1.0)
    xs = np.apply_along_axis(snap, 1, x)
    final = expected_improvement(state, xs, best)
    return x[int(np.argmax(final))]


class BayesOptimizer:
    """Ask/tell loop around a :class:`GpState`."""

    def __init__(self, dim: int, seed: int = 0, xi: float = 0.01, fit_every: int = 10,
                 restarts: int = 64, snap=None, frozen_dims: tuple[int, ...] = ()):
        self.gp = GpState(dim, xi=xi)
        self.rng = stream(seed, 17)
        self.fit_every = fit_every
        self.restarts = restarts
        self.snap = snap
        self.frozen_dims = frozen_dims
        self._told = 0
        self._seen: set[tuple] = set()

    def ask(self) -> np.ndarray:
        return propose_next(self.gp, self.rng, self.restarts, snap=self.snap, frozen_dims=self.frozen_dims)

    def tell(self, x, y) -> None:
        key = tuple(np.round(np.asarray(x, dtype=float), 12))
        if key not in self._seen:
            self._seen.add(key)
            self.gp.add(x, y)
        self._told += 1
        if self.gp.n >= 3 and (self._told % self.fit_every == 0 or self.gp.n == 3):
            self.gp.fit(rng=self.rng)


def maximize(f: Callable[[np.ndarray], float], dim: int, iterations: int, seed: int = 0,
             **kw) -> tuple[np.ndarray, np.ndarray]:
    """Maximise ``f`` over the unit box; returns evaluated points and values."""
    opt = BayesOptimizer(dim, seed, **kw)
    xs, ys = [], []
    for _ in range(iterations):
        x = opt.ask()
        y = float(f(x))
        opt.tell(x, y)
        xs.append(x)
        ys.append(y)
    return np.array(xs), np.array(ys)


# --- device space ------------------------------------------------------------------------------


def _snap_integer_dims(u: np.ndarray) -> np.ndarray:
    x = dev.LOWER + np.clip(u, 0, 1) * (dev.UPPER - dev.LOWER)
    ints = list(dev.INTEGER_DIMS)
    x[ints] = np.round(x[ints])
    return (x - dev.LOWER) / (dev.UPPER - dev.LOWER)


def bayes_optimize(env, iterations: int, seed: int = 0, start=None, label: str = "bayes"):
    """One optimisation run over the device space.

    ``start`` (a genome) is observed first when given. Each proposal is
    rounded to the nearest legal genome (integers, whole nanometres) before
    its reward is evaluated. Returns ``(trace, optimizer)``; the trace starts
    with the initial device when there is one.
    """
    opt = BayesOptimizer(dev.N_DIMS, seed, snap=_snap_integer_dims, frozen_dims=dev.INTEGER_DIMS)
    records = []
    if start is not None:
        m = env.metrics(start)
        opt.tell(start.normalized(), m["reward"])
        records.append(m)
    for _ in range(iterations):
        g = dev.from_unit_vector(opt.ask())
        m = env.metrics(g)
        opt.tell(g.normalized(), m["reward"])
        records.append(m)
    return OptimizationTrace.from_records([records], label=label), opt


def best_so_far(values) -> np.ndarray:
    return np.maximum.accumulate(np.asarray(values, dtype=float))


def bayes_runs(env, n_runs: int, iterations: int, seed: int = 0, starts=None):
    """Independent runs, each from its own random device with reward < 0."""
    from .dqn import negative_starts

    if starts is None:
        starts = negative_starts(env, n_runs, stream(seed, 13))
    traces, opts = [], []
    for k, s in enumerate(starts):
        tr, opt = bayes_optimize(env, iterations, seed=seed * 1000 + k, start=s)
        traces.append(tr)
        opts.append(opt)
    records = [[{"reward": t.reward[0, i], "t_max": t.t_max[0, i], "t_diff": t.t_diff[0, i],
                 "thickness": t.thickness[0, i], "genome": t.genomes[0][i]} for i in range(t.n_iters)]
               for t in traces]
    return OptimizationTrace.from_records(records, label="bayes"), opts


def cascade_starts(env, bayes_trace: OptimizationTrace, gp: GpState, n: int,
                   rng: np.random.Generator, pool: int = 4096,
                   max_samples: int = 100_000) -> list:
    """``n`` devices with reward < 0 drawn through the partially optimised model.

    Candidates are the run's own samples plus random devices screened by the
    GP posterior mean (most promising first). Degenerate devices (floor
    reward) are skipped; the ``n`` best distinct candidates below zero are
    returned, cycled if fewer exist, or an empty list if there are none.
    """
    floor = getattr(env, "floor", -np.inf)
    cands: dict[tuple, tuple] = {}

    def consider(g, r):
        if floor < r < 0:
            cands.setdefault(g.key(), (r, g))

    for run_g, run_r in zip(bayes_trace.genomes, bayes_trace.reward):
        for g, r in zip(run_g, run_r):
            consider(g, r)
    found, tried = 0, 0
    while found < 4 * n and tried < max_samples:
        batch = [dev.random_genome(rng) for _ in range(pool)]
        mu, _ = gp.posterior(np.array([g.normalized() for g in batch]))
        for i in np.argsort(-mu, kind="stable"):
            r = env.reward(batch[i])
            tried += 1
            if floor < r < 0 and batch[i].key() not in cands:
                consider(batch[i], r)
                found += 1
                if found >= 4 * n:
                    break
            if tried >= max_samples:
                break
    ranked = sorted(cands.values(), key=lambda c: -c[0])[:n]
    picked = [g for _, g in ranked]
    return [picked[i % len(picked)] for i in range(n)] if picked else []


@dataclass
class CascadeResult:
    trace: OptimizationTrace          # Bayesian iterations followed by the DQN rollouts
    validation: OptimizationTrace     # the DQN rollouts alone
    bayes: OptimizationTrace | None
    gp: GpState | None


def cascade_optimize(env, agent, n_init_devices: int, bayes_iters: int = 200,
                     dqn_iters: int = 500, seed: int = 0) -> CascadeResult:
    """Bayesian warm start whose reward < 0 samples seed the DQN validation rollouts.

    With ``bayes_iters == 0`` this is exactly the plain DQN validation.
    """
    from .dqn import negative_starts, rollout

    bayes_trace, gp = None, None
    starts = []
    if bayes_iters > 0:
        s0 = negative_starts(env, 1, stream(seed, 19))[0]
        bayes_trace, opt = bayes_optimize(env, bayes_iters, seed, start=s0)
        gp = opt.gp
        starts = cascade_starts(env, bayes_trace, gp, n_init_devices, stream(seed, 23))
    if not starts:
        starts = negative_starts(env, n_init_devices, stream(seed, 13))
    val = rollout(agent, env, starts, dqn_iters, seed, label="dqn-validation")
    full = val if bayes_trace is None else bayes_trace.concat(val, label="cascade")
    return CascadeResult(full, val, bayes_trace, gp)


def write_gp_dump(gp: GpState, path) -> None:
    """GP observations and hyperparameters as a compressed ``.npz``."""
    np.savez_compressed(path, X=gp.X, y=gp.y, lengthscales=gp.lengthscales,
                        signal_var=gp.signal_var, noise_var=gp.noise_var, xi=gp.xi,
                        y_mean=gp.y_mean, y_scale=gp.y_scale)


def read_gp_dump(path) -> GpState:
    d = np.load(path)
    gp = GpState(d["X"].shape[1], lengthscales=d["lengthscales"], signal_var=float(d["signal_var"]),
                 noise_var=float(d["noise_var"]), xi=float(d["xi"]))
    gp.add(d["X"], d["y"])
    return gp
