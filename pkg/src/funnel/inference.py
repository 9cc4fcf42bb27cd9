"""Posterior fitting: MAP optimisation plus adaptive HMC with its diagnostics."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from . import transforms
from .model import (
    FunnelConfig,
    FunnelData,
    ModelParams,
    _as_data,
    grad_log_posterior,
    parameter_names,
)

log = logging.getLogger(__name__)

to_unconstrained = ModelParams.to_unconstrained
log_jacobian = transforms.log_jacobian


def to_constrained(theta: np.ndarray, n_features: int) -> ModelParams:
    return ModelParams.from_unconstrained(theta, n_features)


class InitializationError(RuntimeError):
    pass


class SamplerFailure(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# -- MAP -----------------------------------------------------------------------

@dataclass
class MapResult:
    params: ModelParams
    log_posterior: float
    theta: np.ndarray
    grad_norm: float
    n_iter: int
    converged: bool


def _default_init(config: FunnelConfig) -> np.ndarray:
    d = config.n_features
    K = config.n_stages
    t = np.linspace(0.1, 0.6, K - 1) if K > 2 else np.array([0.25])
    p = ModelParams(config.priors.alpha_mean, np.zeros(d), t, np.full(K - 1, 0.5))
    return p.to_unconstrained()


def fit_map(dataset, config: FunnelConfig, init: Optional[np.ndarray] = None, max_iter: int = 1000,
            gtol: float = 1e-6) -> MapResult:
    """Maximise the unconstrained log posterior.

    Quasi-Newton (L-BFGS with line search) followed by a few Newton steps on a
    finite-difference Hessian to drive the gradient norm below ``gtol``.
    """
    data = _as_data(dataset, config)
    theta0 = _default_init(config) if init is None else np.asarray(init, dtype=float).copy()
    f0, g0 = grad_log_posterior(data, theta0, config)
    if not np.isfinite(f0) or not np.all(np.isfinite(g0)):
        raise InitializationError("log posterior is not finite at the initial point")

    def neg(theta):
        f, g = grad_log_posterior(data, theta, config)
        if not np.isfinite(f):
            return np.inf, np.zeros_like(theta)
        return -f, -g

    res = minimize(neg, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15, "maxcor": 20})
    theta = res.x
    n_iter = int(res.nit)
    f, g = grad_log_posterior(data, theta, config)
    for _ in range(20):
        if np.linalg.norm(g) < gtol:
            break
        H = hessian_fd(lambda th: grad_log_posterior(data, th, config)[1], theta)
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        while scale > 1e-6:
            cand = theta + scale * step
            fc, gc = grad_log_posterior(data, cand, config)
            if np.isfinite(fc) and fc >= f - 1e-10 * abs(f):
                break
            scale *= 0.5
        else:
            break
        theta, f, g = cand, fc, gc
        n_iter += 1
    gn = float(np.linalg.norm(g))
    converged = gn < gtol
    if not converged:
        warnings.warn(f"MAP stopped with gradient norm {gn:.3g} (target {gtol:g})", RuntimeWarning)
    return MapResult(to_constrained(theta, config.n_features), float(f), theta, gn, n_iter, converged)


def hessian_fd(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Symmetrised central-difference Hessian from an analytic gradient."""
    n = theta.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        H[:, j] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2 * h)
    return 0.5 * (H + H.T)


# -- HMC -----------------------------------------------------------------------

@dataclass
class McmcOptions:
    n_chains: int = 4
    n_warmup: int = 500
    n_samples: int = 500
    target_accept: float = 0.8
    max_leapfrog: int = 1024
    seed: int = 0
    trajectory_length: float = 2.0
    init_scale: float = 2.0  # overdispersion of starting points, in Laplace sds
    map_iterations: int = 200
    n_jobs: int = 1
    mode: str = "hmc"  # reserved: "nuts"
    metric: str = "dense"

    def __post_init__(self):
        if min(self.n_chains, self.n_warmup, self.n_samples, self.max_leapfrog) < 1:
            raise ValueError("chain, warmup, sample and leapfrog counts must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.metric not in ("diag", "dense"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.mode != "hmc":
            raise NotImplementedError(f"sampler mode {self.mode!r} is not available")


@dataclass
class PosteriorSamples:
    names: list[str]
    draws: np.ndarray  # (chains, samples, params), constrained
    rhat: dict[str, float]
    divergences: list[int]
    accept_rate: list[float]
    step_size: list[float]
    seeds: list[int]
    rhat_degenerate: list[str] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    def column(self, name: str) -> np.ndarray:
        return self.flat[:, self.names.index(name)]

    def mean_params(self, n_features: int) -> ModelParams:
        return ModelParams.from_vector(self.flat.mean(axis=0), n_features)

    def iter_params(self, n_features: int, max_draws: Optional[int] = None):
        flat = self.flat
        if max_draws is not None and flat.shape[0] > max_draws:
            idx = np.linspace(0, flat.shape[0] - 1, max_draws).round().astype(int)
            flat = flat[idx]
        for row in flat:
            yield ModelParams.from_vector(row, n_features)

    @property
    def max_rhat(self) -> float:
        return max(self.rhat.values())


class DualAveraging:
    """Step-size adaptation targeting a mean acceptance statistic."""

    def __init__(self, step_size: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * step_size)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.m = 0

    def update(self, accept_stat: float) -> float:
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.h_bar = (1 - w) * self.h_bar + w * (self.target - accept_stat)
        log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        eta = m ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1 - eta) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


class Metric:
    """Euclidean metric: ``cov`` is the inverse mass matrix (vector if diagonal)."""

    def __init__(self, cov: np.ndarray):
        cov = np.asarray(cov, dtype=float)
        self.dense = cov.ndim == 2
        self.cov = cov
        if self.dense:
            self.chol = np.linalg.cholesky(cov)
        else:
            self.sd = np.sqrt(cov)

    @classmethod
    def unit(cls, dim: int) -> "Metric":
        return cls(np.ones(dim))

    def momentum(self, rng) -> np.ndarray:
        z = rng.standard_normal(self.cov.shape[0])
        if self.dense:
            return solve_triangular(self.chol, z, lower=True, trans="T")
        return z / self.sd

    def velocity(self, r: np.ndarray) -> np.ndarray:
        return self.cov @ r if self.dense else self.cov * r

    def kinetic(self, r: np.ndarray) -> float:
        # a blown-up trajectory gives inf or nan here, which the caller counts as a divergence
        with np.errstate(over="ignore", invalid="ignore"):
            return 0.5 * float(r @ self.velocity(r))


def leapfrog(theta, r, grad, step_size, n_steps, metric: Metric, logp_grad):
    """Run ``n_steps`` leapfrog steps; returns the end state (logp may be -inf)."""
    r = r + 0.5 * step_size * grad
    logp = -np.inf
    for i in range(n_steps):
        theta = theta + step_size * metric.velocity(r)
        logp, grad = logp_grad(theta)
        if not np.isfinite(logp) or not np.all(np.isfinite(grad)):
            return theta, r, -np.inf, grad
        if i < n_steps - 1:
            r = r + step_size * grad
    r = r + 0.5 * step_size * grad
    return theta, r, logp, grad


def _hamiltonian(logp, r, metric: Metric):
    return -logp + metric.kinetic(r)


def warmup_windows(n_warmup: int) -> tuple[int, list[int]]:
    """Start of metric adaptation and the iteration counts ending each slow window."""
    if n_warmup < 20:
        return n_warmup, []
    init_buf, term_buf, base = 75, 50, 25
    if init_buf + term_buf + base > n_warmup:
        init_buf = int(0.15 * n_warmup)
        term_buf = int(0.1 * n_warmup)
        base = n_warmup - init_buf - term_buf
    ends = []
    start = init_buf
    size = base
    last = n_warmup - term_buf
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start = end
        size *= 2
    return init_buf, ends


def _initial_step_size(theta, logp, grad, metric: Metric, logp_grad, rng) -> float:
    eps = 0.1
    r = metric.momentum(rng)
    h0 = _hamiltonian(logp, r, metric)

    def log_ratio(step):
        _, r1, lp1, _ = leapfrog(theta, r, grad, step, 1, metric, logp_grad)
        return h0 - _hamiltonian(lp1, r1, metric) if np.isfinite(lp1) else -np.inf

    direction = 1 if log_ratio(eps) > math.log(0.5) else -1
    for _ in range(50):
        eps_new = eps * (2.0 ** direction)
        above = log_ratio(eps_new) > math.log(0.5)
        if (direction == 1 and not above) or (direction == -1 and above):
            return eps_new if direction == -1 else eps
        eps = eps_new
    return eps


def _adapted_metric(window: np.ndarray, dense: bool) -> Metric:
    n, dim = window.shape
    # shrink toward a small multiple of the identity, as Stan does
    w = n / (n + 5.0)
    reg = 1e-3 * (5.0 / (n + 5.0))
    if dense:
        cov = np.cov(window, rowvar=False) if n > 1 else np.eye(dim)
        return Metric(w * cov + reg * np.eye(dim))
    var = window.var(axis=0, ddof=1) if n > 1 else np.ones(dim)
    return Metric(w * var + reg)


def run_chain(logp_grad, theta0: np.ndarray, opts: McmcOptions, seed: int,
              metric: Optional[Metric] = None):
    """One adaptive HMC chain in unconstrained space.

    Returns ``(draws, stats)`` where draws are the post-warmup unconstrained
    states.
    """
    rng = np.random.default_rng(seed)
    dim = theta0.size
    theta = np.asarray(theta0, dtype=float).copy()
    logp, grad = logp_grad(theta)
    if not np.isfinite(logp):
        raise SamplerFailure("chain initialised at a point of zero density")
    metric = metric or Metric.unit(dim)
    dense = opts.metric == "dense"
    eps = _initial_step_size(theta, logp, grad, metric, logp_grad, rng)
    adapt = DualAveraging(eps, opts.target_accept)
    slow_start, ends = warmup_windows(opts.n_warmup)
    windows = set(ends)
    window_draws = []
    n_total = opts.n_warmup + opts.n_samples
    draws = np.empty((opts.n_samples, dim))
    divergences = 0
    accept_sum = 0.0
    warm_accept = []
    n_grad = 0
    for it in range(n_total):
        warm = it < opts.n_warmup
        n_target = max(1, int(math.ceil(opts.trajectory_length / eps)))
        n_target = min(n_target, opts.max_leapfrog)
        n_steps = int(rng.integers(max(1, n_target // 2), n_target + 1))
        n_grad += n_steps
        r0 = metric.momentum(rng)
        h0 = _hamiltonian(logp, r0, metric)
        th1, r1, lp1, g1 = leapfrog(theta, r0, grad, eps, n_steps, metric, logp_grad)
        delta_h = h0 - _hamiltonian(lp1, r1, metric) if np.isfinite(lp1) else -np.inf
        if not delta_h > -1000.0:
            if not warm:
                divergences += 1
            accept = 0.0
        else:
            accept = math.exp(min(delta_h, 0.0))
        if rng.random() < accept:
            theta, logp, grad = th1, lp1, g1
        if it % 100 == 0:
            log.debug("seed %d iter %d eps %.4g steps %d accept %.3f", seed, it, eps, n_steps, accept)
        if warm:
            eps = adapt.update(accept)
            warm_accept.append(accept)
            if it >= slow_start:
                window_draws.append(theta.copy())
            if it + 1 in windows:
                metric = _adapted_metric(np.array(window_draws), dense)
                window_draws = []
                eps = _initial_step_size(theta, logp, grad, metric, logp_grad, rng)
                adapt = DualAveraging(eps, opts.target_accept)
            if it == opts.n_warmup - 1:
                eps = adapt.final
        else:
            draws[it - opts.n_warmup] = theta
            accept_sum += accept
    stats = {
        "divergences": divergences,
        "accept_rate": accept_sum / opts.n_samples,
        "step_size": eps,
        "inv_mass": metric.cov,
        "warmup_accept": float(np.mean(warm_accept)) if warm_accept else float("nan"),
        "n_grad": n_grad,
    }
    return draws, stats


class _Target:
    """Picklable log-density callable for worker processes."""

    def __init__(self, data: FunnelData, config: FunnelConfig):
        self.data = data
        self.config = config

    def __call__(self, theta):
        return grad_log_posterior(self.data, theta, self.config)


def _chain_job(args):
    target, theta0, opts, seed, metric = args
    return run_chain(target, theta0, opts, seed, metric)


def run_chains(logp_grad, inits: list[np.ndarray], opts: McmcOptions, metric: Optional[Metric] = None):
    jobs = [(logp_grad, inits[c], opts, opts.seed + c, metric) for c in range(opts.n_chains)]
    if opts.n_jobs > 1 and opts.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(opts.n_jobs, opts.n_chains)) as ex:
            return list(ex.map(_chain_job, jobs))
    return [_chain_job(j) for j in jobs]


def laplace_covariance(data, config: FunnelConfig, theta: np.ndarray) -> Optional[np.ndarray]:
    """Inverse negative Hessian at ``theta``, or None when it is not positive definite."""
    H = hessian_fd(lambda th: grad_log_posterior(data, th, config)[1], theta)
    try:
        cov = np.linalg.inv(-H)
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None
    return 0.5 * (cov + cov.T)


def fit_mcmc(dataset, config: FunnelConfig, opts: Optional[McmcOptions] = None) -> PosteriorSamples:
    """Multi-chain HMC with step-size and metric adaptation.

    Chains start from overdispersed draws around the MAP estimate, and the
    metric starts from the Laplace covariance there, so early warmup does not
    waste thousands of gradient calls on an isotropic metric.
    """
    opts = opts or McmcOptions()
    data = _as_data(dataset, config)
    d = config.n_features
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        start = fit_map(data, config, max_iter=opts.map_iterations).theta
    target = _Target(data, config)
    cov = laplace_covariance(data, config, start)
    if cov is None:
        log.warning("Laplace covariance at the MAP is not positive definite; using a unit metric")
        cov = np.eye(start.size) * 1e-2
        metric = None
    else:
        metric = Metric(cov if opts.metric == "dense" else np.diag(cov).copy())
    chol = np.linalg.cholesky(cov)
    rng = np.random.default_rng(opts.seed)
    inits = []
    for _ in range(opts.n_chains):
        for _attempt in range(100):
            cand = start + opts.init_scale * chol @ rng.standard_normal(start.size)
            if np.isfinite(target(cand)[0]):
                break
        else:
            cand = start.copy()
        inits.append(cand)
    results = run_chains(target, inits, opts, metric)
    unc = np.stack([r[0] for r in results])
    stats = [r[1] for r in results]
    if all(s["accept_rate"] == 0.0 for s in stats):
        raise SamplerFailure("every chain rejected every proposal", {"stats": stats})
    constrained = np.empty_like(unc)
    for c in range(unc.shape[0]):
        for i in range(unc.shape[1]):
            constrained[c, i] = to_constrained(unc[c, i], d).to_vector()
    names = parameter_names(d, config.n_stages)
    values, flags = rhat(constrained, return_flags=True)
    return PosteriorSamples(
        names=names,
        draws=constrained,
        rhat={n: float(v) for n, v in zip(names, values)},
        divergences=[s["divergences"] for s in stats],
        accept_rate=[float(s["accept_rate"]) for s in stats],
        step_size=[float(s["step_size"]) for s in stats],
        seeds=[opts.seed + c for c in range(opts.n_chains)],
        rhat_degenerate=[n for n, f in zip(names, flags) if f],
    )


# -- diagnostics ---------------------------------------------------------------

def rhat(draws, return_flags: bool = False):
    """Split-chain potential scale reduction factor.

    ``draws`` has shape (chains, n) or (chains, n, params).  Parameters with no
    variance at all get R-hat = 1 and are flagged.
    """
    x = np.asarray(draws, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    m, n = x.shape[:2]
    if m < 2 or n < 4:
        raise ValueError("R-hat needs at least 2 chains of 4 draws")
    half = n // 2
    split_chains = np.concatenate([x[:, :half], x[:, n - half :]], axis=0)
    n2 = half
    chain_means = split_chains.mean(axis=1)
    chain_vars = split_chains.var(axis=1, ddof=1)
    W = chain_vars.mean(axis=0)
    B = n2 * chain_means.var(axis=0, ddof=1)
    var_plus = (n2 - 1) / n2 * W + B / n2
    degenerate = W <= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(var_plus / W)
    out = np.where(degenerate & (B <= 0.0), 1.0, out)
    out = np.where(degenerate & (B > 0.0), np.inf, out)
    flags = degenerate
    if squeeze:
        out, flags = out[0], flags[0]
        out = float(out)
    return (out, flags) if return_flags else out


def posterior_summary(samples, names: Optional[list[str]] = None) -> dict[str, dict[str, float]]:
    """Per-parameter mean and sd plus type-7 quantiles at 2.5/50/97.5%."""
    if isinstance(samples, PosteriorSamples):
        flat, names = samples.flat, samples.names
    else:
        flat = np.asarray(samples, dtype=float)
        if flat.ndim == 1:
            flat = flat[:, None]
        elif flat.ndim == 3:
            flat = flat.reshape(-1, flat.shape[-1])
        names = names or [f"p{j}" for j in range(flat.shape[1])]
    if flat.shape[0] == 0:
        raise ValueError("no draws to summarise")
    q = np.quantile(flat, [0.025, 0.5, 0.975], axis=0)
    sd = flat.std(axis=0, ddof=1) if flat.shape[0] > 1 else np.zeros(flat.shape[1])
    return {
        name: {"mean": float(flat[:, j].mean()), "sd": float(sd[j]), "q2.5": float(q[0, j]),
               "q50": float(q[1, j]), "q97.5": float(q[2, j])}
        for j, name in enumerate(names)
    }


def group_threshold_contrast(samples_a, samples_b, threshold_index: int, seed: int = 0) -> dict:
    """Posterior of ``t_A - t_B`` for a 1-based threshold index.

    Draws from the two independently fitted groups are paired; the shorter
    set is resampled with replacement when lengths differ.
    """
    name = f"t_{threshold_index}"
    a = samples_a.column(name) if isinstance(samples_a, PosteriorSamples) else np.asarray(samples_a, float)
    b = samples_b.column(name) if isinstance(samples_b, PosteriorSamples) else np.asarray(samples_b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both sample sets must be non-empty")
    rng = np.random.default_rng(seed)
    if a.size < b.size:
        a = rng.choice(a, size=b.size, replace=True)
    elif b.size < a.size:
        b = rng.choice(b, size=a.size, replace=True)
    diff = a - b
    lo, mid, hi = np.quantile(diff, [0.025, 0.5, 0.975])
    return {"mean": float(diff.mean()), "median": float(mid), "q2.5": float(lo), "q97.5": float(hi), "draws": diff}
