"""Geodesic descent for the covariance losses on (Stiefel) x R^r.

Search directions are the gradient preconditioned by the inverse of the
closed-form population Hessian (a positive definite operator, so the
direction is always a descent direction), falling back to the plain
negative canonical gradient near eigenvalue ties.  Steps follow exact
geodesics with Armijo backtracking, which keeps the loss trace
nonincreasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import calculus, model
from .bspline import OrthoBasis
from .model import CurveBatches, Dataset, ModelParams, canonicalize, curve_batches
from .stiefel import (
    ProductPoint,
    ProductTangent,
    StiefelPoint,
    TangentVector,
    product_exp,
    product_inner,
)

_EIG_FLOOR = 1e-6


@dataclass(frozen=True)
class FitConfig:
    """Knobs of the geodesic descent loop.

    grad_tol of None resolves per regime: 1e-8 for matrix data, 1e-6 for
    curve data (whose loss is a long float sum, so its gradient cannot be
    certified much below the rounding noise of that sum).  The descent
    also stops once loss_patience consecutive accepted steps each improve
    the loss by less than loss_tol relative; that exhaustion of measurable
    decrease counts as convergence.
    """

    max_iter: int = 500
    grad_tol: float | None = None
    step_shrink: float = 0.5
    # strict enough to reject the tiny decreases of a cycling overshoot,
    # loose enough to accept exact Newton steps (which achieve slope / 2)
    armijo_c: float = 0.1
    max_halvings: int = 60
    loss_tol: float = 1e-13
    loss_patience: int = 3
    init: str = "pooled-pca"  # pooled-pca | given | random
    init_params: ModelParams | None = None
    restarts: int = 3
    seed: int = 0
    fisher: bool = True
    init_ridge: float = 1e-8


def resolve_grad_tol(config: FitConfig, regime: str) -> float:
    if config.grad_tol is not None:
        return config.grad_tol
    return 1e-8 if regime == "matrix" else 1e-6


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    converged: bool
    n_iter: int
    grad_norm: float
    loss: float
    trace: np.ndarray = field(repr=False)
    stop_reason: str = ""  # grad-tol | loss-tol | line-search | max-iter
    restart_index: int = 0

    @property
    def stalled(self) -> bool:
        return self.stop_reason == "line-search"


def _strictly_decreasing(lam: np.ndarray) -> np.ndarray:
    out = lam.copy()
    for k in range(1, out.size):
        cap = out[k - 1] * (1.0 - 1e-9)
        if out[k] >= cap:
            out[k] = cap
    return out


def _pooled_pca_matrix(S: np.ndarray, r: int, sigma2: float, s: float):
    evals, evecs = np.linalg.eigh(S)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if evals[r - 1] <= max(evals[0], 1.0) * 1e-12:
        raise ValueError(f"sample covariance has numerical rank below r={r}")
    lam0 = np.maximum((evals[:r] - sigma2) / s, _EIG_FLOOR)
    B0, lam0 = canonicalize(evecs[:, :r], lam0)
    return StiefelPoint(B0), _strictly_decreasing(lam0)


def _pooled_fit_functional(batches: CurveBatches, M: int, r: int, ridge: float):
    """Least-squares fit of off-diagonal raw products onto the tensor basis.

    Off-diagonal products y_ij y_ij' are unbiased for the signal kernel
    at (t_ij, t_ij'), so no noise-variance correction is needed.  The
    normal equations over the M x M coefficient matrix use the pair-sum
    factorization; a small ridge keeps them solvable for tiny samples.
    """
    AtA = np.zeros((M * M, M * M))
    Atb = np.zeros(M * M)
    for _, Phi, y in batches.groups:
        for g in range(Phi.shape[0]):
            P = Phi[g].T @ Phi[g]
            v = Phi[g].T @ y[g]
            AtA += np.kron(P, P)
            Atb += np.kron(v, v)
            for j in range(Phi.shape[1]):
                pj = Phi[g, j]
                outer = np.kron(pj, pj)
                AtA -= np.outer(outer, outer)
                Atb -= y[g, j] ** 2 * outer
    scale = max(np.trace(AtA) / (M * M), 1.0)
    AtA[np.diag_indices_from(AtA)] += ridge * scale
    C = np.linalg.solve(AtA, Atb).reshape(M, M)
    C = 0.5 * (C + C.T)
    evals, evecs = np.linalg.eigh(C)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    lam0 = np.maximum(evals[:r], _EIG_FLOOR)
    B0, lam0 = canonicalize(evecs[:, :r], lam0)
    return StiefelPoint(B0), _strictly_decreasing(lam0)


def _random_start(M: int, r: int, rng: np.random.Generator):
    Z = rng.standard_normal((M, r))
    Q, _ = np.linalg.qr(Z)
    lam0 = np.sort(np.exp(rng.normal(0.0, 0.5, r)))[::-1]
    B0, lam0 = canonicalize(Q, lam0)
    return StiefelPoint(B0), _strictly_decreasing(lam0)


def init_params(
    data: Dataset,
    basis: OrthoBasis | None,
    r: int,
    sigma2: float,
    s: float = 1.0,
    config: FitConfig | None = None,
    batches: CurveBatches | None = None,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Starting point for the descent (pooled PCA, supplied, or random)."""
    config = config or FitConfig()
    if config.init == "given":
        if config.init_params is None:
            raise ValueError("init='given' requires init_params")
        return config.init_params
    if config.init == "random":
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
        M = data.cov.shape[0] if data.regime == "matrix" else basis.M
        B0, lam0 = _random_start(M, r, rng)
    elif config.init == "pooled-pca":
        if data.regime == "matrix":
            B0, lam0 = _pooled_pca_matrix(data.cov, r, sigma2, s)
        else:
            if basis is None:
                raise ValueError("functional regimes need a basis")
            if batches is None:
                batches = curve_batches(data, basis)
            B0, lam0 = _pooled_fit_functional(batches, basis.M, r, config.init_ridge)
    else:
        raise ValueError(f"unknown init scheme {config.init!r}")
    M = B0.shape[0]
    return ModelParams(M=M, r=r, B=B0, lam=lam0, sigma2=sigma2, s=s)


def _loss(theta: ProductPoint, sigma2, s, data, batches):
    if data.regime == "matrix":
        return model.matrix_loss(theta.point.B, theta.lam, sigma2, s, data.cov)
    return model.functional_loss(theta.point.B, theta.lam, sigma2, s, batches)


def _grad(theta: ProductPoint, sigma2, s, data, batches) -> calculus.GradPair:
    if data.regime == "matrix":
        return calculus.GradPair(
            B=calculus.grad_B_scaled(theta, data.cov, sigma2, s),
            zeta=calculus.grad_zeta_scaled(theta, data.cov, sigma2, s),
        )
    return calculus.grad_functional_raw(theta.point, theta.lam, sigma2, s, batches)


def _direction(theta, grad, sigma2, s, config) -> ProductTangent:
    """Search direction: preconditioned by the closed-form population
    Hessian inverse when enabled (positive definite, hence always a
    descent direction), plain negative gradient otherwise."""
    neg = ProductTangent(grad.B.scaled(-1.0), -grad.zeta)
    if not config.fisher:
        return neg
    theta_n = ProductPoint(theta.point, theta.zeta + np.log(s) - np.log(sigma2))
    try:
        dB = calculus.inv_hessian_star_B(theta_n, grad.B).scaled(-1.0)
    except calculus.NearDegenerateError:
        return neg
    lam_n = theta_n.lam
    precond = np.minimum(((1.0 + lam_n) / lam_n) ** 2, 1e4)
    return ProductTangent(dB, -precond * grad.zeta)


@dataclass
class StepInfo:
    loss: float
    grad_norm: float
    step_size: float
    halvings: int
    stalled: bool


def step(
    theta: ProductPoint,
    sigma2: float,
    s: float,
    data: Dataset,
    batches: CurveBatches | None,
    config: FitConfig,
    t0: float = 1.0,
    grad_tol: float | None = None,
    loss0: float | None = None,
) -> tuple[ProductPoint, StepInfo]:
    """One Armijo-backtracked geodesic step.  Never increases the loss."""
    if grad_tol is None:
        grad_tol = resolve_grad_tol(config, data.regime)
    if loss0 is None:
        loss0 = _loss(theta, sigma2, s, data, batches)
    grad = _grad(theta, sigma2, s, data, batches)
    gvec = ProductTangent(grad.B, grad.zeta)
    gnorm = float(np.sqrt(product_inner(gvec, gvec)))
    if gnorm < grad_tol:
        return theta, StepInfo(loss0, gnorm, 0.0, 0, False)
    d = _direction(theta, grad, sigma2, s, config)
    slope = product_inner(gvec, d)
    if slope >= 0.0:  # fall back if preconditioning failed to give descent
        d = ProductTangent(grad.B.scaled(-1.0), -grad.zeta)
        slope = -gnorm**2
    t = t0
    for h in range(config.max_halvings + 1):
        cand = product_exp(theta, d, t)
        loss_t = _loss(cand, sigma2, s, data, batches)
        if loss_t <= loss0 + config.armijo_c * t * slope:
            return cand, StepInfo(loss_t, gnorm, t, h, False)
        t *= config.step_shrink
    return theta, StepInfo(loss0, gnorm, 0.0, config.max_halvings, True)


def _run_descent(theta, sigma2, s, data, batches, config, grad_tol):
    trace = [_loss(theta, sigma2, s, data, batches)]
    t_prev = 1.0
    iters = 0
    tiny = 0
    reason = "max-iter"
    while iters < config.max_iter:
        t0 = min(max(4.0 * t_prev, 1e-2), 1.0)
        theta_new, info = step(
            theta, sigma2, s, data, batches, config,
            t0=t0, grad_tol=grad_tol, loss0=trace[-1],
        )
        if info.stalled:
            reason = "line-search"
            break
        if info.step_size == 0.0:
            reason = "grad-tol"
            break
        iters += 1
        decrease = trace[-1] - info.loss
        theta = theta_new
        trace.append(info.loss)
        t_prev = info.step_size
        tiny = tiny + 1 if decrease <= config.loss_tol * (1.0 + abs(info.loss)) else 0
        if tiny >= config.loss_patience:
            reason = "loss-tol"
            break
    return theta, np.asarray(trace), reason, iters


def fit(
    data: Dataset,
    basis: OrthoBasis | None,
    r: int,
    sigma2: float,
    s: float = 1.0,
    config: FitConfig | None = None,
) -> FitResult:
    """Minimize the loss; returns canonicalized parameters and the loss trace.

    The first restart starts from the configured initializer; further
    restarts (config.restarts - 1 of them) start from random frames.
    The restart with the lowest final loss wins, earliest index on ties.
    """
    config = config or FitConfig()
    grad_tol = resolve_grad_tol(config, data.regime)
    batches = None
    if data.regime != "matrix":
        if basis is None:
            raise ValueError("functional regimes need a basis")
        batches = curve_batches(data, basis)
    dim = basis.M if basis is not None else data.cov.shape[0]
    if r < 1 or r > dim:
        raise ValueError(f"rank must be in [1, {dim}], got {r}")

    best = None
    for ridx in range(max(1, config.restarts)):
        cfg0 = config if ridx == 0 else replace(config, init="random")
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, ridx]))
        start = init_params(data, basis, r, sigma2, s, config=cfg0, batches=batches, rng=rng)
        theta0 = ProductPoint(start.B, np.log(start.lam))
        theta, trace, reason, it = _run_descent(theta0, sigma2, s, data, batches, config, grad_tol)
        grad = _grad(theta, sigma2, s, data, batches)
        gvec = ProductTangent(grad.B, grad.zeta)
        gnorm = float(np.sqrt(product_inner(gvec, gvec)))
        cand = (trace[-1], ridx, theta, gnorm, reason, it, trace)
        if best is None or cand[0] < best[0] - 1e-12:
            best = cand
    loss, ridx, theta, gnorm, reason, it, trace = best
    Bc, lamc = canonicalize(theta.point.B, theta.lam)
    params = ModelParams(M=Bc.shape[0], r=r, B=StiefelPoint(Bc), lam=lamc, sigma2=sigma2, s=s)
    return FitResult(
        params=params,
        converged=bool(gnorm < grad_tol or reason == "loss-tol"),
        n_iter=it,
        grad_norm=gnorm,
        loss=float(loss),
        trace=trace,
        stop_reason=reason,
        restart_index=ridx,
    )
