"""Gradients, Hessians and score quantities of the covariance losses.

The matrix-regime loss  tr(Gamma^-1 S) + log det Gamma  admits closed
forms on the normalized scale sigma2 = s = 1, where the population
covariance is I + B diag(lam) B^T.  General scales reduce to that case
through (S, lam) -> (S / sigma2, lam * s / sigma2), which leaves the
frame gradient and the log-eigenvalue gradient unchanged.

The functional-regime gradient averages per-curve Woodbury terms; the
frame part is returned already projected to the tangent space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CurveBatches, Dataset, ModelParams, curve_batches
from .bspline import OrthoBasis
from .stiefel import (
    ProductPoint,
    StiefelPoint,
    TangentVector,
    intrinsic_grad,
    split_tangent,
)

GAP_TOL = 1e-8


class NearDegenerateError(ValueError):
    """Eigenvalue gaps too small for the inverse-Hessian formulas."""


def rescaled(theta: ProductPoint, Stilde: np.ndarray, sigma2: float, s: float):
    """Map a general-scale problem to the normalized sigma2 = s = 1 scale."""
    shift = np.log(s) - np.log(sigma2)
    return ProductPoint(theta.point, theta.zeta + shift), Stilde / sigma2


def grad_B(theta: ProductPoint, Stilde: np.ndarray) -> TangentVector:
    """Canonical-metric gradient of the normalized loss with respect to the frame.

    The closed form is already tangent (it equals F - B F^T B for the
    Euclidean derivative F = -2 S B Q^{-1}), so it is split rather than
    re-projected.
    """
    B = theta.point.B
    lam = theta.lam
    q = lam / (1.0 + lam)
    SB = Stilde @ B
    G = 2.0 * (B @ (q[:, None] * (B.T @ SB)) - SB * q)
    A, C = split_tangent(theta.point, G)
    return TangentVector(theta.point, A, C)


def grad_zeta(theta: ProductPoint, Stilde: np.ndarray) -> np.ndarray:
    """Gradient of the normalized loss in log-eigenvalue coordinates."""
    B = theta.point.B
    lam = theta.lam
    quad = np.einsum("mk,mn,nk->k", B, Stilde, B)
    return lam / (1.0 + lam) ** 2 * (1.0 + lam - quad)


def grad_B_scaled(theta, Stilde, sigma2: float, s: float) -> TangentVector:
    return grad_B(*rescaled(theta, Stilde, sigma2, s))


def grad_zeta_scaled(theta, Stilde, sigma2: float, s: float) -> np.ndarray:
    return grad_zeta(*rescaled(theta, Stilde, sigma2, s))


def _euclidean_pieces(theta: ProductPoint, Stilde: np.ndarray):
    B = theta.point.B
    q = theta.lam / (1.0 + theta.lam)
    F1 = -2.0 * (Stilde @ B) * q
    return B, q, F1


def hessian_B_bilinear(
    theta: ProductPoint, Stilde: np.ndarray, X: TangentVector, Y: TangentVector
) -> float:
    """Second derivative of the normalized loss along frame geodesics.

    Equals d^2/dt^2 of the loss along the canonical geodesic with
    velocity X (polarized in X, Y).
    """
    B, q, F1 = _euclidean_pieces(theta, Stilde)
    Xf, Yf = X.full(), Y.full()
    G1X = -2.0 * (Stilde @ Xf) * q
    t1 = np.sum(Yf * G1X)
    FtX = F1.T @ Xf
    BtX = B.T @ Xf
    BtY = B.T @ Yf
    t2 = 0.5 * (np.sum(FtX * BtY.T) + np.sum(BtX * (F1.T @ Yf).T))
    BtF = B.T @ F1
    sym = BtF + BtF.T
    YN = Yf - B @ BtY
    t3 = -0.5 * np.sum((Xf.T @ YN) * sym.T)
    return float(t1 + t2 + t3)


def hessian_zeta(theta: ProductPoint, Stilde: np.ndarray) -> np.ndarray:
    """Diagonal of the normalized loss Hessian in log-eigenvalue coordinates."""
    B = theta.point.B
    lam = theta.lam
    quad = np.einsum("mk,mn,nk->k", B, Stilde, B)
    return lam / (1.0 + lam) ** 3 * ((lam - 1.0) * quad + (1.0 + lam))


def dgrad_B_dzeta(theta: ProductPoint, Stilde: np.ndarray, k: int) -> TangentVector:
    """Mixed partial: derivative of the frame gradient along zeta_k.

    At a stationary point this is the (B, zeta) cross block of the
    Hessian, which vanishes at the population optimum.
    """
    B = theta.point.B
    lam = theta.lam
    dq = np.zeros_like(lam)
    dq[k] = lam[k] / (1.0 + lam[k]) ** 2
    SB = Stilde @ B
    G = 2.0 * (B @ (dq[:, None] * (B.T @ SB)) - SB * dq)
    A, C = split_tangent(theta.point, G)
    return TangentVector(theta.point, A, C)


def _check_gaps(lam: np.ndarray) -> None:
    if lam.size > 1:
        diffs = np.abs(lam[:, None] - lam[None, :])
        off = diffs[~np.eye(lam.size, dtype=bool)]
        if off.min() <= GAP_TOL:
            raise NearDegenerateError(
                f"eigenvalue gap {off.min():.3e} is below {GAP_TOL:.0e}"
            )
    if lam.min() <= GAP_TOL:
        raise NearDegenerateError("eigenvalues too close to zero for the inverse Hessian")


def hessian_star_B_bilinear(
    theta_star: ProductPoint, X: TangentVector, Y: TangentVector
) -> float:
    """Closed form of the frame Hessian at the population optimum."""
    lam = theta_star.lam
    gap2 = (lam[:, None] - lam[None, :]) ** 2
    denom = (1.0 + lam[:, None]) * (1.0 + lam[None, :])
    a_term = np.sum(X.A * Y.A * gap2 / denom)
    w = lam**2 / (1.0 + lam)
    c_term = 2.0 * np.sum((X.C * w) * Y.C)
    return float(a_term + c_term)


def inv_hessian_star_B(theta_star: ProductPoint, X: TangentVector) -> TangentVector:
    """Apply the inverse of the frame Hessian at the population optimum."""
    lam = theta_star.lam
    _check_gaps(lam)
    r = lam.size
    A_out = np.zeros((r, r))
    if r > 1:
        gap2 = (lam[:, None] - lam[None, :]) ** 2
        denom = (1.0 + lam[:, None]) * (1.0 + lam[None, :])
        off = ~np.eye(r, dtype=bool)
        A_out[off] = 0.5 * X.A[off] * denom[off] / gap2[off]
    C_out = 0.5 * X.C * ((1.0 + lam) / lam**2)
    return TangentVector(theta_star.point, A_out, C_out)


def score_delta(
    theta_star: ProductPoint, Stilde: np.ndarray
) -> tuple[TangentVector, np.ndarray]:
    """First-order expansion of the estimator around the population optimum.

    Returns the tangent approximating (B_hat - B_star) and the vector
    approximating (lam_hat - lam_star), built from the explicit
    eigenvalue-resolvent form.  Requires the normalized scale.
    """
    B = theta_star.point.B
    lam = theta_star.lam
    _check_gaps(lam)
    r = lam.size
    SB = Stilde @ B
    BtSB = B.T @ SB
    # skew block: entries (i, j) = -(lam_i - lam_j)^{-1} B_i^T S B_j for i != j
    A = np.zeros((r, r))
    if r > 1:
        gaps = lam[:, None] - lam[None, :]
        off = ~np.eye(r, dtype=bool)
        A[off] = -BtSB[off] / gaps[off]
    # normal block: + lam_j^{-1} (I - B B^T) S B_j
    C = (SB - B @ BtSB) / lam
    delta_B = TangentVector(theta_star.point, 0.5 * (A - A.T), C)
    delta_lam = np.diag(BtSB) - (1.0 + lam)
    return delta_B, delta_lam


@dataclass(frozen=True)
class GradPair:
    """Gradient of a loss on the product space: frame part plus zeta part."""

    B: TangentVector
    zeta: np.ndarray


def grad_functional(
    params: ModelParams,
    data: Dataset,
    basis: OrthoBasis,
    batches: CurveBatches | None = None,
) -> GradPair:
    """Gradient of the functional-regime loss at the given parameters.

    The Euclidean frame derivative is averaged over curves and then
    projected to the tangent space; the zeta part is its exact diagonal
    counterpart.  No m x m matrix is ever formed.
    """
    if batches is None:
        batches = curve_batches(data, basis)
    return grad_functional_raw(params.B, params.lam, params.sigma2, params.s, batches)


def grad_functional_raw(
    point: StiefelPoint, lam: np.ndarray, sigma2: float, s: float, batches: CurveBatches
) -> GradPair:
    B = point.B
    lam_eff = s * lam
    M, r = B.shape
    n = batches.n
    F_acc = np.zeros((M, r))
    z_acc = np.zeros(r)
    for idx, Phi, y in batches.groups:
        X = Phi @ B
        XtX = np.einsum("gmi,gmj->gij", X, X)
        G = XtX.copy()
        G[:, np.arange(r), np.arange(r)] += sigma2 / lam_eff
        Xty = np.einsum("gmi,gm->gi", X, y)
        u = np.linalg.solve(G, Xty[:, :, None])[:, :, 0]
        # Sigma^{-1} X and Sigma^{-1} y through the rank-r downdate
        SiX = (X - np.einsum("gmi,gij->gmj", X, np.linalg.solve(G, XtX))) / sigma2
        Siy = (y - np.einsum("gmi,gi->gm", X, u)) / sigma2
        WX = SiX - Siy[:, :, None] * np.einsum("gm,gmi->gi", Siy, X)[:, None, :]
        F_acc += np.einsum("gmM,gmr->Mr", Phi, WX)
        z_acc += np.einsum("gmk,gmk->k", X, WX)
    F = F_acc * lam_eff / n
    gz = z_acc * lam_eff / (2.0 * n)
    return GradPair(B=intrinsic_grad(point, F), zeta=gz)


def product_grad(
    params: ModelParams,
    data: Dataset,
    basis: OrthoBasis | None = None,
    batches: CurveBatches | None = None,
) -> GradPair:
    """Loss gradient for either regime, in (frame, zeta) coordinates."""
    if data.regime == "matrix":
        theta = ProductPoint(params.B, np.log(params.lam))
        gB = grad_B_scaled(theta, data.cov, params.sigma2, params.s)
        gz = grad_zeta_scaled(theta, data.cov, params.sigma2, params.s)
        return GradPair(B=gB, zeta=gz)
    if basis is None:
        raise ValueError("functional regimes need a basis")
    return grad_functional(params, data, basis, batches=batches)
