"""Geometry of the Stiefel manifold and its product with a Euclidean factor.

Points are M x r matrices with orthonormal columns.  A tangent vector at
B splits as U = B A + C with A skew-symmetric and B^T C = 0; the skew
block and the normal block are stored separately so the structural
constraints hold exactly.  Geodesics, inner products and gradients use
the canonical metric; the product space appends an r-dimensional
Euclidean factor for log-eigenvalue coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

_ORTH_TOL = 1e-10
_REPAIR_TOL = 1e-6


class BaseMismatchError(ValueError):
    """Raised when two tangents do not share a base point."""


def _polar_orthonormalize(B: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(B, full_matrices=False)
    return u @ vt


@dataclass(frozen=True)
class StiefelPoint:
    """Matrix with orthonormal columns; mild drift is repaired, large drift rejected."""

    B: np.ndarray = field(repr=False)

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] < B.shape[1] or B.shape[1] < 1:
            raise ValueError(f"expected a tall M x r matrix, got shape {B.shape}")
        drift = np.linalg.norm(B.T @ B - np.eye(B.shape[1]))
        if drift > _REPAIR_TOL:
            raise ValueError(
                f"columns are not orthonormal (defect {drift:.3e} exceeds {_REPAIR_TOL:.0e})"
            )
        if drift > _ORTH_TOL:
            B = _polar_orthonormalize(B)
        object.__setattr__(self, "B", B)

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape

    def same_base(self, other: "StiefelPoint") -> bool:
        return self.B.shape == other.B.shape and np.array_equal(self.B, other.B)


def _exact_skew(A: np.ndarray) -> np.ndarray:
    # keep only the strictly-lower triangle so A + A^T = 0 holds exactly
    L = np.tril(A, -1)
    return L - L.T


@dataclass(frozen=True)
class TangentVector:
    """Tangent U = B A + C at a Stiefel point, with A skew and B^T C = 0."""

    base: StiefelPoint
    A: np.ndarray = field(repr=False)
    C: np.ndarray = field(repr=False)

    def __post_init__(self):
        B = self.base.B
        M, r = B.shape
        A = np.asarray(self.A, dtype=float)
        C = np.asarray(self.C, dtype=float)
        if A.shape != (r, r):
            raise ValueError(f"skew block must be {r} x {r}, got {A.shape}")
        if C.shape != (M, r):
            raise ValueError(f"normal block must be {M} x {r}, got {C.shape}")
        if np.abs(A + A.T).max() > 1e-8:
            raise ValueError("skew block is not skew-symmetric")
        object.__setattr__(self, "A", _exact_skew(A))
        object.__setattr__(self, "C", C - B @ (B.T @ C))

    def full(self) -> np.ndarray:
        """The tangent as a plain M x r matrix."""
        return self.base.B @ self.A + self.C

    def norm(self) -> float:
        return float(np.sqrt(canonical_inner(self, self)))

    def scaled(self, c: float) -> "TangentVector":
        return TangentVector(self.base, c * self.A, c * self.C)


def split_tangent(point: StiefelPoint, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split an already-tangent matrix U into its skew and normal blocks."""
    B = point.B
    A = B.T @ np.asarray(U, dtype=float)
    sym = 0.5 * np.abs(A + A.T).max()
    if sym > 1e-8:
        raise ValueError(f"matrix is not tangent at the base point (defect {sym:.3e})")
    A = _exact_skew(A)
    C = U - B @ (B.T @ U)
    return A, C


def tangent_project(point: StiefelPoint, Z: np.ndarray) -> TangentVector:
    """Orthogonal projection of an arbitrary M x r matrix onto the tangent space."""
    B = point.B
    Z = np.asarray(Z, dtype=float)
    BtZ = B.T @ Z
    A = 0.5 * (BtZ - BtZ.T)
    C = Z - B @ BtZ
    return TangentVector(point, A, C)


def skew_exp(S: np.ndarray) -> np.ndarray:
    """Matrix exponential of a skew-symmetric matrix; the result is orthogonal."""
    S = np.asarray(S, dtype=float)
    if np.abs(S + S.T).max() > 1e-12:
        raise ValueError("input is not skew-symmetric")
    E = scipy.linalg.expm(S)
    # orthogonality of the exact result gives a cheap accuracy check
    drift = np.linalg.norm(E.T @ E - np.eye(S.shape[0]))
    if drift > 1e-10:
        raise ArithmeticError(f"matrix exponential lost orthogonality ({drift:.3e})")
    return E


def exp_map(tangent: TangentVector, t: float = 1.0) -> StiefelPoint:
    """Geodesic of the canonical metric from the base point with velocity `tangent`.

    Uses the compact 2r x 2r form: with C = QR (column-pivoted QR, so a
    vanishing normal block stays exactly zero), the geodesic is
    B M(t) + Q N(t) where [M; N] solves the skew block exponential.
    """
    B = tangent.base.B
    M, r = B.shape
    A, C = tangent.A, tangent.C
    if t == 0.0 or (not A.any() and not C.any()):
        return tangent.base
    Q, R, piv = scipy.linalg.qr(C, mode="economic", pivoting=True)
    inv = np.empty_like(piv)
    inv[piv] = np.arange(r)
    R = R[:, inv]
    S = np.zeros((2 * r, 2 * r))
    S[:r, :r] = A
    S[:r, r:] = -R.T
    S[r:, :r] = R
    W = skew_exp(t * S)
    MN = W[:, :r]
    return StiefelPoint(B @ MN[:r] + Q @ MN[r:])


def canonical_inner(X: TangentVector, Y: TangentVector) -> float:
    """Canonical-metric inner product of two tangents at the same base point."""
    if not X.base.same_base(Y.base):
        raise BaseMismatchError("tangents live at different base points")
    return float(0.5 * np.sum(X.A * Y.A) + np.sum(X.C * Y.C))


def intrinsic_grad(point: StiefelPoint, F: np.ndarray) -> TangentVector:
    """Canonical-metric gradient from a Euclidean gradient F: F - B F^T B."""
    B = point.B
    F = np.asarray(F, dtype=float)
    G = F - B @ (F.T @ B)
    A, C = split_tangent(point, G)
    return TangentVector(point, A, C)


@dataclass(frozen=True)
class ProductPoint:
    """Point on (Stiefel) x R^r: a frame and log-eigenvalue coordinates."""

    point: StiefelPoint
    zeta: np.ndarray = field(repr=False)

    def __post_init__(self):
        z = np.asarray(self.zeta, dtype=float)
        if z.shape != (self.point.shape[1],):
            raise ValueError("zeta length must match the frame rank")
        object.__setattr__(self, "zeta", z)

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.zeta)


@dataclass(frozen=True)
class ProductTangent:
    """Tangent on the product space: a Stiefel tangent plus a zeta velocity."""

    U: TangentVector
    dzeta: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.asarray(self.dzeta, dtype=float)
        if d.shape != (self.U.base.shape[1],):
            raise ValueError("dzeta length must match the frame rank")
        object.__setattr__(self, "dzeta", d)

    def scaled(self, c: float) -> "ProductTangent":
        return ProductTangent(self.U.scaled(c), c * self.dzeta)


def product_inner(X: ProductTangent, Y: ProductTangent) -> float:
    """Product-metric inner product: canonical on the frame, Euclidean on zeta."""
    return canonical_inner(X.U, Y.U) + float(np.dot(X.dzeta, Y.dzeta))


def product_exp(theta: ProductPoint, d: ProductTangent, t: float = 1.0) -> ProductPoint:
    """Geodesic step on the product space."""
    return ProductPoint(exp_map(d.U, t), theta.zeta + t * d.dzeta)
