"""Rank-r covariance models and their observed-data likelihoods.

Two observation regimes share one parameterization (frame B with
orthonormal columns, eigenvalue vector lam, noise variance sigma2,
signal scale s):

* functional: curve i observed at m_i design points gives an m_i x m_i
  marginal covariance  s * Phi_i^T B diag(lam) B^T Phi_i + sigma2 I;
* matrix: a single M x M sample covariance with population value
  s * B diag(lam) B^T + sigma2 I.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bspline import OrthoBasis, eval_basis, project_function
from .stiefel import StiefelPoint

REGIMES = ("sparse", "dense", "matrix")


class DegenerateSpectrumError(ValueError):
    """Eigenvalue ties or vanishing gaps where distinct values are required."""


def canonicalize(B: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort columns by decreasing eigenvalue and fix signs.

    Each column is flipped so its largest-magnitude entry is positive
    (first such entry on ties), making reported frames comparable across
    runs and with plain eigendecompositions.
    """
    lam = np.asarray(lam, dtype=float)
    order = np.argsort(-lam, kind="stable")
    B2 = np.array(B[:, order], dtype=float)
    for k in range(B2.shape[1]):
        j = int(np.argmax(np.abs(B2[:, k])))
        if B2[j, k] < 0:
            B2[:, k] = -B2[:, k]
    return B2, lam[order]


@dataclass(frozen=True)
class ModelParams:
    """Full parameter vector of the rank-r covariance model."""

    M: int
    r: int
    B: StiefelPoint
    lam: np.ndarray = field(repr=False)
    sigma2: float
    s: float = 1.0

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if self.B.shape != (self.M, self.r):
            raise ValueError(f"frame shape {self.B.shape} does not match (M, r)=({self.M}, {self.r})")
        if lam.shape != (self.r,):
            raise ValueError("lam must have length r")
        if not (lam > 0).all():
            raise ValueError("eigenvalues must be strictly positive")
        if self.r > 1 and not (np.diff(lam) < 0).all():
            raise DegenerateSpectrumError("eigenvalues must be strictly decreasing")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not self.s > 0:
            raise ValueError("s must be positive")
        object.__setattr__(self, "lam", lam)

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "r": self.r,
            "sigma2": float(self.sigma2),
            "s": float(self.s),
            "lambda": [float(v) for v in self.lam],
            "B": [[float(v) for v in row] for row in self.B.B],
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelParams":
        B = np.asarray(d["B"], dtype=float)
        return ModelParams(
            M=int(d["M"]),
            r=int(d["r"]),
            B=StiefelPoint(B),
            lam=np.asarray(d["lambda"], dtype=float),
            sigma2=float(d["sigma2"]),
            s=float(d.get("s", 1.0)),
        )


@dataclass(frozen=True)
class CurveData:
    """One sparsely observed curve: design points and noisy values."""

    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != y.shape:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if t.size < 1:
            raise ValueError("a curve needs at least one observation")
        if t.min() < 0.0 or t.max() > 1.0:
            raise ValueError("design points must lie in [0, 1]")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)

    @property
    def m(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class Dataset:
    """Observed data for one fit: a curve collection or a sample covariance."""

    regime: str
    curves: tuple[CurveData, ...] | None = None
    cov: np.ndarray | None = field(default=None, repr=False)
    n_samples: int | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.regime == "matrix":
            if self.cov is None or self.n_samples is None:
                raise ValueError("matrix regime needs a sample covariance and a sample count")
            if int(self.n_samples) < 1:
                raise ValueError("sample count must be positive")
            S = np.asarray(self.cov, dtype=float)
            if S.ndim != 2 or S.shape[0] != S.shape[1]:
                raise ValueError("sample covariance must be square")
            if not np.array_equal(S, S.T):
                S = 0.5 * (S + S.T)
            if np.linalg.eigvalsh(S).min() < -1e-10:
                raise ValueError("sample covariance is not positive semidefinite")
            object.__setattr__(self, "cov", S)
        else:
            if not self.curves:
                raise ValueError("functional regimes need at least one curve")
            object.__setattr__(self, "curves", tuple(self.curves))

    @property
    def n(self) -> int:
        if self.regime == "matrix":
            return int(self.n_samples)
        return len(self.curves)

    @staticmethod
    def functional(regime: str, curves: Sequence[CurveData]) -> "Dataset":
        return Dataset(regime=regime, curves=tuple(curves))

    @staticmethod
    def matrix(cov: np.ndarray, n_samples: int) -> "Dataset":
        return Dataset(regime="matrix", cov=cov, n_samples=n_samples)


@dataclass(frozen=True)
class CurveBatches:
    """Curves grouped by observation count for vectorized likelihood work.

    Each group holds (original indices, Phi, y) with Phi of shape
    (n_g, m, M); rows of Phi are basis evaluations at the design points.
    Per-curve quantities are always scattered back to the original curve
    order before reduction, so results do not depend on the grouping.
    """

    n: int
    groups: tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]


def curve_batches(data: Dataset, basis: OrthoBasis) -> CurveBatches:
    if data.regime == "matrix":
        raise ValueError("curve batches are only defined for functional regimes")
    sizes = {}
    for i, c in enumerate(data.curves):
        sizes.setdefault(c.m, []).append(i)
    groups = []
    for m in sorted(sizes):
        idx = np.asarray(sizes[m], dtype=int)
        t_flat = np.concatenate([data.curves[i].times for i in idx])
        Phi = eval_basis(basis, t_flat).reshape(idx.size, m, basis.M)
        y = np.stack([data.curves[i].values for i in idx])
        groups.append((idx, Phi, y))
    return CurveBatches(n=len(data.curves), groups=tuple(groups))


def marginal_cov(params: ModelParams, Phi: np.ndarray) -> np.ndarray:
    """Marginal covariance of one curve given its M x m design matrix."""
    X = Phi.T @ params.B.B
    S = params.s * (X * params.lam) @ X.T
    S[np.diag_indices_from(S)] += params.sigma2
    return S


def functional_terms(
    B: np.ndarray, lam: np.ndarray, sigma2: float, s: float, batches: CurveBatches
) -> np.ndarray:
    """Per-curve contributions to the functional negative log likelihood.

    Uses the rank-r downdate of each marginal covariance, so no m x m
    factorization is formed.  Summing the returned array (fixed curve
    order, pairwise summation) and dividing by n gives the loss.
    """
    r = B.shape[1]
    lam_eff = s * lam
    terms = np.zeros(batches.n)
    for idx, Phi, y in batches.groups:
        m = Phi.shape[1]
        X = Phi @ B
        G = np.einsum("gmi,gmj->gij", X, X)
        G[:, np.arange(r), np.arange(r)] += sigma2 / lam_eff
        L = np.linalg.cholesky(G)
        logdetG = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        Xty = np.einsum("gmi,gm->gi", X, y)
        w = np.linalg.solve(G, Xty[:, :, None])[:, :, 0]
        quad = (np.einsum("gm,gm->g", y, y) - np.einsum("gi,gi->g", Xty, w)) / sigma2
        logdet = (m - r) * np.log(sigma2) + logdetG + np.sum(np.log(lam_eff))
        terms[idx] = 0.5 * (quad + logdet)
    return terms


def functional_loss(
    B: np.ndarray, lam: np.ndarray, sigma2: float, s: float, batches: CurveBatches
) -> float:
    terms = functional_terms(B, lam, sigma2, s, batches)
    return float(np.sum(terms) / batches.n)


def matrix_loss(B: np.ndarray, lam: np.ndarray, sigma2: float, s: float, S: np.ndarray) -> float:
    M, r = B.shape
    G = sigma2 / (s * lam) + 1.0
    BtSB = B.T @ S @ B
    tr_term = (np.trace(S) - np.sum(np.diag(BtSB) / G)) / sigma2
    logdet = (M - r) * np.log(sigma2) + np.sum(np.log(s * lam + sigma2))
    return float(tr_term + logdet)


def neg_loglik(params: ModelParams, data: Dataset, basis: OrthoBasis | None = None) -> float:
    """Negative log likelihood, up to an additive constant.

    Functional regimes: average over curves of the Gaussian marginal
    terms, one half each.  Matrix regime: trace-plus-logdet loss of the
    sample covariance, without the 1/2 factor (the convention the score
    calculus differentiates).
    """
    if data.regime == "matrix":
        return matrix_loss(params.B.B, params.lam, params.sigma2, params.s, data.cov)
    if basis is None:
        raise ValueError("functional regimes need a basis")
    return functional_loss(
        params.B.B, params.lam, params.sigma2, params.s, curve_batches(data, basis)
    )


def neg_loglik_terms(params: ModelParams, data: Dataset, basis: OrthoBasis) -> np.ndarray:
    """Per-curve loss contributions in the dataset's curve order."""
    return functional_terms(
        params.B.B, params.lam, params.sigma2, params.s, curve_batches(data, basis)
    )


def kl_divergence(Sigma: np.ndarray, Sigma_star: np.ndarray) -> float:
    """Kullback-Leibler divergence between centered Gaussians.

    Computed from the eigenvalues e_i of R = S^{-1/2} (S* - S) S^{-1/2}
    as  0.5 * sum(e_i - log(1 + e_i)),  which stays accurate when the
    two covariances are close (each summand is evaluated with log1p).
    """
    Sigma = np.asarray(Sigma, dtype=float)
    Sigma_star = np.asarray(Sigma_star, dtype=float)
    evals, evecs = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
    if evals.min() <= 0.0:
        raise ValueError("first covariance is not positive definite")
    inv_sqrt = (evecs / np.sqrt(evals)) @ evecs.T
    R = inv_sqrt @ (Sigma_star - Sigma) @ inv_sqrt
    e = np.linalg.eigvalsh(0.5 * (R + R.T))
    if e.min() <= -1.0:
        raise ValueError("second covariance is not positive definite")
    return float(0.5 * np.sum(e - np.log1p(e)))


class KernelFn:
    """Covariance kernel evaluator; calling with two 1-d arrays returns a grid."""

    def __init__(self, fns: Sequence[Callable], weights: np.ndarray):
        self._fns = list(fns)
        self._w = np.asarray(weights, dtype=float)

    def __call__(self, u, v) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        Fu = np.stack([f(u) for f in self._fns], axis=1)
        Fv = np.stack([f(v) for f in self._fns], axis=1)
        return (Fu * self._w) @ Fv.T


def kernel_from_params(params: ModelParams, basis: OrthoBasis) -> KernelFn:
    """The fitted covariance kernel sum_k lam_k psi_k(u) psi_k(v)."""
    B = params.B.B

    def component(k):
        return lambda t: eval_basis(basis, t) @ B[:, k]

    return KernelFn([component(k) for k in range(params.r)], params.lam)


def kernel_l2_distance(k1, k2, npts: int = 128) -> float:
    """L2([0,1]^2) distance between two kernel evaluators (tensor Gauss rule)."""
    x, w = np.polynomial.legendre.leggauss(npts)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    D = np.asarray(k1(x, x), dtype=float) - np.asarray(k2(x, x), dtype=float)
    return float(np.sqrt(np.einsum("i,ij,j->", w, D * D, w)))


@dataclass(frozen=True)
class TrueKernel:
    """A data-generating kernel: eigenvalues with orthonormal eigenfunctions."""

    eigenvalues: np.ndarray = field(repr=False)
    eigenfunctions: tuple[Callable, ...] = field(repr=False)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if lam.ndim != 1 or lam.size != len(self.eigenfunctions):
            raise ValueError("need one eigenvalue per eigenfunction")
        if not (lam > 0).all() or (np.diff(lam) >= 0).any():
            raise ValueError("eigenvalues must be positive and strictly decreasing")
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenfunctions", tuple(self.eigenfunctions))

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    def evaluator(self) -> KernelFn:
        return KernelFn(self.eigenfunctions, self.eigenvalues)

    def check_orthonormal(self, npts: int = 512, tol: float = 1e-8) -> float:
        """Max deviation of the eigenfunction Gram matrix from identity."""
        x, w = np.polynomial.legendre.leggauss(npts)
        x = 0.5 * (x + 1.0)
        w = 0.5 * w
        F = np.stack([f(x) for f in self.eigenfunctions], axis=1)
        G = F.T @ (w[:, None] * F)
        dev = float(np.abs(G - np.eye(self.rank)).max())
        if dev > tol:
            raise ValueError(f"eigenfunctions are not orthonormal (deviation {dev:.3e})")
        return dev


def optimal_parameter(
    truth: TrueKernel, basis: OrthoBasis, r: int
) -> tuple[StiefelPoint, np.ndarray, float]:
    """Best rank-r approximation of a true kernel within the model space.

    Projects each eigenfunction onto the basis, assembles the projected
    kernel's coefficient matrix, and keeps its top-r eigenpairs.  Returns
    the canonicalized frame, its eigenvalues, and the L2 approximation
    error of the resulting kernel relative to the truth.
    """
    coefs = np.stack([project_function(basis, f) for f in truth.eigenfunctions], axis=1)
    Ccoef = (coefs * truth.eigenvalues) @ coefs.T
    evals, evecs = np.linalg.eigh(Ccoef)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if r > truth.rank or r > basis.M:
        raise ValueError("requested rank exceeds the truth rank or basis dimension")
    if evals[r - 1] <= 1e-12:
        raise DegenerateSpectrumError("projected kernel has rank below r")
    gaps = -np.diff(evals[: min(r + 1, evals.size)])
    if (gaps <= 1e-10).any():
        raise DegenerateSpectrumError("projected kernel has eigenvalue ties near the cut")
    B, lam = canonicalize(evecs[:, :r], evals[:r])
    point = StiefelPoint(B)
    approx = kernel_from_params(
        ModelParams(M=basis.M, r=r, B=point, lam=lam, sigma2=1.0), basis
    )
    beta = kernel_l2_distance(truth.evaluator(), approx)
    return point, lam, beta
