"""Gaussian-process output layer.

Squared-exponential ARD kernel with unit signal variance, exact negative log
marginal likelihood through a Cholesky factor on the tape, the predictive
distribution, and a KISS-GP variant where ``K ~ S K_UU S^T`` with multilinear
interpolation weights ``S`` onto a regular inducing grid.

Hyperparameters live in log space: ``log_lengthscales`` (F,) and
``log_noise`` (scalar, log of the noise variance).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from . import autodiff as ad
from .autodiff import ConditioningError, ShapeError, Tape, Var

LOG_2PI = np.log(2.0 * np.pi)
MAX_KISS_DIM = 4


@dataclass
class GPHyperparams:
    log_lengthscales: np.ndarray
    log_noise: float

    @classmethod
    def default(cls, F: int, lengthscale: float = 1.0, noise: float = 0.1) -> "GPHyperparams":
        return cls(np.full(F, np.log(lengthscale)), float(np.log(noise)))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def noise(self) -> float:
        return float(np.exp(self.log_noise))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"gp.log_lengthscales": np.asarray(self.log_lengthscales, dtype=np.float64),
                "gp.log_noise": np.asarray(self.log_noise, dtype=np.float64).reshape(())}

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "GPHyperparams":
        return cls(np.array(d["gp.log_lengthscales"], dtype=np.float64),
                   float(np.asarray(d["gp.log_noise"])))


@dataclass
class PredictiveDistribution:
    mean: np.ndarray
    variance: np.ndarray   # latent variance, diag of cov(f_*)
    noise: float

    @property
    def obs_variance(self) -> np.ndarray:
        return self.variance + self.noise

    def std(self, observation: bool = True) -> np.ndarray:
        return np.sqrt(self.obs_variance if observation else self.variance)


# -- kernel ------------------------------------------------------------------


def se_kernel(a, b, hyp: GPHyperparams) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a - b) / hyp.lengthscales
    return float(np.exp(-0.5 * d @ d))


def kernel_matrix(X, Z, hyp: GPHyperparams) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if X.shape[1] != Z.shape[1]:
        raise ShapeError(f"kernel_matrix: feature widths {X.shape[1]} and {Z.shape[1]} differ")
    ell = hyp.lengthscales
    diff = X[:, None, :] / ell - Z[None, :, :] / ell
    return np.exp(-0.5 * np.einsum("ijk,ijk->ij", diff, diff))


def kernel_graph(X: Var, Z: Var | None, log_ell: Var) -> Var:
    """Kernel matrix on the tape; ``Z=None`` gives the symmetric ``K(X, X)``."""
    inv_ell = ad.exp(ad.neg(log_ell))
    Xs = ad.mul(X, inv_ell)
    Zs = Xs if Z is None else ad.mul(Z, inv_ell)
    return ad.exp(ad.scale(ad.pairwise_sqdist(Xs, Zs), -0.5))


def noisy_cov(tape: Tape, K: Var, log_noise: Var) -> Var:
    n = K.shape[0]
    return ad.add(K, ad.mul(tape.constant(np.eye(n)), ad.exp(log_noise)))


# -- exact GP ----------------------------------------------------------------


def nll_graph(tape: Tape, X: Var, y, log_ell: Var, log_noise: Var) -> Var:
    """Negative log marginal likelihood with zero prior mean, via Cholesky."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    n = y.shape[0]
    if X.shape[0] != n:
        raise ShapeError(f"gp_nll: {X.shape[0]} feature rows but {n} targets")
    A = noisy_cov(tape, kernel_graph(X, None, log_ell), log_noise)
    Lc = ad.cholesky(A)
    a = ad.solve_triangular(Lc, tape.constant(y))
    fit = ad.scale(ad.total(ad.mul(a, a)), 0.5)
    logdet = ad.total(ad.log(ad.diag(Lc)))
    return fit + logdet + 0.5 * n * LOG_2PI


def gp_nll(X, y, hyp: GPHyperparams) -> tuple[Var, Tape, dict[str, Var]]:
    """Build the loss on a fresh tape.

    Returns ``(loss, tape, leaves)`` where ``leaves`` holds the Vars for
    ``X``, ``log_lengthscales`` and ``log_noise`` so callers can pull gradients.
    """
    tape = Tape()
    leaves = {
        "X": tape.leaf(np.atleast_2d(np.asarray(X, dtype=np.float64))),
        "log_lengthscales": tape.leaf(hyp.log_lengthscales),
        "log_noise": tape.leaf(hyp.log_noise),
    }
    loss = nll_graph(tape, leaves["X"], y, leaves["log_lengthscales"], leaves["log_noise"])
    return loss, tape, leaves


def gp_nll_value(X, y, hyp: GPHyperparams) -> float:
    return float(gp_nll(X, y, hyp)[0].value)


class GPPosterior:
    """Cached Cholesky factor of ``K + noise I`` for repeated predictions."""

    def __init__(self, X, y, hyp: GPHyperparams):
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.y = np.asarray(y, dtype=np.float64).ravel()
        self.hyp = hyp
        A = kernel_matrix(self.X, self.X, hyp) + hyp.noise * np.eye(len(self.y))
        self.chol, self.jitter = ad._cholesky_jittered(A)
        self.alpha = sla.cho_solve((self.chol, True), self.y)

    def predict(self, Xq) -> PredictiveDistribution:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=np.float64))
        Ks = kernel_matrix(Xq, self.X, self.hyp)
        mean = Ks @ self.alpha
        v = sla.solve_triangular(self.chol, Ks.T, lower=True)
        var = 1.0 - np.einsum("ij,ij->j", v, v)
        var = np.where(var < 0.0, 0.0, var)
        return PredictiveDistribution(mean, var, self.hyp.noise)


def gp_predict(X_train, y_train, X_query, hyp: GPHyperparams) -> PredictiveDistribution:
    return GPPosterior(X_train, y_train, hyp).predict(X_query)


# -- KISS-GP -----------------------------------------------------------------


@dataclass
class InducingGrid:
    """Regular grid with ``per_axis`` points on each of F axes, C-ordered."""

    axes: list[np.ndarray]
    clamped: int = field(default=0)

    @property
    def F(self) -> int:
        return len(self.axes)

    @property
    def u(self) -> int:
        return int(np.prod([len(a) for a in self.axes]))

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def kuu(self, hyp: GPHyperparams) -> np.ndarray:
        P = self.points
        return kernel_matrix(P, P, hyp)

    @classmethod
    def from_features(cls, X, u: int, margin: float = 0.05) -> "InducingGrid":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        F = X.shape[1]
        if F > MAX_KISS_DIM:
            raise ValueError(f"KISS-GP supports at most {MAX_KISS_DIM} feature dims, got {F}")
        per_axis = int(round(u ** (1.0 / F)))
        if per_axis < 2:
            raise ValueError(f"u={u} gives fewer than 2 grid points per axis for F={F}")
        lo, hi = X.min(axis=0), X.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        lo, hi = lo - margin * span, hi + margin * span
        return cls([np.linspace(lo[f], hi[f], per_axis) for f in range(F)])


def _interp_parts(X: np.ndarray, grid: InducingGrid):
    """Corner indices, weights and d(weight)/dx for multilinear interpolation."""
    N, F = X.shape
    if F != grid.F:
        raise ShapeError(f"features have {F} dims but grid has {grid.F}")
    sizes = [len(a) for a in grid.axes]
    base = np.empty((N, F), dtype=np.int64)
    t = np.empty((N, F))
    inv_h = np.empty(F)
    inside = np.ones((N, F), dtype=bool)
    n_clamped = 0
    for f, ax in enumerate(grid.axes):
        h = ax[1] - ax[0]
        inv_h[f] = 1.0 / h
        x = X[:, f]
        out = (x < ax[0]) | (x > ax[-1])
        n_clamped += int(out.sum())
        inside[:, f] = ~out
        xc = np.clip(x, ax[0], ax[-1])
        i = np.clip(np.floor((xc - ax[0]) / h).astype(np.int64), 0, len(ax) - 2)
        base[:, f] = i
        t[:, f] = np.clip((xc - ax[i]) / h, 0.0, 1.0)
    corners = list(itertools.product((0, 1), repeat=F))
    idx = np.empty((N, len(corners)), dtype=np.int64)
    w = np.empty((N, len(corners)))
    dw = np.empty((N, len(corners), F))
    for c, bits in enumerate(corners):
        bits = np.array(bits)
        multi = base + bits
        idx[:, c] = np.ravel_multi_index(tuple(multi.T), sizes)
        factors = np.where(bits == 1, t, 1.0 - t)
        slopes = np.where(bits == 1, 1.0, -1.0) * inv_h * inside
        w[:, c] = factors.prod(axis=1)
        for f in range(F):
            others = np.delete(factors, f, axis=1).prod(axis=1) if F > 1 else 1.0
            dw[:, c, f] = slopes[:, f] * others
    return idx, w, dw, n_clamped


def kiss_weights(X, grid: InducingGrid) -> sp.csr_matrix:
    """Sparse N x u interpolation matrix; rows are convex weights over 2^F corners.

    Features outside the grid are clamped to its boundary and counted in
    ``grid.clamped``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    idx, w, _, n_clamped = _interp_parts(X, grid)
    grid.clamped += n_clamped
    N, C = w.shape
    rows = np.repeat(np.arange(N), C)
    S = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(N, grid.u))
    S.sum_duplicates()
    return S


def interp_matrix(X: Var, grid: InducingGrid) -> Var:
    """Dense interpolation matrix on the tape, differentiable in ``X`` a.e."""
    idx, w, dw, n_clamped = _interp_parts(X.value, grid)
    grid.clamped += n_clamped
    N, C = w.shape
    S = np.zeros((N, grid.u))
    rows = np.arange(N)[:, None]
    np.add.at(S, (np.broadcast_to(rows, idx.shape), idx), w)

    def vjp(g):
        gsel = g[rows, idx]                      # (N, C)
        return (np.einsum("nc,ncf->nf", gsel, dw),)

    return X.tape.record("interp", (X,), S, vjp)


def _cg(matvec, b: np.ndarray, tol: float, maxiter: int) -> np.ndarray:
    n = b.shape[0]
    op = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    x, info = cg(op, b, rtol=tol, atol=0.0, maxiter=maxiter)
    if info != 0:
        res = float(np.linalg.norm(matvec(x) - b))
        raise ConditioningError(f"CG did not converge in {maxiter} iterations, residual {res:.3e}",
                                residual=res)
    return x


def kiss_solve(S: Var, Kuu: Var, noise: Var, b: Var, tol: float = 1e-10,
               maxiter: int | None = None) -> Var:
    """Solve ``(S Kuu S^T + noise I) x = b`` by conjugate gradients.

    The matvec only touches the sparse structure of ``S``; gradients for all
    four inputs are formed without materializing the N x N matrix.
    """
    Ssp = sp.csr_matrix(S.value)
    Kv = Kuu.value
    nv = float(noise.value)
    bv = b.value.ravel()
    n = bv.shape[0]
    maxiter = maxiter or max(1000, 4 * n)

    def matvec(v):
        v = np.ravel(v)
        return Ssp @ (Kv @ (Ssp.T @ v)) + nv * v

    x = _cg(matvec, bv, tol, maxiter)

    def vjp(g):
        lam = _cg(matvec, np.ravel(g), tol, maxiter)
        SK = Ssp @ Kv
        gS = -(np.outer(lam, x @ SK) + np.outer(x, lam @ SK))
        gK = -np.outer(Ssp.T @ lam, Ssp.T @ x)
        gn = -float(lam @ x)
        return gS, gK, np.asarray(gn).reshape(noise.shape), lam.reshape(b.shape)

    return S.tape.record("kiss_solve", (S, Kuu, noise, b), x.reshape(b.shape), vjp)


def kiss_nll_graph(tape: Tape, X: Var, y, log_ell: Var, log_noise: Var,
                   grid: InducingGrid) -> Var:
    """Marginal likelihood with ``K ~ S K_UU S^T``.

    The quadratic term uses the CG solve; the log-determinant is taken from a
    dense Cholesky of the materialized approximation, which caps this path at
    desk-scale N.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    n = y.shape[0]
    S = interp_matrix(X, grid)
    Kuu = kernel_graph(tape.constant(grid.points), None, log_ell)
    noise = ad.exp(log_noise)
    yv = tape.constant(y)
    x = kiss_solve(S, Kuu, noise, yv)
    fit = ad.scale(ad.total(ad.mul(yv, x)), 0.5)
    A = ad.add(ad.matmul(ad.matmul(S, Kuu), ad.transpose(S)),
               ad.mul(tape.constant(np.eye(n)), noise))
    logdet = ad.total(ad.log(ad.diag(ad.cholesky(A))))
    return fit + logdet + 0.5 * n * LOG_2PI


def kiss_nll(X, y, hyp: GPHyperparams, grid: InducingGrid) -> tuple[Var, Tape, dict[str, Var]]:
    tape = Tape()
    leaves = {
        "X": tape.leaf(np.atleast_2d(np.asarray(X, dtype=np.float64))),
        "log_lengthscales": tape.leaf(hyp.log_lengthscales),
        "log_noise": tape.leaf(hyp.log_noise),
    }
    loss = kiss_nll_graph(tape, leaves["X"], y, leaves["log_lengthscales"],
                          leaves["log_noise"], grid)
    return loss, tape, leaves


def kiss_matvec(S: sp.spmatrix, Kuu: np.ndarray, v: np.ndarray, noise: float = 0.0) -> np.ndarray:
    return S @ (Kuu @ (S.T @ v)) + noise * v


def loss_graph(tape: Tape, X: Var, y, log_ell: Var, log_noise: Var,
               kind: str = "exact", u: int = 64) -> Var:
    """Dispatch to the exact or KISS likelihood; the KISS grid follows the features."""
    if kind == "exact":
        return nll_graph(tape, X, y, log_ell, log_noise)
    if kind == "kiss":
        grid = InducingGrid.from_features(X.value, u)
        return kiss_nll_graph(tape, X, y, log_ell, log_noise, grid)
    raise ValueError(f"unknown GP kind {kind!r}")
