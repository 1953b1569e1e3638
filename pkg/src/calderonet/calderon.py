"""Learning pipelines for the DtN map, the direct Calderon map a -> Lambda_a and
its restricted inverse, with W_mu norms and error diagnostics.

Conventions
-----------
Boundary samples f ~ mu are handled through their coordinates x in the
H^{1/2}-orthonormal circle family, and DtN operators through the orthonormal
DtN matrix G, so that <Lambda_a f, g> = y^T G x for coordinates x, y.

For a Gaussian mu with covariance diag(alpha) the tensor family
e_i (x) e_j / sqrt(alpha_i alpha_j) is orthonormal in W_mu; a bilinear form
with matrix G has coordinates sqrt(alpha_i alpha_j) G_ij there.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .deeponet import DeepOnetParams, MlpParams, SquaredLoss, TrainResult, mlp_forward, sgd_train
from .fem import ConductivityField, DtNMatrix, DtNOperator, Mesh
from .hilbert import (
    BoundaryFunction,
    DiagonalBasis,
    OrthoBasis,
    circle_basis,
    dual_circle_basis,
    empirical_domain_basis,
    extend,
    h_half_norm,
    h_minus_half_norm,
    n_modes,
    project,
    truncation_of,
)
from .measures import GaussianMeasureSpec, mesh_domain_basis, sample_boundary_coeffs

log = logging.getLogger(__name__)

W_MU_TENSOR = "w_mu_tensor"


# --------------------------------------------------------------------------
# W_mu norm
# --------------------------------------------------------------------------

@dataclass
class WmuEstimate:
    """U-statistic estimate of ||T||^2_{W_mu} and its square root."""

    sq: float
    se_sq: float
    n: int

    @property
    def norm(self) -> float:
        return float(np.sqrt(max(self.sq, 0.0)))

    @property
    def se(self) -> float:
        return self.se_sq / (2 * self.norm) if self.norm > 0 else float(np.sqrt(self.se_sq))


def _coeff_rows(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return np.atleast_2d(samples).astype(float)
    return np.array([s.coeffs if isinstance(s, BoundaryFunction) else s for s in samples], dtype=float)


def wmu_norm(B, mu_samples) -> WmuEstimate:
    """Estimate the double integral of |B(f, g)|^2 over mu x mu.

    ``B`` is a DtNMatrix, a raw-coefficient matrix (B(f, g) = g^T B f), or a
    callable ``B(F, G)`` returning the matrix of values B(F_s, G_t) for
    stacked raw-coefficient rows.  All ordered pairs s != t of the batch are
    used; the standard error comes from the first Hoeffding projection.
    """
    F = _coeff_rows(mu_samples)
    N = F.shape[0]
    if N < 2:
        raise ValueError("need at least two mu samples")
    if isinstance(B, DtNMatrix):
        B = B.to_basis("raw").entries
    if callable(B):
        V = np.asarray(B(F, F), dtype=float) ** 2
        diag = np.diag(V).copy()
        row = V.sum(axis=1) - diag
        col = V.sum(axis=0) - diag
    else:
        B = np.asarray(B, dtype=float)
        C = F.T @ F
        # value(s, t) = f_t^T B f_s
        P = F @ B  # P[t] = f_t^T B
        Q = F @ B.T  # Q[s] = (B f_s)^T
        diag = np.einsum("ij,ij->i", P, F) ** 2
        row = np.einsum("ij,jk,ik->i", Q, C, Q) - diag  # fixed s, sum over t
        col = np.einsum("ij,jk,ik->i", P, C, P) - diag  # fixed t, sum over s
    total = row.sum()
    sq = total / (N * (N - 1))
    h1 = 0.5 * (row + col) / (N - 1)
    se_sq = 2.0 * h1.std(ddof=1) / np.sqrt(N)
    return WmuEstimate(float(sq), float(se_sq), N)


def wmu_basis(mu: GaussianMeasureSpec) -> DiagonalBasis:
    """W_mu-orthonormal tensor family on flattened orthonormal DtN matrices.

    Ordered by nested square blocks, so the first n^2 members span the
    leading n x n block.
    """
    n = mu.alphas.size
    if np.any(mu.alphas <= 0):
        raise ValueError("tensor basis needs strictly positive eigenvalues")
    weights = np.outer(mu.alphas, mu.alphas).ravel()
    order = []
    for s in range(n):
        order += [s * n + j for j in range(s)]
        order += [i * n + s for i in range(s)]
        order.append(s * n + s)
    return DiagonalBasis(W_MU_TENSOR, weights, f"n={n}", order=np.array(order))


class WmuQuadratureLoss:
    """Squared W_mu distance on a fixed batch of mu samples, for W_mu coordinates.

    Predictions are the coordinates of the leading ``n_block`` square block;
    targets are full ``n x n`` coordinate matrices (flattened).  With
    whitened samples z = x / sqrt(alpha) the bilinear value is z_t^T Y z_s.
    """

    name = "wmu"

    def __init__(self, Z: np.ndarray, n_block: int):
        self.Z = np.asarray(Z, dtype=float)
        self.N, self.n = self.Z.shape
        self.n_block = n_block
        self.C = self.Z.T @ self.Z
        vals, vecs = np.linalg.eigh(self.C)
        self._root = (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T
        self._norm = 1.0 / (self.N * (self.N - 1))
        nb = n_block
        idx = []
        for s in range(nb):
            idx += [(s, j) for j in range(s)] + [(i, s) for i in range(s)] + [(s, s)]
        self._rows = np.array([i for i, _ in idx])
        self._cols = np.array([j for _, j in idx])

    def block_to_matrix(self, pred):
        pred = np.atleast_2d(pred)
        Y = np.zeros((pred.shape[0], self.n, self.n))
        Y[:, self._rows, self._cols] = pred
        return Y

    def _delta(self, pred, target):
        return self.block_to_matrix(pred) - np.asarray(target).reshape(-1, self.n, self.n)

    def per_sample(self, pred, target):
        D = self._delta(pred, target)
        full = np.sum((self._root @ D @ self._root) ** 2, axis=(1, 2))
        q = np.einsum("si,bij,sj->bs", self.Z, D, self.Z)
        return (full - np.sum(q**2, axis=1)) * self._norm

    def grad(self, pred, target):
        D = self._delta(pred, target)
        g = 2 * (self.C @ D @ self.C)
        q = np.einsum("si,bij,sj->bs", self.Z, D, self.Z)
        g -= 2 * np.einsum("bs,si,sj->bij", q, self.Z, self.Z)
        return g[:, self._rows, self._cols] * self._norm


# --------------------------------------------------------------------------
# Fixed conductivity: the DtN map as a DeepONet H^{1/2} -> H^{-1/2}
# --------------------------------------------------------------------------

def coords_of(samples, K: int) -> np.ndarray:
    """Orthonormal coordinates of stacked raw coefficient rows."""
    return circle_basis(K).analysis(_coeff_rows(samples), n_modes(K))


@dataclass
class LinearFit:
    theta: np.ndarray
    residual: float
    rank_deficient: bool


def linear_fit(X: np.ndarray, Y: np.ndarray, ridge: float = 1e-12) -> LinearFit:
    """Least squares theta with Y ~ X theta^T; ridge-regularized if X is rank deficient."""
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    rank = np.linalg.matrix_rank(X)
    deficient = rank < X.shape[1]
    if deficient:
        A = X.T @ X + ridge * np.trace(X.T @ X) * np.eye(X.shape[1])
        theta = np.linalg.solve(A, X.T @ Y).T
    else:
        theta = np.linalg.lstsq(X, Y, rcond=None)[0].T
    r = np.linalg.norm(Y - X @ theta.T) / max(np.linalg.norm(Y), 1e-300)
    return LinearFit(theta, float(r), bool(deficient))


def linear_dtn_fit(op, mu_samples, d: int) -> LinearFit:
    """Fit theta in R^{d x d} to x -> P_d Lambda^phi E_d x from mu samples.

    ``op`` is a DtNOperator (targets come from FEM solves on the projected
    data E_d P_d f) or any callable mapping stacked d-coordinates to stacked
    d-coordinates.
    """
    F = _coeff_rows(mu_samples)
    K = truncation_of(F.shape[1])
    if d > n_modes(K):
        raise ValueError(f"d={d} exceeds 2K+1={n_modes(K)}")
    basis = circle_basis(K)
    X = basis.analysis(F, d)
    if isinstance(op, DtNOperator):
        raw = basis.synthesis(X, d)
        T = _trig(op, K)
        flux = op.boundary_flux(T @ raw.T)
        functionals = (T.T @ flux).T
        Y = dual_circle_basis(K).analysis(functionals, d)
    else:
        Y = np.asarray(op(X), dtype=float)
    return linear_fit(X, Y)


def _trig(op: DtNOperator, K: int):
    from .hilbert import trig_design

    op._check_K(K)
    return trig_design(op.mesh.angles, K)


@dataclass
class DtnFixedReport:
    train_loss: float
    heldout_loss: float
    heldout_relative: float
    target_second_moment: float
    linear_fit_relative: float
    linear_floor_relative: float
    d: int
    m: int
    per_sample_errors: list = field(repr=False, default_factory=list)

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("per_sample_errors")
        return out


def dtn_dataset(G: np.ndarray, mu: GaussianMeasureSpec, n: int, seed) -> tuple:
    """(raw samples, input coords, target coords) with targets the dual coordinates of Lambda f."""
    K = truncation_of(G.shape[0])
    F = sample_boundary_coeffs(mu, n, seed)
    X = coords_of(F, K)
    return F, X, X @ G.T


def train_dtn_fixed_a(mesh: Mesh, a: ConductivityField, mu: GaussianMeasureSpec, arch: dict,
                      hyper: dict, n_train: int = 2000, n_test: int = 500, seed: int = 0):
    """Train F = E_m o f^theta o P_d against FEM DtN targets for fixed a.

    The loss is the mean of ||Lambda_a f - F f||^2_{-1/2}.  Returns the
    trained DeepOnetParams, the report, and the training result.
    """
    K = truncation_of(mu.alphas.size)
    G = DtNOperator(mesh, a).matrix(K, "orthonormal").entries
    return train_dtn_from_matrix(G, mu, arch, hyper, n_train, n_test, seed)


def train_dtn_from_matrix(G, mu, arch, hyper, n_train=2000, n_test=500, seed=0):
    K = truncation_of(G.shape[0])
    n = n_modes(K)
    d, m = int(arch.get("d_lat", n)), int(arch.get("m", n))
    widths = [d] + list(arch.get("widths", [64])) + [m]
    _, X, Y = dtn_dataset(G, mu, n_train, seed)
    _, Xt, Yt = dtn_dataset(G, mu, n_test, seed + 1_000_003)
    in_b, out_b = circle_basis(K), dual_circle_basis(K)
    theta = MlpParams.init_standardized(widths, X[:, :d], Y[:, :m], arch.get("activation", "tanh"),
                                        hyper.get("init_seed", seed))
    model = DeepOnetParams(d, theta, m, in_b, out_b)
    raw = in_b.synthesis(X, n)
    res = sgd_train(model, raw, Y[:, :m], **_hyper(hyper, seed))
    p = res.params

    def heldout(pred):
        full = np.zeros_like(Yt)
        full[:, :m] = pred
        return np.sum((full - Yt) ** 2, axis=1)

    pred = mlp_forward(p.theta, Xt[:, :d])
    errs = heldout(pred)
    ref = float(np.mean(np.sum(Yt**2, axis=1)))
    lin = linear_fit(X[:, :d], Y[:, :m])
    lin_err = heldout(Xt[:, :d] @ lin.theta.T)
    floor = heldout(Xt[:, :d] @ G[:m, :d].T)
    report = DtnFixedReport(
        train_loss=res.best_loss,
        heldout_loss=float(errs.mean()),
        heldout_relative=float(errs.mean() / ref),
        target_second_moment=ref,
        linear_fit_relative=float(lin_err.mean() / ref),
        linear_floor_relative=float(floor.mean() / ref),
        d=d, m=m,
        per_sample_errors=np.sqrt(errs).tolist(),
    )
    return p, report, res


def _hyper(hyper: dict, seed) -> dict:
    return dict(
        lr=float(hyper.get("lr", 1e-3)),
        batch=int(hyper.get("batch", 64)),
        epochs=int(hyper.get("epochs", 100)),
        seed=hyper.get("train_seed", seed),
        optimizer=hyper.get("optimizer", "adam"),
        lr_decay=float(hyper.get("lr_decay", 1.0)),
    )


def best_linear_heldout(G: np.ndarray, mu: GaussianMeasureSpec, d: int, n_train: int = 2000,
                        n_test: int = 2000, seed: int = 0) -> float:
    """Held-out relative loss of the least-squares linear model with d inputs, full outputs."""
    _, X, Y = dtn_dataset(G, mu, n_train, seed)
    _, Xt, Yt = dtn_dataset(G, mu, n_test, seed + 1_000_003)
    fit = linear_fit(X[:, :d], Y)
    err = np.sum((Xt[:, :d] @ fit.theta.T - Yt) ** 2, axis=1).mean()
    return float(err / np.sum(Yt**2, axis=1).mean())


def boundedness_constant(pairs) -> float:
    """sup ||Lambda_a f||_{-1/2} / (a_hi ||f||_{1/2}) over (DtNOperator, BoundaryFunction) pairs."""
    best = 0.0
    for op, f in pairs:
        nf = h_half_norm(f)
        if nf == 0:
            continue
        best = max(best, h_minus_half_norm(op.apply(f)) / (op.a.a_hi * nf))
    return best


# --------------------------------------------------------------------------
# Error decomposition for linear latent models
# --------------------------------------------------------------------------

@dataclass
class Term:
    mean: float
    se: float


@dataclass
class ErrorDecomposition:
    d: int
    total_mse: Term
    i1: Term
    i2: Term
    i3: Term
    tail: float
    n_samples: int

    @property
    def combined_se(self) -> float:
        return float(np.sqrt(self.total_mse.se**2 + 9 * (self.i1.se**2 + self.i2.se**2 + self.i3.se**2)))

    @property
    def sound(self) -> bool:
        return self.total_mse.mean <= 3 * (self.i1.mean + self.i2.mean + self.i3.mean) + 3 * self.combined_se

    def to_json(self) -> dict:
        return {"d": self.d, "total": self.total_mse.mean, "i1": self.i1.mean, "i2": self.i2.mean,
                "i3": self.i3.mean, "se": {"total": self.total_mse.se, "i1": self.i1.se,
                                          "i2": self.i2.se, "i3": self.i3.se},
                "tail": self.tail, "n": self.n_samples}


def _term(v) -> Term:
    return Term(float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)))


def error_decomposition(G: np.ndarray, theta: np.ndarray, mu, d: int, n_samples: int = 20000,
                        seed: int = 0, samples=None) -> ErrorDecomposition:
    """Monte Carlo estimates of the three terms bounding E||E_d theta P_d f - Lambda^phi f||^2.

    ``G`` is the orthonormal DtN matrix (Lambda^phi in circle coordinates).
    ``mu`` is either a GaussianMeasureSpec (eigenbasis = circle family) or a
    CovarianceEstimate whose eigenvectors define P_d and E_d; in the latter
    case ``samples`` (raw coefficients) must be supplied.
    """
    n = G.shape[0]
    K = truncation_of(n)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (d, d):
        raise ValueError(f"theta must be {d}x{d}")
    if isinstance(mu, GaussianMeasureSpec):
        alphas = mu.alphas
        V = np.eye(n)
        F = sample_boundary_coeffs(mu, n_samples, seed) if samples is None else _coeff_rows(samples)
    else:
        if samples is None:
            raise ValueError("an empirical eigen-system needs the samples it came from")
        alphas, V = mu.eigenvalues, mu.eigenvectors
        F = _coeff_rows(samples)
    Gp = V.T @ G @ V
    X = coords_of(F, K) @ V
    Xd, Xt = X[:, :d], X[:, d:]
    model = np.zeros_like(X)
    model[:, :d] = Xd @ theta.T
    truth = X @ Gp.T
    total = np.sum((model - truth) ** 2, axis=1)
    i1 = np.sum((Xd @ theta.T - Xd @ Gp[:d, :d].T) ** 2, axis=1)
    i2 = np.sum((Xt @ Gp[:d, d:].T) ** 2, axis=1)
    i3 = np.sum((X @ Gp[d:, :].T) ** 2, axis=1)
    return ErrorDecomposition(d, _term(total), _term(i1), _term(i2), _term(i3),
                              float(np.sum(alphas[d:])), X.shape[0])


# --------------------------------------------------------------------------
# Chebyshev coverage
# --------------------------------------------------------------------------

@dataclass
class Coverage:
    lam: float
    fraction: float
    bound: float
    se: float

    @property
    def holds(self) -> bool:
        return self.fraction <= self.bound + 3 * self.se

    def to_json(self) -> dict:
        return {"lambda": self.lam, "fraction": self.fraction, "bound": self.bound, "se": self.se}


def chebyshev_coverage(errors, lam: float) -> Coverage:
    """Empirical exceedance fraction P(err > lam) against mean(err^2) / lam^2."""
    e = np.abs(np.asarray(errors, dtype=float))
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if e.size == 0:
        return Coverage(lam, 0.0, 0.0, 0.0)
    p = float(np.mean(e > lam))
    return Coverage(lam, p, float(np.mean(e**2) / lam**2), float(np.sqrt(p * (1 - p) / e.size)))


def coverage_sweep(errors, multiples=(1.0, 2.0, 3.0)) -> list:
    rms = float(np.sqrt(np.mean(np.asarray(errors, float) ** 2)))
    if rms == 0:
        return [chebyshev_coverage(errors, float(k)) for k in multiples]
    return [chebyshev_coverage(errors, k * rms) for k in multiples]


# --------------------------------------------------------------------------
# Calderon datasets
# --------------------------------------------------------------------------

def gamma(mesh: Mesh, a, K: int, admissible: Optional[Callable] = None) -> DtNMatrix:
    """Lambda_a for admissible a, the zero form otherwise."""
    ok = a is not None and (admissible(a) if admissible else _in_X(mesh, a))
    if not ok:
        return DtNMatrix(np.zeros((n_modes(K), n_modes(K))), "orthonormal", K)
    return DtNOperator(mesh, a).matrix(K, "orthonormal")


def _in_X(mesh, a) -> bool:
    vals = a.on_elements(mesh) if isinstance(a, ConductivityField) else np.asarray(a)
    return bool(np.all(np.isfinite(vals)) and vals.min() > 0)


@dataclass
class CalderonDataset:
    """Conductivity samples with their orthonormal DtN matrices."""

    fields: list
    matrices: np.ndarray  # (N, n, n) orthonormal entries
    params: list
    provenance: dict

    @property
    def K(self) -> int:
        return truncation_of(self.matrices.shape[1])

    def __len__(self) -> int:
        return len(self.fields)

    def nodal(self) -> np.ndarray:
        return np.array([f.nodal_values for f in self.fields])

    def subset(self, idx) -> "CalderonDataset":
        idx = list(idx)
        return CalderonDataset([self.fields[i] for i in idx], self.matrices[idx],
                               [self.params[i] for i in idx], dict(self.provenance))

    def write_jsonl(self, path) -> str:
        with open(path, "w") as fh:
            for i, (f, G, p) in enumerate(zip(self.fields, self.matrices, self.params)):
                fh.write(json.dumps({"index": i, "param": p, "kl_coeffs": np.asarray(f.kl_coeffs).tolist(),
                                     "dtn": G.tolist()}) + "\n")
        return file_sha256(path)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def build_dataset(mesh: Mesh, fields: Sequence[ConductivityField], K: int, params=None,
                  provenance=None, threads: int = 1) -> CalderonDataset:
    def one(a):
        return gamma(mesh, a, K).entries

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            mats = list(ex.map(one, fields))
    else:
        mats = [one(a) for a in fields]
    params = list(params) if params is not None else [None] * len(fields)
    prov = {"mesh_h": mesh.h, "K": K}
    prov.update(provenance or {})
    return CalderonDataset(list(fields), np.array(mats), params, prov)


def constant_family(mesh: Mesh, values) -> list:
    return [ConductivityField(np.full(mesh.n_vertices, float(c)), (0.1, 10.0),
                              kl_coeffs=np.array([float(c)])) for c in values]


def radial_family(mesh: Mesh, inner_values, radius: float = 0.5, outer: float = 1.0) -> list:
    out = []
    for v in inner_values:
        def fn(x, y, v=float(v)):
            return np.where(np.hypot(x, y) < radius, v, outer)
        f = ConductivityField.from_function(mesh, fn, bounds=(0.1, 10.0))
        out.append(ConductivityField(f.nodal_values, f.bounds, np.array([float(v)]), f.element_values))
    return out


def lognormal_family(mesh: Mesh, eta, n: int, seed: int) -> list:
    from .measures import sample_conductivity

    return [sample_conductivity(eta, mesh, seed + i) for i in range(n)]


def field_values(mesh: Mesh, a: ConductivityField) -> np.ndarray:
    """Nodal values used for L^2(Omega) projections and errors."""
    return a.nodal_values


# --------------------------------------------------------------------------
# Direct Calderon map a -> Lambda_a
# --------------------------------------------------------------------------

@dataclass
class CalderonReport:
    train_loss: float
    heldout_relative: float
    heldout_relative_check: float
    per_sample_errors: list = field(repr=False)
    per_sample_relative: list = field(repr=False)
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"train_loss": self.train_loss, "heldout_relative": self.heldout_relative,
                "heldout_relative_check": self.heldout_relative_check, **self.details}


def whiten(mu: GaussianMeasureSpec, F: np.ndarray) -> np.ndarray:
    K = truncation_of(mu.alphas.size)
    return coords_of(F, K) / np.sqrt(mu.alphas)


def _split(n: int, n_test: int, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def train_calderon_direct(mesh: Mesh, data: CalderonDataset, mu: GaussianMeasureSpec, arch: dict,
                          hyper: dict, n_test: int = 40, n_mu: int = 256, seed: int = 0):
    """DeepONet from L^2 projections of a to the W_mu coordinates of Lambda_a.

    Inputs: the first d_lat coordinates of a in the L^2(disk) polynomial
    family.  Outputs: W_mu coordinates of the leading n_out x n_out block of
    the orthonormal DtN matrix (m = n_out^2).  The loss is the squared W_mu
    distance estimated on a fixed batch of n_mu samples of mu; held-out
    errors are re-checked on a disjoint batch.
    """
    K = data.K
    n = n_modes(K)
    d = int(arch.get("d_lat", 16))
    n_out = int(arch.get("n_out", min(n, 9)))
    m = n_out * n_out
    in_b = mesh_domain_basis(mesh, d)
    out_b = wmu_basis(mu)
    quad = sample_boundary_coeffs(mu, n_mu, seed + 17)
    check = sample_boundary_coeffs(mu, n_mu, seed + 18)
    loss = WmuQuadratureLoss(whiten(mu, quad), n_out)

    tr, te = _split(len(data), n_test, seed)
    A = data.nodal()
    X = in_b.analysis(A, d)
    Yfull = out_b.analysis(data.matrices.reshape(len(data), -1), out_b.size)
    Ycoord = Yfull[:, :m]
    targets = (data.matrices * np.sqrt(np.outer(mu.alphas, mu.alphas))).reshape(len(data), -1)

    widths = [d] + list(arch.get("widths", [64])) + [m]
    theta = MlpParams.init_standardized(widths, X[tr], Ycoord[tr], arch.get("activation", "tanh"),
                                        hyper.get("init_seed", seed))
    res = sgd_train(theta, X[tr], targets[tr], loss=loss, **_hyper(hyper, seed))
    params = DeepOnetParams(d, res.params, m, in_b, out_b)

    pred = mlp_forward(res.params, X[te])
    err_fixed = loss.per_sample(pred, targets[te])
    ref_fixed = loss.per_sample(np.zeros_like(pred), targets[te])
    raw_pred = _block_to_raw(loss.block_to_matrix(pred), mu)
    errs, refs = [], []
    for i, P in zip(te, raw_pred):
        truth = DtNMatrix(data.matrices[i], "orthonormal", K).to_basis("raw").entries
        errs.append(wmu_norm(truth - P, check).sq)
        refs.append(wmu_norm(truth, check).sq)
    errs, refs = np.maximum(np.array(errs), 0.0), np.array(refs)
    report = CalderonReport(
        train_loss=res.best_loss,
        heldout_relative=float(np.sqrt(errs.sum() / refs.sum())),
        heldout_relative_check=float(np.sqrt(err_fixed.sum() / ref_fixed.sum())),
        per_sample_errors=np.sqrt(errs).tolist(),
        per_sample_relative=(np.sqrt(errs / refs)).tolist(),
        details={"d_lat": d, "m": m, "n_train": int(tr.size), "n_test": int(te.size), "n_mu": n_mu},
    )
    return params, report, res


def _block_to_raw(Y: np.ndarray, mu: GaussianMeasureSpec) -> np.ndarray:
    """W_mu coordinate matrices -> raw-basis DtN entries."""
    K = truncation_of(mu.alphas.size)
    from .hilbert import multiplier_weights

    G = Y / np.sqrt(np.outer(mu.alphas, mu.alphas))
    w = np.sqrt(multiplier_weights(K))
    return G * np.outer(w, w)


def direct_predict(params: DeepOnetParams, mu: GaussianMeasureSpec, a: ConductivityField) -> DtNMatrix:
    """Predicted Lambda_a as an orthonormal DtNMatrix (zero outside the learned block)."""
    K = truncation_of(mu.alphas.size)
    coords = mlp_forward(params.theta, project(a.nodal_values, params.in_basis, params.d))
    G = extend(coords, params.out_basis, params.m).reshape(n_modes(K), n_modes(K))
    return DtNMatrix(G, "orthonormal", K)


# --------------------------------------------------------------------------
# Inverse Calderon map Lambda_a -> a on Y_M
# --------------------------------------------------------------------------

@dataclass
class InverseModel:
    params: DeepOnetParams
    train_inputs: np.ndarray
    ood_radius: float
    M: float

    def predict(self, G: np.ndarray):
        """Reconstructed nodal field and an out-of-distribution flag for one DtN matrix."""
        x = project(np.asarray(G).ravel(), self.params.in_basis, self.params.d)
        coords = mlp_forward(self.params.theta, x)
        field_ = extend(coords, self.params.out_basis, self.params.m)
        dist = float(np.min(np.linalg.norm(self.train_inputs - x, axis=1)))
        # sparse one-parameter families leave large gaps, so also bound the input norm
        norms = np.linalg.norm(self.train_inputs, axis=1)
        r = float(np.linalg.norm(x))
        outside = r < norms.min() / 1.25 or r > 1.25 * norms.max()
        return field_, bool(dist > self.ood_radius or outside)


@dataclass
class InverseReport:
    train_loss: float
    heldout_relative: float
    heldout_max_relative: float
    per_sample_errors: list = field(repr=False)
    per_sample_relative: list = field(repr=False)
    worst: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"train_loss": self.train_loss, "heldout_relative": self.heldout_relative,
                "heldout_max_relative": self.heldout_max_relative, "worst": self.worst, **self.details}


def train_inverse(mesh: Mesh, data: CalderonDataset, mu: GaussianMeasureSpec, M: float, arch: dict,
                  hyper: dict, n_test: int = 40, seed: int = 0):
    """DeepONet from W_mu coordinates of Lambda_a to L^2(disk) coordinates of a.

    The input is the leading n_in x n_in block of the W_mu tensor family
    (d_lat = n_in^2).  The output family is the Karhunen-Loeve basis of the
    training fields (``out_basis = "empirical"``, default) or the polynomial
    domain family (``"polynomial"``).  The loss is the L^2(Omega) distance of
    the reconstructed field; held-out errors include the part of a outside
    the output span.
    """
    from .fem import mass_matrix

    tr, te = _split(len(data), n_test, seed)
    n_in = int(arch.get("n_in", 3))
    d = n_in * n_in
    m = int(arch.get("m", 2))
    in_b = wmu_basis(mu)
    A = data.nodal()
    mass = mass_matrix(mesh)
    if arch.get("out_basis", "empirical") == "empirical":
        out_b = empirical_domain_basis(A[tr], mass, m)
    else:
        out_b = mesh_domain_basis(mesh, m)
    flat = data.matrices.reshape(len(data), -1)
    X = in_b.analysis(flat, d)
    Y = out_b.analysis(A, m)
    widths = [d] + list(arch.get("widths", [32])) + [m]
    theta = MlpParams.init_standardized(widths, X[tr], Y[tr], arch.get("activation", "tanh"),
                                        hyper.get("init_seed", seed))
    res = sgd_train(theta, X[tr], Y[tr], **_hyper(hyper, seed))
    params = DeepOnetParams(d, res.params, m, in_b, out_b)

    nn = _nearest_neighbour(X[tr])
    model = InverseModel(params, X[tr], 3.0 * float(nn.max()) if nn.size else np.inf, M)
    recon = out_b.synthesis(mlp_forward(res.params, X[te]), m)
    diff = recon - A[te]
    errs = np.sqrt(np.maximum(np.einsum("ij,ij->i", diff, (mass @ diff.T).T), 0))
    refs = np.sqrt(np.einsum("ij,ij->i", A[te], (mass @ A[te].T).T))
    rel = errs / refs
    w = int(np.argmax(rel))
    report = InverseReport(
        train_loss=res.best_loss,
        heldout_relative=float(np.sqrt(np.sum(errs**2) / np.sum(refs**2))),
        heldout_max_relative=float(rel.max()),
        per_sample_errors=errs.tolist(),
        per_sample_relative=rel.tolist(),
        worst={"index": int(te[w]), "param": data.params[te[w]], "relative_error": float(rel[w]),
               "true_mean": float(A[te[w]].mean()), "recon_mean": float(recon[w].mean())},
        details={"d_lat": d, "m": m, "n_train": int(tr.size), "n_test": int(te.size),
                 "out_basis": out_b.kind + ":" + out_b.label},
    )
    return model, report, res, te


def _nearest_neighbour(X: np.ndarray) -> np.ndarray:
    if X.shape[0] < 2:
        return np.zeros(0)
    D = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)
    np.fill_diagonal(D, np.inf)
    return D.min(axis=1)


def mean_value(mesh: Mesh, nodal: np.ndarray) -> float:
    """Area average of a nodal field."""
    from .fem import mass_matrix

    M = mass_matrix(mesh)
    one = np.ones(mesh.n_vertices)
    return float(one @ (M @ nodal) / (one @ (M @ one)))


@dataclass
class Consistency:
    lipschitz: float
    forward_errors: np.ndarray
    field_errors: np.ndarray

    @property
    def holds(self) -> bool:
        return bool(np.all(self.forward_errors <= 2 * self.lipschitz * self.field_errors))


def empirical_lipschitz(mesh: Mesh, data: CalderonDataset, check: np.ndarray) -> float:
    """max ||Lambda_a - Lambda_b||_{W_mu} / ||a - b||_{L^2} over pairs of the dataset."""
    from .fem import mass_matrix

    M = mass_matrix(mesh)
    A = data.nodal()
    raw = [DtNMatrix(G, "orthonormal", data.K).to_basis("raw").entries for G in data.matrices]
    best = 0.0
    for i in range(len(data)):
        for j in range(i):
            d = A[i] - A[j]
            l2 = float(np.sqrt(d @ (M @ d)))
            if l2 > 0:
                best = max(best, wmu_norm(raw[i] - raw[j], check).norm / l2)
    return best


def inverse_direct_consistency(mesh: Mesh, model: InverseModel, data: CalderonDataset, idx,
                               field_errors, mu: GaussianMeasureSpec, n_mu: int = 256,
                               seed: int = 0) -> Consistency:
    """Map reconstructions back through the forward solver and compare in W_mu.

    Reconstructed fields are floored at a small positive value so the
    forward problem stays admissible.
    """
    check = sample_boundary_coeffs(mu, n_mu, seed)
    lip = empirical_lipschitz(mesh, data, check)
    out = []
    for i in idx:
        f, _ = model.predict(data.matrices[i])
        f = np.maximum(f, 1e-3)
        G = gamma(mesh, ConductivityField(f, (float(f.min()), float(f.max()))), data.K)
        diff = G.to_basis("raw").entries - DtNMatrix(data.matrices[i], "orthonormal", data.K).to_basis("raw").entries
        out.append(wmu_norm(diff, check).norm)
    return Consistency(lip, np.array(out), np.asarray(field_errors, dtype=float))
