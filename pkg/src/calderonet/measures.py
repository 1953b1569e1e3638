"""Gaussian sampling measures on boundary data and log-normal conductivities."""
from __future__ import annotations

import json
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .hilbert import (
    BoundaryFunction,
    OrthoBasis,
    circle_basis,
    domain_basis,
    frequencies,
    n_modes,
    truncation_of,
)


@dataclass(frozen=True)
class GaussianMeasureSpec:
    """Centered Gaussian with covariance eigenpairs (alpha_k, e_k), e_k from ``basis``.

    ``basis`` may be left unset for domain-side measures, whose basis depends
    on the mesh and is attached at sampling time.
    """

    alphas: np.ndarray
    basis: Optional[OrthoBasis] = field(default=None, compare=False)

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        if a.ndim != 1 or np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("eigenvalues must be a finite non-negative sequence")
        if np.any(np.diff(a) > 1e-15 * max(a.max(initial=0.0), 1.0)):
            raise ValueError("eigenvalues must be non-increasing")
        object.__setattr__(self, "alphas", a)
        if self.basis is not None and self.basis.size < a.size:
            raise ValueError("basis is smaller than the number of eigenvalues")

    @property
    def trace(self) -> float:
        return float(self.alphas.sum())

    def tail(self, d: int) -> float:
        """sum_{k > d} alpha_k."""
        return float(self.alphas[d:].sum())

    @classmethod
    def boundary(cls, K: int = 16, decay_s: float = 2.0) -> "GaussianMeasureSpec":
        """alpha_k = (1 + k^2)^{-s} over the H^{1/2}-orthonormal circle family."""
        k = frequencies(K).astype(float)
        return cls((1.0 + k**2) ** (-decay_s), circle_basis(K))


@dataclass(frozen=True)
class ConductivityMeasureSpec:
    """a = exp(clamp(g, -log M, log M)) with g a truncated KL Gaussian field.

    The KL eigenvalues are (1 + j)^{-decay}, j = 0 .. kl_modes - 1, over the
    L^2(disk)-orthonormal domain family of the mesh.
    """

    M: float = 10.0
    kl_modes: int = 16
    decay: float = 3.0
    m_smooth: int = 2

    def __post_init__(self):
        if self.M <= 1:
            raise ValueError("M must exceed 1")
        if self.kl_modes < 1:
            raise ValueError("kl_modes must be positive")

    @property
    def log_field_spec(self) -> GaussianMeasureSpec:
        j = np.arange(self.kl_modes, dtype=float)
        return GaussianMeasureSpec((1.0 + j) ** (-self.decay))

    @property
    def bounds(self) -> tuple:
        return (1.0 / self.M, float(self.M))


_basis_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def mesh_domain_basis(mesh, size: int) -> OrthoBasis:
    """Domain basis of at least ``size`` members, cached per mesh."""
    cached = _basis_cache.get(mesh)
    if cached is None or cached.size < size:
        cached = domain_basis(mesh, max(size, 16))
        _basis_cache[mesh] = cached
    return cached


def sample_boundary_coeffs(spec: GaussianMeasureSpec, n: int, seed) -> np.ndarray:
    """n raw-coefficient samples stacked as rows, from one seeded generator."""
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((n, spec.alphas.size))
    coords = xi * np.sqrt(spec.alphas)
    return spec.basis.synthesis(coords, spec.alphas.size)


def sample_boundary(spec: GaussianMeasureSpec, seed) -> BoundaryFunction:
    return BoundaryFunction(sample_boundary_coeffs(spec, 1, seed)[0])


def sample_conductivity(spec: ConductivityMeasureSpec, mesh, seed):
    from .fem import ConductivityField

    basis = mesh_domain_basis(mesh, spec.kl_modes)
    alphas = spec.log_field_spec.alphas
    rng = np.random.default_rng(seed)
    kl = np.sqrt(alphas) * rng.standard_normal(alphas.size)
    g = basis.synthesis(kl, alphas.size)
    logM = np.log(spec.M)
    # the outer clip only absorbs rounding in exp(-log M)
    a = np.clip(np.exp(np.clip(g, -logM, logM)), 1.0 / spec.M, spec.M)
    return ConductivityField(a, spec.bounds, kl_coeffs=kl)


@dataclass
class CovarianceEstimate:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    n_samples: int

    @property
    def residual(self) -> float:
        V, lam = self.eigenvectors, self.eigenvalues
        return float(np.abs(self.matrix @ V - V * lam).max())


def empirical_covariance(samples, basis: Optional[OrthoBasis] = None) -> CovarianceEstimate:
    """Uncentered second-moment matrix E[x x^T] in orthonormal coordinates.

    ``samples`` are BoundaryFunctions or stacked raw coefficient rows;
    eigenvalues come out non-increasing with orthonormal eigenvectors.
    """
    C = _as_rows(samples)
    if C.shape[0] < 2:
        raise ValueError("need at least two samples")
    if basis is None:
        basis = circle_basis(truncation_of(C.shape[1]))
    X = basis.analysis(C, basis.size)
    S = X.T @ X / X.shape[0]
    vals, vecs = np.linalg.eigh(S)
    order = np.argsort(vals)[::-1]
    return CovarianceEstimate(S, vals[order], vecs[:, order], X.shape[0])


def _as_rows(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return np.atleast_2d(samples).astype(float)
    samples = list(samples)
    if not samples:
        raise ValueError("empty sample collection")
    return np.array([s.coeffs if hasattr(s, "coeffs") else s for s in samples], dtype=float)


@dataclass
class MonteCarloEstimate:
    mean: float
    se: float
    n: int


def pushforward_second_moment(samples: Sequence, fn: Callable, norm: Callable) -> MonteCarloEstimate:
    """Monte Carlo mean of norm(fn(a))^2 over the samples, with its standard error."""
    vals = np.array([norm(fn(a)) ** 2 for a in samples], dtype=float)
    if vals.size == 0:
        raise ValueError("empty sample collection")
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else float("inf")
    return MonteCarloEstimate(float(vals.mean()), se, vals.size)


def write_jsonl(rows, path) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps([float(v) for v in np.asarray(r).ravel()]) + "\n")


def read_jsonl(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([json.loads(line) for line in fh if line.strip()], dtype=float)


def spec_from_config(cfg: dict) -> tuple:
    """Build (mu, eta) from {"mu": {"decay_s", "modes"}, "eta": {"M", "kl_modes", "decay"}}."""
    mu_cfg, eta_cfg = cfg.get("mu", {}), cfg.get("eta", {})
    K = truncation_of(int(mu_cfg.get("modes", n_modes(16))))
    mu = GaussianMeasureSpec.boundary(K, float(mu_cfg.get("decay_s", 2.0)))
    eta = ConductivityMeasureSpec(
        M=float(eta_cfg.get("M", 10.0)),
        kl_modes=int(eta_cfg.get("kl_modes", 16)),
        decay=float(eta_cfg.get("decay", 3.0)),
    )
    return mu, eta
