"""Coefficient-space models of H^{1/2}, H^{-1/2} on the unit circle and L^2 on the disk.

Boundary data are stored as raw trigonometric coefficients in the order
``[const, 1c, 1s, 2c, 2s, ..., Kc, Ks]`` so that

    f(theta) = c_0 + sum_k c_kc cos(k theta) + c_ks sin(k theta).

The H^{1/2} norm is the Fourier multiplier norm
``||f||^2 = sum_i w_i c_i^2`` with ``w_0 = 2 pi`` and ``w_i = pi (1 + k^2)^{1/2}``
for a slot of frequency ``k >= 1``.  Functionals store their values on the raw
basis functions, ``F_i = F(b_i)``, so that ``F(f) = sum_i F_i c_i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

H_HALF_CIRCLE = "h_half_circle"
H_MINUS_HALF_CIRCLE = "h_minus_half_circle"
L2_DOMAIN_KL = "l2_domain_kl"


def n_modes(K: int) -> int:
    return 2 * K + 1


def truncation_of(n: int) -> int:
    if n < 1 or n % 2 == 0:
        raise ValueError(f"coefficient length must be odd and positive, got {n}")
    return (n - 1) // 2


def frequencies(K: int) -> np.ndarray:
    """Frequency k of each slot: (0, 1, 1, 2, 2, ..., K, K)."""
    return (np.arange(n_modes(K)) + 1) // 2


def mode_labels(K: int) -> list[str]:
    labels = ["const"]
    for k in range(1, K + 1):
        labels += [f"{k}c", f"{k}s"]
    return labels


def multiplier_weights(K: int) -> np.ndarray:
    k = frequencies(K).astype(float)
    w = np.pi * np.sqrt(1.0 + k**2)
    w[0] = 2.0 * np.pi
    return w


def trig_design(theta: np.ndarray, K: int) -> np.ndarray:
    """Matrix of raw basis functions evaluated at angles, shape (len(theta), 2K+1)."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty((theta.size, n_modes(K)))
    out[:, 0] = 1.0
    for k in range(1, K + 1):
        out[:, 2 * k - 1] = np.cos(k * theta)
        out[:, 2 * k] = np.sin(k * theta)
    return out


def _as_coeffs(coeffs) -> np.ndarray:
    c = np.array(coeffs, dtype=float)
    if c.ndim != 1:
        raise ValueError("coefficients must be a 1-D sequence")
    truncation_of(c.size)
    c.setflags(write=False)
    return c


@dataclass(frozen=True, eq=False)
class BoundaryFunction:
    """An element of H^{1/2}(circle), truncated at order K."""

    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _as_coeffs(self.coeffs))

    @property
    def K(self) -> int:
        return truncation_of(self.coeffs.size)

    @classmethod
    def zeros(cls, K: int) -> "BoundaryFunction":
        return cls(np.zeros(n_modes(K)))

    @classmethod
    def mode(cls, K: int, index: int, value: float = 1.0) -> "BoundaryFunction":
        c = np.zeros(n_modes(K))
        c[index] = value
        return cls(c)

    def __call__(self, theta) -> np.ndarray:
        return trig_design(np.atleast_1d(theta), self.K) @ self.coeffs

    def __add__(self, other: "BoundaryFunction") -> "BoundaryFunction":
        return BoundaryFunction(self.coeffs + other.coeffs)

    def __sub__(self, other: "BoundaryFunction") -> "BoundaryFunction":
        return BoundaryFunction(self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "BoundaryFunction":
        return BoundaryFunction(scalar * self.coeffs)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class BoundaryFunctional:
    """An element of H^{-1/2}(circle): its values on the raw trig basis."""

    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _as_coeffs(self.coeffs))

    @property
    def K(self) -> int:
        return truncation_of(self.coeffs.size)

    def __add__(self, other: "BoundaryFunctional") -> "BoundaryFunctional":
        return BoundaryFunctional(self.coeffs + other.coeffs)

    def __sub__(self, other: "BoundaryFunctional") -> "BoundaryFunctional":
        return BoundaryFunctional(self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "BoundaryFunctional":
        return BoundaryFunctional(scalar * self.coeffs)

    __rmul__ = __mul__


def _check_same_K(a, b):
    if a.K != b.K:
        raise ValueError(f"truncation mismatch: {a.K} vs {b.K}")


def h_half_norm(f: BoundaryFunction) -> float:
    w = multiplier_weights(f.K)
    return float(np.sqrt(np.sum(w * f.coeffs**2)))


def h_minus_half_norm(F: BoundaryFunctional) -> float:
    w = multiplier_weights(F.K)
    return float(np.sqrt(np.sum(F.coeffs**2 / w)))


def h_half_inner(f: BoundaryFunction, g: BoundaryFunction) -> float:
    _check_same_K(f, g)
    return float(np.sum(multiplier_weights(f.K) * f.coeffs * g.coeffs))


def pairing(F: BoundaryFunctional, f: BoundaryFunction) -> float:
    """Duality pairing F(f)."""
    _check_same_K(F, f)
    return float(F.coeffs @ f.coeffs)


def riesz_map(F: BoundaryFunctional) -> BoundaryFunction:
    """The H^{1/2} representative g of F, i.e. F(h) = <g, h>_{1/2} for all h."""
    return BoundaryFunction(F.coeffs / multiplier_weights(F.K))


def riesz_inverse(f: BoundaryFunction) -> BoundaryFunctional:
    return BoundaryFunctional(f.coeffs * multiplier_weights(f.K))


class OrthoBasis:
    """An orthonormal family in a coefficient space with a symmetric metric.

    Storage vectors have length ``dim`` and the space inner product is
    ``x^T G y``.  Subclasses provide the analysis map (inner products with
    the first ``d`` members) and the synthesis map (finite expansions).
    ``normalization`` holds positive per-member constants produced when the
    family was normalized.
    """

    kind: str
    label: str
    normalization: np.ndarray

    @property
    def size(self) -> int:
        raise NotImplementedError

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def metric_apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def analysis(self, x: np.ndarray, d: int) -> np.ndarray:
        raise NotImplementedError

    def synthesis(self, a: np.ndarray, m: int) -> np.ndarray:
        raise NotImplementedError

    def member(self, i: int) -> np.ndarray:
        a = np.zeros(i + 1)
        a[i] = 1.0
        return self.synthesis(a, i + 1)

    def inner(self, x, y) -> np.ndarray:
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        return np.sum(x * self.metric_apply(y), axis=-1)

    def norm(self, x) -> np.ndarray:
        return np.sqrt(np.maximum(self.inner(x, x), 0.0))

    def describe(self) -> dict:
        return {"kind": self.kind, "size": self.size, "label": self.label}


class DiagonalBasis(OrthoBasis):
    """Members ``weights[s]^{-1/2} * unit(s)`` for a diagonal metric, in ``order``."""

    def __init__(self, kind: str, weights, label: str = "", order=None):
        self.kind, self.label = kind, label
        self.weights = np.asarray(weights, dtype=float)
        self.order = np.arange(self.weights.size) if order is None else np.asarray(order)
        self.normalization = 1.0 / np.sqrt(self.weights[self.order])

    @property
    def size(self) -> int:
        return self.order.size

    @property
    def dim(self) -> int:
        return self.weights.size

    def metric_apply(self, x):
        return self.weights * np.asarray(x)

    def analysis(self, x, d):
        idx = self.order[:d]
        return x[..., idx] * np.sqrt(self.weights[idx])

    def synthesis(self, a, m):
        out = np.zeros(a.shape[:-1] + (self.dim,))
        out[..., self.order[:m]] = a * self.normalization[:m]
        return out


class DenseBasis(OrthoBasis):
    """Members stored as rows in storage coordinates; the metric is a (sparse) matrix."""

    def __init__(self, kind: str, members, normalization, metric, label: str = ""):
        self.kind, self.label = kind, label
        self.members = np.asarray(members, dtype=float)
        self.members.setflags(write=False)
        self.normalization = np.asarray(normalization, dtype=float)
        self.metric = metric

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    def metric_apply(self, x):
        x = np.asarray(x, dtype=float)
        return (self.metric @ x.T).T if x.ndim > 1 else self.metric @ x

    def analysis(self, x, d):
        return self.metric_apply(x) @ self.members[:d].T

    def synthesis(self, a, m):
        return a @ self.members[:m]


def circle_basis(K: int) -> OrthoBasis:
    """H^{1/2}-orthonormal trig family b_i / sqrt(w_i)."""
    return DiagonalBasis(H_HALF_CIRCLE, multiplier_weights(K), f"K={K}")


def dual_circle_basis(K: int) -> OrthoBasis:
    """H^{-1/2}-orthonormal family: Riesz images of the circle basis."""
    return DiagonalBasis(H_MINUS_HALF_CIRCLE, 1.0 / multiplier_weights(K), f"K={K}")


def gram_schmidt(candidates: np.ndarray, metric_apply, tol: float = 1e-10):
    """Orthonormalize rows of ``candidates`` under ``x^T G y`` (two passes).

    Rows that are numerically dependent on earlier ones are dropped.
    Returns (members, norms).
    """
    kept, norms = [], []
    for v in np.asarray(candidates, dtype=float):
        v0 = np.sqrt(v @ metric_apply(v))
        if v0 == 0.0:
            continue
        u = v.copy()
        for _ in range(2):
            for q in kept:
                u -= (q @ metric_apply(u)) * q
        nu = np.sqrt(u @ metric_apply(u))
        if nu <= tol * v0:
            continue
        kept.append(u / nu)
        norms.append(nu)
    return np.array(kept), np.array(norms)


def domain_basis(mesh, size: int, mass=None) -> OrthoBasis:
    """L^2(disk)-orthonormal family of nodal fields on ``mesh``.

    Candidates are Zernike-type products R(r) * {cos, sin}(j theta), ordered by
    total degree, orthonormalized by Gram-Schmidt under the P1 mass matrix.
    """
    from .fem import mass_matrix

    M = mass_matrix(mesh) if mass is None else mass
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    r = np.hypot(x, y)
    th = np.arctan2(y, x)
    cands = []
    n = 0
    while len(cands) < size + 8:
        for j in range(n % 2, n + 1, 2):
            radial = _zernike_radial(n, j, r)
            if j == 0:
                cands.append(radial)
            else:
                cands.append(radial * np.cos(j * th))
                cands.append(radial * np.sin(j * th))
        n += 1

    members, norms = gram_schmidt(np.array(cands), lambda v: M @ v)
    if members.shape[0] < size:
        raise ValueError(f"mesh too coarse for a domain basis of size {size}")
    return DenseBasis(L2_DOMAIN_KL, members[:size], norms[:size], M, f"h={mesh.h},n={size}")


def empirical_domain_basis(fields, mass, size: int, label: str = "empirical") -> OrthoBasis:
    """Karhunen-Loeve basis of sample fields: the leading eigenfunctions of
    their second-moment operator, orthonormal under ``mass``."""
    F = np.asarray(fields, dtype=float)
    L = F @ (mass @ F.T)
    vals, vecs = np.linalg.eigh(L / F.shape[0])
    order = np.argsort(vals)[::-1]
    keep = [i for i in order if vals[i] > 1e-12 * vals[order[0]]][:size]
    if len(keep) < size:
        raise ValueError(f"sample fields span only {len(keep)} dimensions, asked for {size}")
    members, norms = gram_schmidt(vecs[:, keep].T @ F, lambda v: mass @ v)
    return DenseBasis(L2_DOMAIN_KL, members[:size], norms[:size], mass, label)


def _zernike_radial(n: int, j: int, r: np.ndarray) -> np.ndarray:
    from math import comb

    out = np.zeros_like(r)
    for s in range((n - j) // 2 + 1):
        c = (-1) ** s * comb(n - s, s) * comb(n - 2 * s, (n - j) // 2 - s)
        out += c * r ** (n - 2 * s)
    return out


def _check_dim(basis: OrthoBasis, d: int):
    if not 0 <= d <= basis.size:
        raise ValueError(f"dimension {d} exceeds basis size {basis.size}")


def project(x, basis: OrthoBasis, d: int) -> np.ndarray:
    """(<x, e_i>)_{i<d}; accepts a single storage vector or stacked rows."""
    _check_dim(basis, d)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != basis.dim:
        raise ValueError(f"vector length {x.shape[-1]} does not match basis storage {basis.dim}")
    return basis.analysis(x, d)


def extend(a, basis: OrthoBasis, m: int) -> np.ndarray:
    """sum_i a_i g_i in storage coordinates."""
    _check_dim(basis, m)
    a = np.asarray(a, dtype=float)
    if a.shape[-1] != m:
        raise ValueError(f"expected {m} coefficients, got {a.shape[-1]}")
    return basis.synthesis(a, m)


def projection_tail_error(x, basis: OrthoBasis, d: int) -> float:
    x = np.asarray(x, dtype=float)
    r = x - extend(project(x, basis, d), basis, d)
    return float(basis.norm(r))
