"""Symmetric positive definite tensors, anisotropy measures and metric schemes.

Diffusion tensors live on the SPD manifold S+(d) with d = 2 or 3. This module
provides the scalar machinery everything else builds on: eigendecomposition
with a fixed (descending) ordering, anisotropy measures, sigmoidal activation
functions, the adjugate, and the conversion of a diffusion tensor into a
Riemannian metric tensor under one of three schemes:

* ``inverse``    g = D^-1
* ``adjugate``   g = det(D) * D^-1
* ``beta``       g = beta^-p * D^-n   with beta = activation(anisotropy(D))

The beta scheme keys the metric on tensor *shape* (anisotropy) rather than
size, so isotropic regions are expensive to traverse no matter how large their
diffusivity is, while the D^-n factor keeps the cheap direction aligned with
the principal eigenvector.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "SpdTensor",
    "EigenDecomposition",
    "MetricScheme",
    "eig_sym",
    "hilbert_anisotropy",
    "anisotropy_scalar",
    "activation",
    "adjugate",
    "metric_from_tensor",
]

# Unique-entry index pairs, row-major upper triangle.
_PAIRS_2D = ((0, 0), (0, 1), (1, 1))
_PAIRS_3D = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def _pairs(dim):
    if dim == 2:
        return _PAIRS_2D
    if dim == 3:
        return _PAIRS_3D
    raise ValueError(f"dim must be 2 or 3, got {dim}")


def entries_to_matrix(entries):
    """Expand unique upper-triangle entries to a full symmetric matrix."""
    entries = np.asarray(entries, dtype=float)
    dim = {3: 2, 6: 3}.get(entries.shape[-1])
    if dim is None:
        raise ValueError(f"expected 3 or 6 unique entries, got {entries.shape[-1]}")
    m = np.zeros(entries.shape[:-1] + (dim, dim))
    for k, (i, j) in enumerate(_pairs(dim)):
        m[..., i, j] = entries[..., k]
        m[..., j, i] = entries[..., k]
    return m


def matrix_to_entries(matrix):
    """Collapse a symmetric matrix to its unique upper-triangle entries."""
    matrix = np.asarray(matrix, dtype=float)
    dim = matrix.shape[-1]
    return np.stack([matrix[..., i, j] for i, j in _pairs(dim)], axis=-1)


def _assert_spd(matrix, what="matrix"):
    # Sylvester criterion on leading principal minors; cheaper than eigh
    # and exact for the 2x2/3x3 sizes used here.
    d = matrix.shape[-1]
    if matrix[0, 0] <= 0.0:
        raise ValueError(f"{what} is not positive definite")
    minor2 = matrix[0, 0] * matrix[1, 1] - matrix[0, 1] * matrix[1, 0]
    if minor2 <= 0.0:
        raise ValueError(f"{what} is not positive definite")
    if d == 3 and np.linalg.det(matrix) <= 0.0:
        raise ValueError(f"{what} is not positive definite")


@dataclass(frozen=True)
class SpdTensor:
    """A symmetric positive definite tensor stored by its unique entries.

    Entries are ordered row-major over the upper triangle:
    (xx, xy, yy) in 2D, (xx, xy, xz, yy, yz, zz) in 3D. Symmetry therefore
    holds by construction; positive definiteness is checked at creation.
    """

    entries: tuple

    def __post_init__(self):
        ent = tuple(float(v) for v in self.entries)
        if len(ent) not in (3, 6):
            raise ValueError(f"expected 3 or 6 unique entries, got {len(ent)}")
        object.__setattr__(self, "entries", ent)
        _assert_spd(entries_to_matrix(np.array(ent)), "tensor")

    @classmethod
    def from_matrix(cls, matrix, atol=1e-10):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
        if matrix.shape[0] not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {matrix.shape[0]}")
        scale = max(np.abs(matrix).max(), 1.0)
        if np.abs(matrix - matrix.T).max() > atol * scale:
            raise ValueError("matrix is not symmetric")
        return cls(tuple(matrix_to_entries(matrix)))

    @classmethod
    def isotropic(cls, lam, dim=3):
        return cls.from_matrix(float(lam) * np.eye(dim))

    @property
    def dim(self):
        return 2 if len(self.entries) == 3 else 3

    @cached_property
    def matrix(self):
        m = entries_to_matrix(np.array(self.entries))
        m.setflags(write=False)
        return m

    def __array__(self, dtype=None, copy=None):
        arr = np.array(self.matrix, dtype=dtype)
        return arr


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues in descending order with matching orthonormal columns."""

    values: np.ndarray
    vectors: np.ndarray

    @property
    def principal(self):
        return self.vectors[:, 0]


def eig_sym(tensor):
    """Eigendecompose a symmetric tensor, eigenvalues descending.

    Parameters
    ----------
    tensor : SpdTensor or (d, d) array_like
        Symmetric matrix. Positive definiteness is not required here; the
        anisotropy measures need it but e.g. log-domain intermediates do not.

    Returns
    -------
    EigenDecomposition
        ``values[0]`` is the largest eigenvalue and ``vectors[:, k]`` the unit
        eigenvector for ``values[k]``.
    """
    m = np.asarray(tensor, dtype=float)
    w, v = np.linalg.eigh(m)
    return EigenDecomposition(values=w[::-1].copy(), vectors=v[:, ::-1].copy())


def eigh_descending(mats):
    """Batched eigh with descending eigenvalues, for (..., d, d) stacks."""
    w, v = np.linalg.eigh(mats)
    return w[..., ::-1], v[..., :, ::-1]


def hilbert_anisotropy(tensor):
    """log(lambda_max / lambda_min); zero iff the tensor is isotropic.

    Scale invariant (HA(cT) = HA(T)) and unbounded as the tensor degenerates,
    which is what makes it a useful activation input: it saturates the
    sigmoids only for genuinely elongated tensors.
    """
    w = eig_sym(tensor).values
    if w[-1] <= 0.0:
        raise ValueError("Hilbert anisotropy needs a positive definite tensor")
    return float(np.log(w[0] / w[-1]))


def _fa_from_values(w):
    d = w.shape[-1]
    mean = w.mean(axis=-1, keepdims=True)
    dev2 = ((w - mean) ** 2).sum(axis=-1)
    norm2 = (w**2).sum(axis=-1)
    return np.sqrt(d / (d - 1.0) * dev2 / norm2)


def anisotropy_scalar(tensor, kind):
    """Scalar anisotropy / size measure of an SPD tensor.

    Parameters
    ----------
    tensor : SpdTensor or (d, d) array_like
    kind : {'ha', 'fa', 'md', 'ra'}
        Hilbert anisotropy, fractional anisotropy, mean diffusivity or
        relative anisotropy.
    """
    w = eig_sym(tensor).values
    if w[-1] <= 0.0:
        raise ValueError("anisotropy measures need a positive definite tensor")
    kind = kind.lower()
    if kind == "ha":
        return float(np.log(w[0] / w[-1]))
    if kind == "fa":
        return float(_fa_from_values(w))
    if kind == "md":
        return float(w.mean())
    if kind == "ra":
        mean = w.mean()
        return float(np.sqrt(((w - mean) ** 2).sum() / len(w)) / mean)
    raise ValueError(f"unknown anisotropy kind {kind!r}")


def activation(x, kind="s1"):
    """Sigmoidal activation mapping anisotropy to a (0, 1) scale factor.

    Three variants::

        s1(x) = tanh(x)
        s2(x) = 1 / (1 + exp(-x/2))
        s3(x) = x / sqrt(1 + x^2)

    All are monotone on x >= 0 with s1, s3 -> 0 and s2 -> 1/2 at 0.
    """
    x = np.asarray(x, dtype=float)
    kind = kind.lower()
    if kind == "s1":
        out = np.tanh(x)
    elif kind == "s2":
        out = 1.0 / (1.0 + np.exp(-0.5 * x))
    elif kind == "s3":
        out = x / np.sqrt(1.0 + x * x)
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return float(out) if out.ndim == 0 else out


def adjugate(tensor):
    """Adjugate det(T) * T^-1 of an SPD tensor, returned as an SpdTensor.

    For eigenvalues (a, b, c) the adjugate has eigenvalues (bc, ac, ab) on the
    same eigenvectors, so it penalizes motion across a fiber by the product of
    the transverse diffusivities.
    """
    m = np.asarray(tensor, dtype=float)
    w, v = np.linalg.eigh(m)
    adj_vals = np.prod(w) / w
    out = (v * adj_vals) @ v.T
    return SpdTensor.from_matrix(0.5 * (out + out.T))


@dataclass(frozen=True)
class MetricScheme:
    """Recipe turning a diffusion tensor into a Riemannian metric tensor.

    variant 'inverse' ignores every other field; 'adjugate' likewise.
    For 'beta', ``g = clamp(activation(anisotropy(D)), beta_floor)^-p * D^-n``.
    """

    variant: str = "beta"
    p: float = 2.0
    n: float = 2.0
    activation: str = "s1"
    anisotropy: str = "ha"
    beta_floor: float = 1e-3

    def __post_init__(self):
        if self.variant not in ("inverse", "adjugate", "beta"):
            raise ValueError(f"unknown metric variant {self.variant!r}")
        if self.p < 1.0 or self.n < 1.0:
            raise ValueError("metric exponents require p >= 1 and n >= 1")
        if self.anisotropy not in ("ha", "fa"):
            raise ValueError("beta scaling supports 'ha' or 'fa' anisotropy")
        if self.activation not in ("s1", "s2", "s3"):
            raise ValueError(f"unknown activation kind {self.activation!r}")
        if not 0.0 < self.beta_floor < 1.0:
            raise ValueError("beta_floor must lie in (0, 1)")

    @classmethod
    def inverse(cls):
        return cls(variant="inverse")

    @classmethod
    def adjugate(cls):
        return cls(variant="adjugate")

    @classmethod
    def beta_scaled(cls, p=2.0, n=2.0, activation="s1", anisotropy="ha",
                    beta_floor=1e-3):
        return cls(variant="beta", p=p, n=n, activation=activation,
                   anisotropy=anisotropy, beta_floor=beta_floor)


def metrics_from_tensors(mats, scheme):
    """Vectorized metric conversion for a (..., d, d) stack of SPD matrices.

    This is the hot path of the geodesic engine; everything runs through one
    batched eigendecomposition. Returns a stack of symmetric matrices of the
    same shape.
    """
    mats = np.asarray(mats, dtype=float)
    w, v = eigh_descending(mats)
    if np.any(w[..., -1] <= 0.0):
        raise ValueError("metric conversion needs positive definite tensors")

    if scheme.variant == "inverse":
        vals = 1.0 / w
    elif scheme.variant == "adjugate":
        vals = np.prod(w, axis=-1, keepdims=True) / w
    else:
        if scheme.anisotropy == "ha":
            aniso = np.log(w[..., 0] / w[..., -1])
        else:
            aniso = _fa_from_values(w)
        beta = activation(aniso, scheme.activation)
        beta = np.maximum(beta, scheme.beta_floor)
        scale = beta ** (-scheme.p)
        vals = w ** (-scheme.n) * scale[..., None]

    out = np.einsum("...ik,...k,...jk->...ij", v, vals, v)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def metric_from_tensor(tensor, scheme):
    """Convert one diffusion tensor into its metric tensor under a scheme.

    Parameters
    ----------
    tensor : SpdTensor or (d, d) array_like
    scheme : MetricScheme

    Returns
    -------
    SpdTensor
        The metric tensor g. Shares eigenvectors with the input; eigenvalue
        order is reversed (the principal diffusion direction is the cheapest
        metric direction).
    """
    m = np.asarray(tensor, dtype=float)
    return SpdTensor.from_matrix(metrics_from_tensors(m, scheme))
