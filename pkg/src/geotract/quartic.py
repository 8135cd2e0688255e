"""Totally symmetric 4th-order diffusion tensors.

A single 2nd-order tensor cannot represent two fiber populations in one
voxel: the least-squares fit of a crossing is a flat blob whose principal
axis bisects the fibers. A quartic profile D(g) keeps both peaks. Flattening
the tensor into a block matrix of 2nd-order tensors and reading off the
diagonal blocks splits a planar crossing into two layers, each an ordinary
SPD field that the geodesic engine can track.

Unique coefficients are stored in lexicographic order of descending axis
exponents: 3D runs xxxx, xxxy, xxxz, xxyy, xxyz, xxzz, xyyy, xyyz, xyzz,
xzzz, yyyy, yyyz, yyzz, yzzz, zzzz (15 values); 2D runs xxxx, xxxy, xxyy,
xyyy, yyyy (5 values). Expansion to the full tensor applies multinomial
multiplicities 4!/(i!j!k!).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ._envelope import decode_f64, encode_f64, read_json, write_json_atomic
from .fields import TensorField
from .spd import SpdTensor
from .tracking import point_to_region

_AXES = "xyz"


def _exponent_table(dim):
    if dim == 2:
        return tuple((i, 4 - i) for i in range(4, -1, -1))
    return tuple(
        (i, j, 4 - i - j)
        for i in range(4, -1, -1)
        for j in range(4 - i, -1, -1)
    )


_EXPONENTS = {2: _exponent_table(2), 3: _exponent_table(3)}
_MULTIPLICITIES = {
    d: np.array([math.factorial(4) // np.prod([math.factorial(e) for e in exp])
                 for exp in exps], dtype=float)
    for d, exps in _EXPONENTS.items()
}
_N_COEFFS = {2: 5, 3: 15}


def coefficient_labels(dim):
    """Index names in storage order, e.g. 'xxxy' for the (3,1,0) exponent."""
    return tuple(
        "".join(_AXES[a] * e for a, e in enumerate(exp))
        for exp in _EXPONENTS[dim]
    )


def _full_index_map(dim):
    """(d,d,d,d) array mapping each index tuple to its coefficient slot."""
    lookup = {exp: m for m, exp in enumerate(_EXPONENTS[dim])}
    idx = np.empty((dim,) * 4, dtype=int)
    for multi in np.ndindex(*(dim,) * 4):
        exp = tuple(multi.count(a) for a in range(dim))
        idx[multi] = lookup[exp]
    return idx


_FULL_INDEX = {2: _full_index_map(2), 3: _full_index_map(3)}


def monomials(dim, directions):
    """Multiplicity-weighted degree-4 monomial rows.

    The design matrix of the quartic form: monomials(dim, g) @ coeffs gives
    D(g) for each direction row.
    """
    g = np.asarray(directions, dtype=float)
    cols = []
    for exp in _EXPONENTS[dim]:
        col = np.ones(g.shape[:-1])
        for axis, e in enumerate(exp):
            if e:
                col = col * g[..., axis] ** e
        cols.append(col)
    return np.stack(cols, axis=-1) * _MULTIPLICITIES[dim]


@dataclass(frozen=True)
class Tensor4:
    """Totally symmetric 4th-order tensor over unique coefficients."""

    dim: int
    coeffs: tuple

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        coeffs = tuple(float(c) for c in np.asarray(self.coeffs).ravel())
        if len(coeffs) != _N_COEFFS[self.dim]:
            raise ValueError(
                f"expected {_N_COEFFS[self.dim]} coefficients for dim "
                f"{self.dim}, got {len(coeffs)}"
            )
        object.__setattr__(self, "coeffs", coeffs)

    @cached_property
    def full(self):
        """Expanded (d,d,d,d) array; equal entries share one coefficient."""
        arr = np.asarray(self.coeffs)[_FULL_INDEX[self.dim]]
        arr.flags.writeable = False
        return arr

    @classmethod
    def from_full(cls, arr, atol=1e-10):
        arr = np.asarray(arr, dtype=float)
        dim = arr.shape[0]
        if arr.shape != (dim,) * 4 or dim not in (2, 3):
            raise ValueError(f"expected (d,d,d,d) array, got shape {arr.shape}")
        coeffs = arr.reshape(-1)[_SLOTS[dim]]
        spread = np.abs(arr - coeffs[_FULL_INDEX[dim]]).max()
        if spread > atol:
            raise ValueError(
                f"array is not totally symmetric (max deviation {spread:.3g})"
            )
        return cls(dim, tuple(coeffs))

    @classmethod
    def isotropic(cls, dim, value):
        """Constant profile: evaluates to `value` in every unit direction."""
        return sym_outer_square(np.eye(dim)) * float(value)

    def evaluate(self, directions):
        """Quartic form sum_ijkl D_ijkl g_i g_j g_k g_l, batched over rows."""
        g = np.asarray(directions, dtype=float)
        if g.shape[-1] != self.dim:
            raise ValueError(f"direction length {g.shape[-1]} != dim {self.dim}")
        vals = monomials(self.dim, g) @ np.asarray(self.coeffs)
        return float(vals) if g.ndim == 1 else vals

    def __add__(self, other):
        if not isinstance(other, Tensor4) or other.dim != self.dim:
            return NotImplemented
        return Tensor4(self.dim, tuple(a + b for a, b in
                                       zip(self.coeffs, other.coeffs)))

    def __mul__(self, scalar):
        return Tensor4(self.dim, tuple(c * float(scalar) for c in self.coeffs))

    __rmul__ = __mul__


def _flat_slots(dim):
    """Flat indices of one representative entry per unique coefficient."""
    flat = _FULL_INDEX[dim].reshape(-1)
    slots = np.zeros(_N_COEFFS[dim], dtype=int)
    for pos in range(flat.size - 1, -1, -1):
        slots[flat[pos]] = pos
    return slots


_SLOTS = {2: _flat_slots(2), 3: _flat_slots(3)}


def sym_outer_square(mat):
    """Symmetrized outer square of a symmetric matrix.

    S_abcd = (D_ab D_cd + D_ac D_bd + D_ad D_bc) / 3; evaluates to
    (g' D g)^2 along unit g. The building block for single-fiber quartic
    profiles and the isotropic background.
    """
    d = np.asarray(mat, dtype=float)
    full = (np.einsum("ab,cd->abcd", d, d)
            + np.einsum("ac,bd->abcd", d, d)
            + np.einsum("ad,bc->abcd", d, d)) / 3.0
    return Tensor4.from_full(full)


def sym_outer_square_coeffs(mats):
    """Coefficient rows of the symmetrized outer square, batched."""
    m = np.asarray(mats, dtype=float)
    d = m.shape[-1]
    full = (np.einsum("nab,ncd->nabcd", m, m)
            + np.einsum("nac,nbd->nabcd", m, m)
            + np.einsum("nad,nbc->nabcd", m, m)) / 3.0
    return full.reshape(m.shape[0], -1)[:, _SLOTS[d]]


def fit_tensor4_coeffs(signals, gradients, bvalue, s0):
    """Batched least-squares quartic coefficients, one row per signal row.

    Solves y = (log s0 - log S)/b against the multiplicity-weighted degree-4
    monomial design, all rows against the shared design at once. Signals
    must be positive and the gradient set must span the coefficient space.
    """
    signals = np.asarray(signals, dtype=float)
    gradients = np.asarray(gradients, dtype=float)
    if gradients.ndim != 2 or gradients.shape[1] not in (2, 3):
        raise ValueError(f"gradients must be (n, 2|3), got {gradients.shape}")
    dim = gradients.shape[1]
    if signals.ndim != 2 or signals.shape[1] != gradients.shape[0]:
        raise ValueError("signals must be (n_rows, n_gradients)")
    if np.any(signals <= 0.0):
        raise ValueError("signals must be positive for the log-domain fit")
    if bvalue <= 0.0 or s0 <= 0.0:
        raise ValueError("bvalue and s0 must be positive")
    design = monomials(dim, gradients)
    y = (np.log(s0) - np.log(signals)) / float(bvalue)
    coeffs, _, rank, _ = np.linalg.lstsq(design, y.T, rcond=None)
    if rank < _N_COEFFS[dim]:
        raise ValueError(
            f"rank-deficient design: rank {rank} < {_N_COEFFS[dim]} "
            "unknowns; gradients do not span the quartic space"
        )
    return coeffs.T


def fit_tensor4(signals, gradients, bvalue, s0):
    """Least-squares quartic tensor for one voxel's attenuations."""
    signals = np.asarray(signals, dtype=float)
    if signals.ndim != 1:
        raise ValueError("expected one signal per gradient; see "
                         "fit_tensor4_coeffs for batches")
    coeffs = fit_tensor4_coeffs(signals[None], gradients, bvalue, s0)
    return Tensor4(np.asarray(gradients).shape[1], tuple(coeffs[0]))


@dataclass(frozen=True)
class FlattenedTensor4:
    """(d^2, d^2) block matrix; block (a,b) entry (i,j) holds D_abij."""

    dim: int
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (self.dim ** 2,) * 2:
            raise ValueError(f"expected {(self.dim ** 2,) * 2}, got {m.shape}")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    def block(self, a, b):
        d = self.dim
        return self.matrix[a * d:(a + 1) * d, b * d:(b + 1) * d]

    def to_tensor4(self):
        d = self.dim
        full = self.matrix.reshape(d, d, d, d).transpose(0, 2, 1, 3)
        return Tensor4.from_full(full)


def flatten(t4):
    d = t4.dim
    matrix = t4.full.transpose(0, 2, 1, 3).reshape(d * d, d * d)
    return FlattenedTensor4(d, matrix)


def _clamped_blocks(blocks, floor_scale, context=""):
    """Clamp near-zero eigenvalues; reject decidedly indefinite blocks.

    The flattening theory promises PSD diagonal blocks, but least-squares
    fits under noise can dip marginally negative. The rejection threshold
    scales with the summed block trace, so near-null blocks of a clean
    single-fiber tensor pass instead of tripping on their own tiny trace.
    """
    blocks = np.asarray(blocks, dtype=float)
    w, v = np.linalg.eigh(blocks)
    limit = -1e-6 * np.maximum(floor_scale, 0.0)
    if np.any(w < limit):
        raise ValueError(
            f"diagonal block is not positive semidefinite{context}: "
            f"eigenvalue {w.min():.3g} below tolerance"
        )
    w = np.maximum(w, 1e-12)
    out = np.einsum("...ij,...j,...kj->...ik", v, w, v)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def diagonal_components(t4):
    """Per-axis diagonal blocks D_aa.. as SPD tensors.

    For a crossing of two fibers, the x block peaks along the fiber closer
    to x and the y block along the other; each is trackable on its own.
    """
    d = t4.dim
    blocks = np.stack([t4.full[a, a] for a in range(d)])
    scale = float(np.trace(blocks, axis1=-2, axis2=-1).sum())
    return tuple(SpdTensor.from_matrix(m)
                 for m in _clamped_blocks(blocks, scale))


def diagonal_sum(t4):
    """Sum of the diagonal blocks: a 2nd-order summary of the quartic."""
    d = t4.dim
    total = sum(t4.full[a, a] for a in range(d))
    return SpdTensor.from_matrix(
        _clamped_blocks(total[None], float(np.trace(total)))[0]
    )


def odf_maxima(t4, resolution_deg=1.0):
    """Directions of local maxima of the quartic profile, strongest first.

    Discrete search on a uniform angular grid; antipodal duplicates are
    folded and maxima closer than 5 degrees merge into the stronger one.
    Crossings tighter than about 60 degrees blur into a single lobe; the
    diagonal components stay separable well below that.
    """
    if resolution_deg <= 0.0 or resolution_deg > 30.0:
        raise ValueError("resolution must be in (0, 30] degrees")
    if t4.dim == 2:
        cands = _circle_maxima(t4, resolution_deg)
    else:
        cands = _sphere_maxima(t4, resolution_deg)
    return _merge_maxima(cands)


def _circle_maxima(t4, res):
    n = max(8, int(round(180.0 / res)))
    theta = np.arange(n) * (np.pi / n)
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    vals = t4.evaluate(dirs)
    # ring over half the circle wraps onto itself antipodally
    keep = (vals > np.roll(vals, 1)) & (vals >= np.roll(vals, -1))
    return [(vals[i], dirs[i]) for i in np.flatnonzero(keep)]


def _sphere_maxima(t4, res):
    n_pol = max(4, int(round(180.0 / res)))
    n_az = 2 * n_pol
    pol = np.arange(1, n_pol) * (np.pi / n_pol)
    az = np.arange(n_az) * (2.0 * np.pi / n_az)
    pp, aa = np.meshgrid(pol, az, indexing="ij")
    dirs = np.stack(
        [np.sin(pp) * np.cos(aa), np.sin(pp) * np.sin(aa), np.cos(pp)],
        axis=-1,
    )
    vals = t4.evaluate(dirs.reshape(-1, 3)).reshape(pp.shape)
    pole_vals = (t4.evaluate(np.array([0.0, 0.0, 1.0])),
                 t4.evaluate(np.array([0.0, 0.0, -1.0])))
    padded = np.vstack([
        np.full((1, n_az), pole_vals[0]),
        vals,
        np.full((1, n_az), pole_vals[1]),
    ])
    center = padded[1:-1]
    keep = np.ones_like(center, dtype=bool)
    keep &= center > np.roll(center, 1, axis=1)
    keep &= center >= np.roll(center, -1, axis=1)
    up, dn = padded[:-2], padded[2:]
    for neighbor in (
        up, dn,
        np.roll(up, 1, axis=1), np.roll(up, -1, axis=1),
        np.roll(dn, 1, axis=1), np.roll(dn, -1, axis=1),
    ):
        keep &= center >= neighbor
    cands = [(vals[i, j], dirs[i, j])
             for i, j in zip(*np.nonzero(keep))]
    for sign, pv in zip((1.0, -1.0), pole_vals):
        ring = vals[0] if sign > 0 else vals[-1]
        if pv >= ring.max():
            cands.append((pv, np.array([0.0, 0.0, sign])))
    return cands


def _merge_maxima(cands, merge_deg=5.0):
    cos_merge = np.cos(np.deg2rad(merge_deg))
    kept = []
    for val, g in sorted(cands, key=lambda c: -c[0]):
        g = g / np.linalg.norm(g)
        if any(abs(g @ h) >= cos_merge for _, h in kept):
            continue
        kept.append((val, g))
    return np.array([g for _, g in kept]).reshape(len(kept), -1)


# ---------------------------------------------------------------------------
# fields of quartic tensors


@dataclass(frozen=True)
class Tensor4Field:
    """Regular grid of 4th-order tensors, one coefficient row per voxel.

    Same grid conventions as TensorField: dims (nx, ny[, nz]), voxel centers
    at origin + index * spacing, voxels flattened in C order.
    """

    dims: tuple
    spacing: tuple
    origin: tuple
    coeffs: np.ndarray

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3) or any(n < 1 for n in dims):
            raise ValueError(f"dims must be 2 or 3 positive sizes, got {dims}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != len(dims) or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be {len(dims)} positive steps")
        if len(origin) != len(dims):
            raise ValueError(f"origin must have {len(dims)} components")
        coeffs = np.array(self.coeffs, dtype=float)
        expected = (int(np.prod(dims)), _N_COEFFS[len(dims)])
        if coeffs.shape != expected:
            raise ValueError(f"coeffs must be {expected}, got {coeffs.shape}")
        if not np.isfinite(coeffs).all():
            raise ValueError("coefficients must be finite")
        coeffs.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def from_array(cls, grid, spacing=None, origin=None):
        grid = np.asarray(grid, dtype=float)
        dims = grid.shape[:-1]
        spacing = spacing if spacing is not None else (1.0,) * len(dims)
        origin = origin if origin is not None else (0.0,) * len(dims)
        return cls(dims, spacing, origin, grid.reshape(-1, grid.shape[-1]))

    @property
    def dim(self):
        return len(self.dims)

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))

    def flat_index(self, idx):
        flat = 0
        for n, i in zip(self.dims, idx):
            if not 0 <= i < n:
                raise IndexError(f"voxel index {tuple(idx)} outside {self.dims}")
            flat = flat * n + i
        return flat

    def tensor4_at(self, idx):
        return Tensor4(self.dim, tuple(self.coeffs[self.flat_index(idx)]))

    def voxel_center(self, idx):
        return np.asarray(self.origin) + np.asarray(idx) * np.asarray(self.spacing)

    def grid_view(self):
        return self.coeffs.reshape(*self.dims, -1)


def diagonal_component_fields(field4):
    """One TensorField per axis from the voxelwise diagonal blocks."""
    d = field4.dim
    full = field4.coeffs[:, _FULL_INDEX[d]]
    blocks = np.stack([full[:, a, a] for a in range(d)])
    scale = np.trace(blocks, axis1=-2, axis2=-1).sum(axis=0)
    cleaned = _clamped_blocks(blocks, scale[:, None], context=" in field")
    return tuple(
        TensorField(field4.dims, field4.spacing, field4.origin, cleaned[a])
        for a in range(d)
    )


def track_crossing(field4, seeds, target, params,
                   bidirectional=False, threads=1):
    """Two-layer geodesic tracking through a planar crossing.

    Splits the quartic field into its x- and y-diagonal component fields and
    runs point-to-region tracking on each independently; returns the pair of
    results in axis order. Planar fields only: two diagonal blocks give two
    unambiguous layers, which is what makes the decomposition useful.
    """
    if field4.dim != 2:
        raise ValueError("crossing decomposition is defined for planar fields")
    layers = diagonal_component_fields(field4)
    return tuple(
        point_to_region(layer, seeds, target, params,
                        bidirectional=bidirectional, threads=threads)
        for layer in layers
    )


# ---------------------------------------------------------------------------
# file format


def save_field4(field4, path):
    """Write a quartic field as a self-contained JSON document.

    Same envelope as the 2nd-order format with order 4; coefficients per
    voxel in the documented lexicographic order, little-endian float64
    base64. Round-trips bit-exactly.
    """
    doc = {
        "format": "tensor_field",
        "order": 4,
        "dim": field4.dim,
        "dims": list(field4.dims),
        "spacing": list(field4.spacing),
        "origin": list(field4.origin),
        "entry_order": list(coefficient_labels(field4.dim)),
        "data_b64": encode_f64(field4.coeffs),
    }
    write_json_atomic(path, doc)


def load_field4(path):
    doc = read_json(path)
    if doc.get("format") != "tensor_field" or doc.get("order") != 4:
        raise ValueError(f"{path}: not a 4th-order tensor field file")
    dim = int(doc["dim"])
    if dim not in (2, 3):
        raise ValueError(f"{path}: unsupported dim {dim}")
    if list(doc.get("entry_order", [])) != list(coefficient_labels(dim)):
        raise ValueError(f"{path}: unexpected coefficient order")
    dims = tuple(int(n) for n in doc["dims"])
    coeffs = decode_f64(doc["data_b64"], (int(np.prod(dims)), _N_COEFFS[dim]))
    return Tensor4Field(
        dims=dims,
        spacing=tuple(float(s) for s in doc["spacing"]),
        origin=tuple(float(o) for o in doc["origin"]),
        coeffs=coeffs,
    )
