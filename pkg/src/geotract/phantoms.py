"""Synthetic fiber phantoms and the diffusion signal pipeline.

Ground truth for every experiment: parametric fiber curves rasterized onto a
grid of prolate tensors, signal synthesis S = S0 exp(-b D(g)) at 2nd or 4th
order, Rician corruption with reproducible per-voxel noise streams, and
log-linear refitting back to tensors. Crossing voxels carry the Euclidean
mean of the per-fiber tensors at 2nd order (the classic single-tensor
failure) and the mean of per-fiber quartic profiles at 4th order, which is
what keeps the directions separable.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._envelope import decode_f64, encode_f64, read_json, write_json_atomic
from .fields import TensorField, load_field, save_field
from .quartic import (
    Tensor4Field,
    fit_tensor4_coeffs,
    load_field4,
    monomials,
    save_field4,
    sym_outer_square_coeffs,
)
from .spd import _pairs, entries_to_matrix

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

DEFAULT_EVALS = (1.7e-3, 2e-4, 2e-4)
DEFAULT_LAMBDA_BG = 0.7e-3


@dataclass(frozen=True)
class AcquisitionScheme:
    """Diffusion weighting and gradient directions for signal synthesis."""

    bvalue: float
    s0: float
    gradients: np.ndarray

    def __post_init__(self):
        if self.bvalue <= 0.0:
            raise ValueError(f"bvalue must be positive, got {self.bvalue}")
        if self.s0 <= 0.0:
            raise ValueError(f"s0 must be positive, got {self.s0}")
        g = np.array(self.gradients, dtype=float)
        if g.ndim != 2 or g.shape[1] not in (2, 3) or g.shape[0] < 1:
            raise ValueError(f"gradients must be (n, 2|3), got {g.shape}")
        norms = np.linalg.norm(g, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("gradients must be unit vectors")
        g.flags.writeable = False
        object.__setattr__(self, "bvalue", float(self.bvalue))
        object.__setattr__(self, "s0", float(self.s0))
        object.__setattr__(self, "gradients", g)

    @property
    def dim(self):
        return self.gradients.shape[1]

    @property
    def n_gradients(self):
        return self.gradients.shape[0]


def gradient_scheme(n, bvalue=1500.0, s0=1.0, dim=3):
    """Deterministic, evenly spread gradient directions.

    3D uses the Fibonacci sphere (uniform over both hemispheres); 2D spaces
    angles evenly over the half circle, which covers all lines through the
    origin once.
    """
    if n < 6:
        raise ValueError(f"need at least 6 gradients, got {n}")
    if dim == 3:
        k = np.arange(n)
        z = 1.0 - (2.0 * k + 1.0) / n
        r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        az = k * _GOLDEN_ANGLE
        g = np.stack([r * np.cos(az), r * np.sin(az), z], axis=1)
    elif dim == 2:
        ang = np.arange(n) * (np.pi / n)
        g = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return AcquisitionScheme(bvalue=bvalue, s0=s0, gradients=g)


# ---------------------------------------------------------------------------
# fiber curves

_SHAPE_DEFAULTS = {
    "line": {"start": (5.0, 25.0), "end": (45.0, 25.0)},
    "arc": {"center": (25.0, 25.0), "radius": 15.0,
            "start_deg": 200.0, "end_deg": 340.0},
    "ushape": {"cap_center": (24.5, 28.0), "cap_radius": 12.0,
               "leg_radius": 80.0, "leg_length": 20.0},
    "sshape": {"joint": (25.0, 25.0), "radius": 10.0},
    "sine": {"x_start": 5.0, "x_end": 45.0, "midline": 25.0,
             "amplitude": 8.0, "period": 40.0},
}


@dataclass(frozen=True)
class FiberSpec:
    """One fiber bundle: a named curve plus its tensor properties.

    thickness is the bundle diameter in voxels. evals are the on-fiber
    eigenvalues, principal first; 3D bundles must be prolate (equal
    perpendicular eigenvalues), otherwise the perpendicular frame would be
    underdetermined by a tangent alone. lambda_bg is the isotropic
    background diffusivity; all specs rasterized together must agree on it.
    """

    shape: str
    params: dict = field(default_factory=dict)
    thickness: float = 3.0
    evals: tuple = DEFAULT_EVALS
    lambda_bg: float = DEFAULT_LAMBDA_BG

    def __post_init__(self):
        if self.shape not in _SHAPE_DEFAULTS:
            raise ValueError(
                f"unknown shape {self.shape!r}; "
                f"choose from {sorted(_SHAPE_DEFAULTS)}"
            )
        unknown = set(self.params) - set(_SHAPE_DEFAULTS[self.shape])
        if unknown:
            raise ValueError(
                f"unknown parameters for {self.shape}: {sorted(unknown)}"
            )
        if self.thickness < 1.0:
            raise ValueError("thickness must be at least one voxel")
        evals = tuple(float(v) for v in self.evals)
        if len(evals) not in (2, 3):
            raise ValueError("evals needs 2 or 3 entries, principal first")
        if any(v <= 0.0 for v in evals) or any(
            a < b for a, b in zip(evals, evals[1:])
        ):
            raise ValueError("evals must be positive and non-increasing")
        if self.lambda_bg <= 0.0:
            raise ValueError("lambda_bg must be positive")
        object.__setattr__(self, "params", dict(self.params))
        object.__setattr__(self, "evals", evals)
        object.__setattr__(self, "thickness", float(self.thickness))
        object.__setattr__(self, "lambda_bg", float(self.lambda_bg))

    def resolved_params(self):
        return {**_SHAPE_DEFAULTS[self.shape], **self.params}


def _arc_samples(center, radius, phi0, phi1, ds):
    """Circle arc with analytic unit tangents along the traversal."""
    center = np.asarray(center, dtype=float)
    span = abs(phi1 - phi0) * radius
    n = max(2, int(math.ceil(span / ds)) + 1)
    phi = np.linspace(phi0, phi1, n)
    pts = center + radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    sign = 1.0 if phi1 >= phi0 else -1.0
    tans = sign * np.stack([-np.sin(phi), np.cos(phi)], axis=1)
    return pts, tans


def _sample_line(p, ds):
    start = np.asarray(p["start"], dtype=float)
    end = np.asarray(p["end"], dtype=float)
    if start.shape != end.shape or start.ndim != 1:
        raise ValueError("line start and end must have matching length")
    length = np.linalg.norm(end - start)
    if length < 1e-12:
        raise ValueError("degenerate zero-length line")
    n = max(2, int(math.ceil(length / ds)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = start + t * (end - start)
    tans = np.tile((end - start) / length, (n, 1))
    return pts, tans


def _sample_arc(p, ds):
    if p["radius"] <= 0.0:
        raise ValueError("arc radius must be positive")
    phi0, phi1 = np.deg2rad(p["start_deg"]), np.deg2rad(p["end_deg"])
    if abs(phi1 - phi0) < 1e-12:
        raise ValueError("degenerate zero-length arc")
    return _arc_samples(p["center"], p["radius"], phi0, phi1, ds)


def _sample_ushape(p, ds):
    """Inverted U: a semicircular cap joined C1 to two long inward legs."""
    cx, cy = (float(v) for v in p["cap_center"])
    cap_r = float(p["cap_radius"])
    leg_r = float(p["leg_radius"])
    leg_len = float(p["leg_length"])
    if cap_r <= 0.0 or leg_r <= 0.0 or leg_len <= 0.0:
        raise ValueError("ushape radii and leg length must be positive")
    dphi = leg_len / leg_r
    segments = [
        # left leg, bottom to the cap joint
        _arc_samples((cx - cap_r + leg_r, cy), leg_r, np.pi + dphi, np.pi, ds),
        # cap over the top
        _arc_samples((cx, cy), cap_r, np.pi, 0.0, ds),
        # right leg, cap joint to the bottom
        _arc_samples((cx + cap_r - leg_r, cy), leg_r, 0.0, -dphi, ds),
    ]
    pts = np.vstack([segments[0][0]] + [s[0][1:] for s in segments[1:]])
    tans = np.vstack([segments[0][1]] + [s[1][1:] for s in segments[1:]])
    return pts, tans


def _sample_sshape(p, ds):
    """Two opposed half circles joined C1 at the midpoint."""
    jx, jy = (float(v) for v in p["joint"])
    r = float(p["radius"])
    if r <= 0.0:
        raise ValueError("sshape radius must be positive")
    lower = _arc_samples((jx, jy - r), r, -np.pi / 2, np.pi / 2, ds)
    upper = _arc_samples((jx, jy + r), r, -np.pi / 2, -3 * np.pi / 2, ds)
    pts = np.vstack([lower[0], upper[0][1:]])
    tans = np.vstack([lower[1], upper[1][1:]])
    return pts, tans


def _sample_sine(p, ds):
    x0, x1 = float(p["x_start"]), float(p["x_end"])
    if x1 - x0 < 1e-12:
        raise ValueError("sine needs x_end > x_start")
    amp, period, mid = float(p["amplitude"]), float(p["period"]), float(p["midline"])
    if period <= 0.0:
        raise ValueError("sine period must be positive")
    n = max(2, int(math.ceil((x1 - x0) / (0.5 * ds))) + 1)
    x = np.linspace(x0, x1, n)
    w = 2.0 * np.pi / period
    y = mid + amp * np.sin(w * (x - x0))
    slope = amp * w * np.cos(w * (x - x0))
    pts = np.stack([x, y], axis=1)
    tans = np.stack([np.ones(n), slope], axis=1)
    tans /= np.linalg.norm(tans, axis=1, keepdims=True)
    return pts, tans


_SAMPLERS = {
    "line": _sample_line,
    "arc": _sample_arc,
    "ushape": _sample_ushape,
    "sshape": _sample_sshape,
    "sine": _sample_sine,
}


def sample_curve(spec, ds=0.25):
    """Dense polyline and unit tangents for a fiber spec's center curve."""
    if ds <= 0.0:
        raise ValueError("sample step must be positive")
    return _SAMPLERS[spec.shape](spec.resolved_params(), ds)


# ---------------------------------------------------------------------------
# rasterization


@dataclass(frozen=True)
class Phantom:
    """Ground-truth bundle: tensor fields plus per-fiber tangents and masks."""

    dt_field: TensorField
    t4_field: Tensor4Field | None
    tangents: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        n_vox = self.dt_field.n_voxels
        dim = self.dt_field.dim
        tangents = np.array(self.tangents, dtype=float)
        masks = np.array(self.masks, dtype=bool)
        if tangents.ndim != 3 or tangents.shape[1:] != (n_vox, dim):
            raise ValueError(
                f"tangents must be (n_fibers, {n_vox}, {dim}), "
                f"got {tangents.shape}"
            )
        if masks.shape != tangents.shape[:2]:
            raise ValueError("masks must be (n_fibers, n_voxels)")
        if self.t4_field is not None:
            same = (self.t4_field.dims == self.dt_field.dims
                    and self.t4_field.spacing == self.dt_field.spacing
                    and self.t4_field.origin == self.dt_field.origin)
            if not same:
                raise ValueError("dt_field and t4_field grids differ")
        tangents.flags.writeable = False
        masks.flags.writeable = False
        object.__setattr__(self, "tangents", tangents)
        object.__setattr__(self, "masks", masks)

    @property
    def n_fibers(self):
        return self.masks.shape[0]

    @property
    def dims(self):
        return self.dt_field.dims

    @property
    def spacing(self):
        return self.dt_field.spacing

    @property
    def origin(self):
        return self.dt_field.origin

    @property
    def dim(self):
        return self.dt_field.dim

    def fiber_mask(self, i):
        return self.masks[i]


def voxel_centers(dims, spacing, origin):
    """(n_voxels, dim) center positions in flat C order."""
    idx = np.indices(dims).reshape(len(dims), -1).T
    return np.asarray(origin) + idx * np.asarray(spacing)


def rasterize(specs, dims, spacing=None, origin=None, with_quartic=True):
    """Paint fiber specs onto a grid of diffusion tensors.

    Voxels within thickness/2 of a curve get a prolate tensor aligned with
    the nearest curve tangent; voxels inside several bundles average the
    per-fiber tensors (2nd order) and quartic profiles (4th order);
    everything else is isotropic background.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("at least one fiber spec required")
    dims = tuple(int(n) for n in dims)
    dim = len(dims)
    spacing = tuple(float(s) for s in (spacing or (1.0,) * dim))
    origin = tuple(float(o) for o in (origin or (0.0,) * dim))
    bgs = {spec.lambda_bg for spec in specs}
    if len(bgs) > 1:
        raise ValueError("specs disagree on lambda_bg")
    lam_bg = bgs.pop()

    centers = voxel_centers(dims, spacing, origin)
    n_vox = centers.shape[0]
    ds = min(spacing) / 4.0

    masks = np.zeros((len(specs), n_vox), dtype=bool)
    tangents = np.full((len(specs), n_vox, dim), np.nan)
    dt_accum = np.zeros((n_vox, dim, dim))
    iso_row = sym_outer_square_coeffs(np.eye(dim)[None])[0]
    t4_accum = np.zeros((n_vox, iso_row.size))

    for f, spec in enumerate(specs):
        evals = spec.evals
        if dim == 3:
            if len(evals) != 3 or evals[1] != evals[2]:
                raise ValueError(
                    "3D bundles need three eigenvalues with equal "
                    "perpendicular values"
                )
        lam1, lam2 = evals[0], evals[1]
        pts, tans = sample_curve(spec, ds)
        if pts.shape[1] != dim:
            raise ValueError(
                f"spec {f} is {pts.shape[1]}D but the grid is {dim}D"
            )
        dist, nearest = cKDTree(pts).query(centers)
        mask = dist <= spec.thickness * min(spacing) / 2.0
        if not mask.any():
            raise ValueError(f"spec {f} ({spec.shape}) misses the grid")
        t = tans[nearest[mask]]
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        masks[f, mask] = True
        tangents[f, mask] = t
        fiber_dt = lam2 * np.eye(dim) + (lam1 - lam2) * np.einsum(
            "vi,vj->vij", t, t
        )
        dt_accum[mask] += fiber_dt
        if with_quartic:
            t4_accum[mask] += sym_outer_square_coeffs(fiber_dt) / lam1

    counts = masks.sum(axis=0)
    on = counts > 0
    dt_data = np.tile(lam_bg * np.eye(dim), (n_vox, 1, 1))
    dt_data[on] = dt_accum[on] / counts[on, None, None]
    dt_field = TensorField(dims, spacing, origin, dt_data)

    t4_field = None
    if with_quartic:
        coeffs = np.tile(lam_bg * iso_row, (n_vox, 1))
        coeffs[on] = t4_accum[on] / counts[on, None]
        t4_field = Tensor4Field(dims, spacing, origin, coeffs)

    return Phantom(dt_field=dt_field, t4_field=t4_field,
                   tangents=tangents, masks=masks)


# ---------------------------------------------------------------------------
# signal model


def simulate_signal(phantom, scheme, order=2):
    """Noise-free signal volume S = s0 exp(-b D(g)), (n_voxels, n_gradients)."""
    if scheme.dim != phantom.dim:
        raise ValueError(
            f"scheme is {scheme.dim}D but the phantom is {phantom.dim}D"
        )
    g = scheme.gradients
    if order == 2:
        profile = np.einsum("vij,gi,gj->vg", phantom.dt_field.data, g, g)
    elif order == 4:
        if phantom.t4_field is None:
            raise ValueError("phantom has no 4th-order field")
        profile = phantom.t4_field.coeffs @ monomials(phantom.dim, g).T
    else:
        raise ValueError(f"order must be 2 or 4, got {order}")
    return scheme.s0 * np.exp(-scheme.bvalue * profile)


def add_rician(signals, sigma, rng_seed):
    """Magnitude-MRI noise: sqrt((S + n1)^2 + n2^2), n ~ Normal(0, sigma).

    Each voxel draws from its own counter-based stream keyed by rng_seed, so
    the volume is reproducible regardless of evaluation order or chunking.
    """
    signals = np.asarray(signals, dtype=float)
    if sigma < 0.0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0.0:
        return signals.copy()
    rows = np.atleast_2d(signals)
    out = np.empty_like(rows)
    key = np.array([rng_seed, 0], dtype=np.uint64)
    for v in range(rows.shape[0]):
        bitgen = np.random.Philox(
            key=key, counter=np.array([0, 0, 0, v], dtype=np.uint64)
        )
        noise = np.random.Generator(bitgen).normal(
            0.0, sigma, (2, rows.shape[1])
        )
        out[v] = np.hypot(rows[v] + noise[0], noise[1])
    return out.reshape(signals.shape)


# ---------------------------------------------------------------------------
# refitting


def fit_dti(signals, scheme):
    """Log-linear least-squares 2nd-order tensors from signal rows.

    Signals are floored at 1e-6 * s0 before the log so that noise cannot
    produce nonpositive inputs; eigenvalues are clamped at 1e-12 to keep the
    result usable as an SPD tensor. Accepts one row or a volume.
    """
    signals = np.asarray(signals, dtype=float)
    rows = np.atleast_2d(signals)
    g = scheme.gradients
    if rows.shape[1] != scheme.n_gradients:
        raise ValueError("one signal per gradient required")
    pairs = _pairs(scheme.dim)
    if scheme.n_gradients < len(pairs):
        raise ValueError(
            f"need at least {len(pairs)} gradients, got {scheme.n_gradients}"
        )
    design = np.stack(
        [(1.0 if i == j else 2.0) * g[:, i] * g[:, j] for i, j in pairs],
        axis=1,
    )
    clamped = np.maximum(rows, 1e-6 * scheme.s0)
    y = (np.log(scheme.s0) - np.log(clamped)) / scheme.bvalue
    entries, _, rank, _ = np.linalg.lstsq(design, y.T, rcond=None)
    if rank < len(pairs):
        raise ValueError(
            f"rank-deficient design: rank {rank} < {len(pairs)} unknowns; "
            "gradients do not span the tensor space"
        )
    mats = entries_to_matrix(entries.T)
    w, v = np.linalg.eigh(mats)
    w = np.maximum(w, 1e-12)
    mats = np.einsum("...ij,...j,...kj->...ik", v, w, v)
    mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    return mats[0] if signals.ndim == 1 else mats


def fit_quartic(signals, scheme):
    """Least-squares quartic coefficient rows from signal rows."""
    signals = np.asarray(signals, dtype=float)
    rows = np.atleast_2d(signals)
    coeffs = fit_tensor4_coeffs(rows, scheme.gradients, scheme.bvalue,
                                scheme.s0)
    return coeffs[0] if signals.ndim == 1 else coeffs


# ---------------------------------------------------------------------------
# disk formats


def save_scheme(scheme, path):
    doc = {
        "format": "acquisition_scheme",
        "bvalue": scheme.bvalue,
        "s0": scheme.s0,
        "dim": scheme.dim,
        "gradients": [[float(c) for c in row] for row in scheme.gradients],
    }
    write_json_atomic(path, doc)


def load_scheme(path):
    doc = read_json(path)
    if doc.get("format") != "acquisition_scheme":
        raise ValueError(f"{path}: not an acquisition scheme file")
    return AcquisitionScheme(
        bvalue=float(doc["bvalue"]),
        s0=float(doc["s0"]),
        gradients=np.asarray(doc["gradients"], dtype=float),
    )


def save_signals(signals, dims, path):
    """Signal volume: voxel-major rows, gradient-major columns."""
    signals = np.asarray(signals, dtype=float)
    dims = tuple(int(n) for n in dims)
    if signals.ndim != 2 or signals.shape[0] != int(np.prod(dims)):
        raise ValueError(
            f"signals must be ({np.prod(dims)}, n_gradients) for dims {dims}"
        )
    doc = {
        "format": "dwi_signals",
        "dims": list(dims),
        "n_gradients": signals.shape[1],
        "data_b64": encode_f64(signals),
    }
    write_json_atomic(path, doc)


def load_signals(path):
    doc = read_json(path)
    if doc.get("format") != "dwi_signals":
        raise ValueError(f"{path}: not a signal volume file")
    dims = tuple(int(n) for n in doc["dims"])
    n_grad = int(doc["n_gradients"])
    signals = decode_f64(doc["data_b64"], (int(np.prod(dims)), n_grad))
    return signals, dims


def save_phantom(phantom, out_dir):
    """Phantom bundle: dt_field.json, t4_field.json (if any), truth.json."""
    os.makedirs(out_dir, exist_ok=True)
    save_field(phantom.dt_field, os.path.join(out_dir, "dt_field.json"))
    if phantom.t4_field is not None:
        save_field4(phantom.t4_field, os.path.join(out_dir, "t4_field.json"))
    truth = {
        "format": "phantom_truth",
        "dim": phantom.dim,
        "dims": list(phantom.dims),
        "spacing": list(phantom.spacing),
        "origin": list(phantom.origin),
        "n_fibers": phantom.n_fibers,
        "tangents_b64": encode_f64(phantom.tangents),
        "masks_b64": encode_f64(phantom.masks.astype(float)),
    }
    write_json_atomic(os.path.join(out_dir, "truth.json"), truth)


def load_phantom(in_dir):
    dt_field = load_field(os.path.join(in_dir, "dt_field.json"))
    t4_path = os.path.join(in_dir, "t4_field.json")
    t4_field = load_field4(t4_path) if os.path.exists(t4_path) else None
    doc = read_json(os.path.join(in_dir, "truth.json"))
    if doc.get("format") != "phantom_truth":
        raise ValueError(f"{in_dir}: truth.json is not a phantom truth file")
    n_fibers = int(doc["n_fibers"])
    shape = (n_fibers, dt_field.n_voxels, dt_field.dim)
    tangents = decode_f64(doc["tangents_b64"], shape)
    masks = decode_f64(doc["masks_b64"], shape[:2]) > 0.5
    return Phantom(dt_field=dt_field, t4_field=t4_field,
                   tangents=tangents, masks=masks)
