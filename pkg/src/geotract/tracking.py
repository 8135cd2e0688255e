"""Geodesic ray tracing through tensor fields.

The tracker integrates the geodesic equation

    d2x^g / dt2 + Gamma^g_ab dx^a/dt dx^b/dt = 0

as a first-order system in (x, v) with classical RK4, evaluating the metric
and its Christoffel symbols locally at every stage (no global precomputation).
Two modes:

* ``pure``    velocity evolves only through the ODE (renormalized to unit
              length after each step so step length stays step_size)
* ``hybrid``  after every step the direction is replaced by the principal
              eigenvector of the interpolated diffusion tensor, sign-matched
              to the previous direction; the ODE supplies the bending within
              each step

Seeding shoots bundles of directions from a cone around a given axis;
point-to-region experiments score tracks by whether any vertex enters an
axis-aligned target box.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from geotract._envelope import read_json, write_json_atomic, write_text_atomic
from geotract.fields import (
    OutOfBoundsError,
    _interp_batch,
    in_bounds,
    metric_stencil,
)
from geotract.spd import MetricScheme, eigh_descending

__all__ = [
    "ChristoffelSymbols",
    "ConeSeed",
    "GeodesicTrack",
    "TargetRegion",
    "TrackingParams",
    "TrackingResult",
    "christoffel",
    "geodesic_rhs",
    "rk4_step",
    "seed_cone",
    "trace",
    "point_to_region",
    "save_tracks",
    "load_tracks",
    "save_tracks_csv",
]

TERMINATIONS = ("left_grid", "max_steps", "target_hit")

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class TrackingParams:
    """Knobs of a tracing run.

    mesh is the finite-difference step used for metric derivatives; it is
    independent of step_size (both default to the 0.1 working resolution).
    """

    step_size: float = 0.1
    max_steps: int = 10000
    mode: str = "hybrid"
    scheme: MetricScheme = MetricScheme.beta_scaled()
    method: str = "euclidean"
    mesh: float = 0.1

    def __post_init__(self):
        if self.step_size <= 0.0:
            raise ValueError("step_size must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.mode not in ("pure", "hybrid"):
            raise ValueError(f"mode must be 'pure' or 'hybrid', got {self.mode!r}")
        if self.mesh <= 0.0:
            raise ValueError("mesh must be positive")


@dataclass(frozen=True)
class ConeSeed:
    """A seed point shooting ``count`` directions from a cone around axis.

    The half-aperture is arctan(sigma * radius): the cone of a disc of radius
    sigma*radius seen from unit height. The axis itself is always the first
    direction.
    """

    apex: tuple
    axis: tuple
    radius: float = 1.0
    sigma: float = 0.3
    count: int = 5

    def __post_init__(self):
        apex = tuple(float(c) for c in self.apex)
        axis = tuple(float(c) for c in self.axis)
        if len(apex) != len(axis) or len(apex) not in (2, 3):
            raise ValueError("apex and axis must both be 2- or 3-vectors")
        if np.linalg.norm(axis) == 0.0:
            raise ValueError("seed axis must be nonzero")
        if self.radius <= 0.0 or self.sigma < 0.0:
            raise ValueError("radius must be positive and sigma nonnegative")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        object.__setattr__(self, "apex", apex)
        object.__setattr__(self, "axis", axis)


@dataclass(frozen=True)
class GeodesicTrack:
    """Polyline with per-vertex unit directions and a termination reason."""

    vertices: np.ndarray
    directions: np.ndarray
    termination: str

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        d = np.asarray(self.directions, dtype=float)
        if v.shape != d.shape or v.ndim != 2:
            raise ValueError("vertices and directions must be matching (n, dim) arrays")
        if self.termination not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.termination!r}")
        v.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "directions", d)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    def length(self):
        if self.n_vertices < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1).sum())


@dataclass(frozen=True)
class TargetRegion:
    """Axis-aligned closed box."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(c) for c in self.lo)
        hi = tuple(float(c) for c in self.hi)
        if len(lo) != len(hi) or len(lo) not in (2, 3):
            raise ValueError("target corners must be matching 2- or 3-vectors")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError("target lo must not exceed hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains_any(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.all(pts >= np.array(self.lo), axis=1) & np.all(
            pts <= np.array(self.hi), axis=1
        )
        return bool(inside.any())


@dataclass(frozen=True)
class TrackingResult:
    tracks: tuple
    hits: tuple

    @property
    def hit_count(self):
        return int(sum(self.hits))

    @property
    def hit_fraction(self):
        return self.hit_count / len(self.tracks) if self.tracks else 0.0


@dataclass(frozen=True)
class ChristoffelSymbols:
    """Gamma[gamma, alpha, beta], symmetric in the lower pair."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=float)
        if arr.ndim != 3 or len(set(arr.shape)) != 1:
            raise ValueError("Christoffel array must have shape (d, d, d)")
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    def __getitem__(self, idx):
        return self.array[idx]


def christoffel(g, dg):
    """Christoffel symbols of the second kind from a metric and its gradient.

    Parameters
    ----------
    g : (d, d) array_like
        Metric tensor at the evaluation point.
    dg : (d, d, d) array_like
        dg[a][i, j] = d g_ij / d x_a.

    Returns
    -------
    ChristoffelSymbols
        Gamma^g_ab = 1/2 g^{gs} (d_a g_bs + d_b g_as - d_s g_ab), symmetric
        in (a, b). Vanishes identically for a constant metric.
    """
    g = np.asarray(g, dtype=float)
    dg = np.asarray(dg, dtype=float)
    d = g.shape[0]
    if dg.shape != (d, d, d):
        raise ValueError(f"dg must have shape {(d, d, d)}, got {dg.shape}")
    ginv = np.linalg.inv(g)
    # terms[a, b, s] = d_a g_bs + d_b g_as - d_s g_ab
    terms = dg + dg.transpose(1, 0, 2) - dg.transpose(1, 2, 0)
    gamma = 0.5 * np.einsum("gs,abs->gab", ginv, terms)
    # enforce exact lower-pair symmetry against FP remainders
    gamma = 0.5 * (gamma + gamma.transpose(0, 2, 1))
    return ChristoffelSymbols(gamma)


def geodesic_rhs(field, x, v, params):
    """RHS of the first-order geodesic system at state (x, v).

    Returns (dx, dv) with dx = v and dv^g = -Gamma^g_ab v^a v^b, evaluating
    the metric scheme and finite-difference derivatives locally.

    Raises OutOfBoundsError when x leaves the grid.
    """
    g, dg = metric_stencil(field, x, params.scheme, params.method, params.mesh)
    gamma = christoffel(g, dg)
    dv = -np.einsum("gab,a,b->g", gamma.array, v, v)
    return v.copy(), dv


def rk4_step(field, x, v, params):
    """One classical RK4 step of size params.step_size.

    All four stage positions must stay inside the grid; leaving it raises
    OutOfBoundsError (the caller keeps the last in-bounds state).
    """
    h = params.step_size
    k1x, k1v = geodesic_rhs(field, x, v, params)
    k2x, k2v = geodesic_rhs(field, x + 0.5 * h * k1x, v + 0.5 * h * k1v, params)
    k3x, k3v = geodesic_rhs(field, x + 0.5 * h * k2x, v + 0.5 * h * k2v, params)
    k4x, k4v = geodesic_rhs(field, x + h * k3x, v + h * k3v, params)
    x_new = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    v_new = v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    if not in_bounds(field, x_new):
        raise OutOfBoundsError(x_new)
    return x_new, v_new


def _orthonormal_complement(axis):
    ref = np.zeros_like(axis)
    ref[int(np.argmin(np.abs(axis)))] = 1.0
    e1 = ref - (ref @ axis) * axis
    e1 /= np.linalg.norm(e1)
    if axis.shape[0] == 2:
        return (e1,)
    return e1, np.cross(axis, e1)


def seed_cone(seed):
    """Deterministic unit directions inside the seed's cone, axis first.

    3D: a Fibonacci cap spiral (uniform-area polar spacing, golden-angle
    azimuth) whose last ring sits exactly on the cap rim. 2D: the axis plus
    count-1 angles evenly spaced over [-theta_max, +theta_max].
    """
    axis = np.array(seed.axis, dtype=float)
    axis /= np.linalg.norm(axis)
    theta_max = np.arctan(seed.sigma * seed.radius)
    dirs = [axis]
    n_extra = seed.count - 1
    if n_extra == 0:
        return np.array(dirs)
    if axis.shape[0] == 2:
        e1 = _orthonormal_complement(axis)[0]
        for ang in np.linspace(-theta_max, theta_max, n_extra):
            dirs.append(np.cos(ang) * axis + np.sin(ang) * e1)
    else:
        e1, e2 = _orthonormal_complement(axis)
        for k in range(1, n_extra + 1):
            z = 1.0 - (1.0 - np.cos(theta_max)) * k / n_extra
            r = np.sqrt(max(0.0, 1.0 - z * z))
            phi = k * _GOLDEN_ANGLE
            dirs.append(z * axis + r * (np.cos(phi) * e1 + np.sin(phi) * e2))
    return np.array(dirs)


def trace(field, seed_point, direction, params):
    """Trace one geodesic from seed_point along direction until it leaves the
    grid or exhausts max_steps.

    The initial direction is normalized; afterwards the velocity is kept at
    unit Euclidean length each step (in hybrid mode via the eigenvector
    replacement, in pure mode by rescaling the ODE-evolved velocity), so
    consecutive vertices are never more than ~step_size apart.
    """
    x = np.asarray(seed_point, dtype=float)
    if not in_bounds(field, x):
        raise OutOfBoundsError(x, "seed point is outside the grid")
    v = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("seed direction must be nonzero")
    v = v / norm

    vertices = [x]
    directions = [v]
    termination = "max_steps"
    for _ in range(params.max_steps):
        try:
            x_new, v_new = rk4_step(field, x, v, params)
        except OutOfBoundsError:
            termination = "left_grid"
            break
        x = x_new
        if params.mode == "hybrid":
            tensor = _interp_batch(field, x[None, :], params.method)[0]
            w, vec = eigh_descending(tensor)
            e1 = vec[:, 0]
            if e1 @ v < 0.0:
                e1 = -e1
            v = e1
        else:
            speed = np.linalg.norm(v_new)
            if speed == 0.0:
                raise ArithmeticError("geodesic velocity collapsed to zero")
            v = v_new / speed
        vertices.append(x)
        directions.append(v)
    return GeodesicTrack(
        vertices=np.array(vertices), directions=np.array(directions),
        termination=termination,
    )


def _merge_bidirectional(minus, plus):
    vertices = np.concatenate([minus.vertices[:0:-1], plus.vertices])
    directions = np.concatenate([-minus.directions[:0:-1], plus.directions])
    if "max_steps" in (minus.termination, plus.termination):
        termination = "max_steps"
    else:
        termination = plus.termination
    return GeodesicTrack(vertices=vertices, directions=directions,
                         termination=termination)


def _trace_job(args):
    field, apex, direction, params, bidirectional = args
    if bidirectional:
        minus = trace(field, apex, -direction, params)
        plus = trace(field, apex, direction, params)
        return _merge_bidirectional(minus, plus)
    return trace(field, apex, direction, params)


def point_to_region(field, seeds, target, params, bidirectional=False, threads=1):
    """Shoot every cone direction of every seed and score target hits.

    Tracks always run to the grid boundary (or max_steps); a track scores a
    hit when any vertex falls inside the target box, and hit tracks are
    relabeled with termination 'target_hit' so persisted files carry the
    outcome. Results are ordered by (seed, direction) index and are
    deterministic for any thread count.
    """
    if isinstance(seeds, ConeSeed):
        seeds = [seeds]
    jobs = []
    for seed in seeds:
        apex = np.array(seed.apex, dtype=float)
        for direction in seed_cone(seed):
            jobs.append((field, apex, direction, params, bidirectional))

    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw_tracks = list(pool.map(_trace_job, jobs, chunksize=1))
    else:
        raw_tracks = [_trace_job(job) for job in jobs]

    tracks, hits = [], []
    for track in raw_tracks:
        hit = target.contains_any(track.vertices)
        if hit and track.termination != "target_hit":
            track = GeodesicTrack(
                vertices=track.vertices,
                directions=track.directions,
                termination="target_hit",
            )
        tracks.append(track)
        hits.append(hit)
    return TrackingResult(tracks=tuple(tracks), hits=tuple(hits))


# ---------------------------------------------------------------------------
# persistence


def save_tracks(result, params, field, path):
    """Track set as one JSON document (params + grid provenance + tracks)."""
    doc = {
        "format": "tracks",
        "params": asdict(params),
        "grid": {
            "dims": list(field.dims),
            "spacing": list(field.spacing),
            "origin": list(field.origin),
        },
        "tracks": [
            {
                "termination": t.termination,
                "vertices": [list(map(float, v)) for v in t.vertices],
                "directions": [list(map(float, d)) for d in t.directions],
            }
            for t in result.tracks
        ],
        "hits": [bool(h) for h in result.hits],
    }
    write_json_atomic(path, doc)


def load_tracks(path):
    """Returns (tracks, hits, grid_meta, params_dict)."""
    doc = read_json(path)
    if doc.get("format") != "tracks":
        raise ValueError(f"{path}: not a track file")
    tracks = [
        GeodesicTrack(
            vertices=np.array(entry["vertices"], dtype=float),
            directions=np.array(entry["directions"], dtype=float),
            termination=entry["termination"],
        )
        for entry in doc["tracks"]
    ]
    hits = [bool(h) for h in doc.get("hits", [False] * len(tracks))]
    return tracks, hits, doc["grid"], doc["params"]


def save_tracks_csv(result, path):
    """Flat CSV: track_id, vertex_id, x, y, z (z = 0 for planar tracks)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["track_id", "vertex_id", "x", "y", "z"])
    for tid, track in enumerate(result.tracks):
        for vid, vertex in enumerate(track.vertices):
            coords = list(map(float, vertex))
            while len(coords) < 3:
                coords.append(0.0)
            writer.writerow([tid, vid, repr(coords[0]), repr(coords[1]), repr(coords[2])])
    write_text_atomic(path, buf.getvalue())
