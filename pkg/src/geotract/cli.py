"""Batch command-line surface for phantom and tracking experiments.

Subcommands: phantom, fit, track, cost-profile, angle-sweep, plot. Every
command resolves its settings in three layers (built-in defaults, then a
JSON --config file, then explicit flags, flags winning), validates the lot,
computes every output in memory, and only then writes files; an invalid
configuration exits nonzero without leaving a partial output tree. Given
the same resolved settings, reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from ._envelope import read_json, write_json_atomic, write_text_atomic
from .fields import TensorField, load_field, save_field
from .phantoms import (
    FiberSpec,
    add_rician,
    fit_dti,
    fit_quartic,
    gradient_scheme,
    load_phantom,
    load_scheme,
    load_signals,
    rasterize,
    save_phantom,
    save_scheme,
    save_signals,
    simulate_signal,
)
from .quartic import (
    Tensor4,
    Tensor4Field,
    diagonal_component_fields,
    diagonal_components,
    load_field4,
    save_field4,
)
from .spd import (
    MetricScheme,
    SpdTensor,
    activation,
    anisotropy_scalar,
    eig_sym,
    metric_from_tensor,
)
from .svgplot import field_map, line_chart, save_svg
from .tracking import (
    ConeSeed,
    TargetRegion,
    TrackingParams,
    load_tracks,
    point_to_region,
    save_tracks,
    save_tracks_csv,
)


class CliError(ValueError):
    """Configuration or input problem that should abort the command."""


# ---------------------------------------------------------------------------
# configuration plumbing


_COMMON_DEFAULTS = {"out": None, "seed": 0, "threads": 1}

_METRIC_DEFAULTS = {
    "variant": "beta",
    "p": 2.0,
    "n": 2.0,
    "activation": "s1",
    "anisotropy": "ha",
    "beta_floor": 1e-3,
}

_CONE_DEFAULTS = {"radius": 1.0, "sigma": 0.3, "count": 5}

_DEFAULTS = {
    "phantom": {
        **_COMMON_DEFAULTS,
        "shape": "ushape",
        "angle": 60.0,
        "dims": [50, 50],
        "thickness": 3.0,
        "evals": [1.7e-3, 2e-4],
        "lambda_bg": 0.7e-3,
        "fibers": None,
        "order": 2,
        "gradients": 81,
        "bvalue": 1500.0,
        "s0": 1.0,
        "noise": 0.0,
    },
    "fit": {
        **_COMMON_DEFAULTS,
        "signals": None,
        "scheme": None,
        "order": 2,
        "spacing": None,
        "origin": None,
    },
    "track": {
        **_COMMON_DEFAULTS,
        "field": None,
        "truth": None,
        "seeds": None,
        "axes": None,
        "target": None,
        "cone": dict(_CONE_DEFAULTS),
        "metric": dict(_METRIC_DEFAULTS),
        "mode": "hybrid",
        "method": "euclidean",
        "step_size": 0.1,
        "max_steps": 10000,
        "mesh": 0.1,
        "bidirectional": False,
    },
    "cost-profile": {
        **_COMMON_DEFAULTS,
        "evals": [1.7e-3, 2e-4, 2e-4],
        "rotation_deg": 90.0,
        "samples": 41,
        "method": "loge",
        "metric": {k: v for k, v in _METRIC_DEFAULTS.items()
                   if k != "variant"},
        "gap_cases": [0.7e-3, 2.1e-3],
    },
    "angle-sweep": {
        **_COMMON_DEFAULTS,
        "theta_start": 40.0,
        "theta_stop": 110.0,
        "theta_step": 5.0,
        "dims": [21, 21],
        "gradients": 81,
        "bvalue": 1500.0,
        "s0": 1.0,
        "evals": [1.7e-3, 2e-4],
        "lambda_bg": 0.7e-3,
        "thickness": 3.0,
        "noise": 0.0,
    },
    "plot": {
        **_COMMON_DEFAULTS,
        "field": None,
        "tracks": [],
        "labels": None,
    },
}


def resolve_config(command, config_path, overrides):
    """defaults <- config file <- flags; unknown config keys are fatal."""
    merged = json.loads(json.dumps(_DEFAULTS[command]))
    if config_path is not None:
        try:
            loaded = read_json(config_path)
        except FileNotFoundError:
            raise CliError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {config_path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise CliError("config file must hold a JSON object")
        for key, value in loaded.items():
            if key not in merged:
                raise CliError(
                    f"unknown config key {key!r} for command {command!r}"
                )
            if isinstance(merged[key], dict) and isinstance(value, dict):
                sub = dict(merged[key])
                for k, v in value.items():
                    if k not in sub:
                        raise CliError(f"unknown config key {key}.{k!r}")
                    sub[k] = v
                merged[key] = sub
            else:
                merged[key] = value
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    if merged.get("out") is None:
        raise CliError("an output directory is required (--out)")
    return merged


def _as_float_list(value, name, length=None):
    try:
        out = [float(v) for v in value]
    except (TypeError, ValueError):
        raise CliError(f"{name} must be a numeric list")
    if length is not None and len(out) != length:
        raise CliError(f"{name} must have {length} entries")
    return out


def _parse_number_list(text):
    return [float(part) for part in text.replace(";", ",").split(",") if part]


def _parse_point_list(text):
    points = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if chunk:
            points.append([float(v) for v in chunk.split(",")])
    return points


def _parse_target(text):
    lo, hi = text.split(":")
    return {"lo": [float(v) for v in lo.split(",")],
            "hi": [float(v) for v in hi.split(",")]}


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _metric_scheme(cfg):
    try:
        return MetricScheme(
            variant=str(cfg.get("variant", "beta")),
            p=float(cfg["p"]),
            n=float(cfg["n"]),
            activation=str(cfg["activation"]),
            anisotropy=str(cfg["anisotropy"]),
            beta_floor=float(cfg["beta_floor"]),
        )
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid metric settings: {exc}")


def _line_angle_deg(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return float("nan")
    c = abs(float(np.dot(u, v))) / (nu * nv)
    return float(np.degrees(np.arccos(min(c, 1.0))))


# ---------------------------------------------------------------------------
# phantom


def _crossing_specs(angle_deg, dims, thickness, evals, lambda_bg):
    extent = [(n - 1) for n in dims]
    center = np.array([e / 2.0 for e in extent])
    length = 1.5 * max(extent)
    half = np.radians(angle_deg) / 2.0
    specs = []
    for ang in (np.pi / 4 - half, np.pi / 4 + half):
        u = np.array([np.cos(ang), np.sin(ang)])
        specs.append(FiberSpec(
            shape="line",
            params={"start": tuple(center - length / 2 * u),
                    "end": tuple(center + length / 2 * u)},
            thickness=thickness,
            evals=tuple(evals),
            lambda_bg=lambda_bg,
        ))
    return specs


def _phantom_specs(cfg):
    dims = [int(n) for n in cfg["dims"]]
    if len(dims) != 2:
        raise CliError("phantom grids are planar: dims must have 2 entries")
    evals = _as_float_list(cfg["evals"], "evals")
    thickness = float(cfg["thickness"])
    lambda_bg = float(cfg["lambda_bg"])
    if cfg["fibers"] is not None:
        specs = []
        for entry in cfg["fibers"]:
            if not isinstance(entry, dict) or "shape" not in entry:
                raise CliError("each fiber needs at least a 'shape' key")
            spec_kwargs = {
                "shape": entry["shape"],
                "params": entry.get("params", {}),
                "thickness": float(entry.get("thickness", thickness)),
                "evals": tuple(entry.get("evals", evals)),
                "lambda_bg": float(entry.get("lambda_bg", lambda_bg)),
            }
            extra = set(entry) - {"shape", "params", "thickness", "evals",
                                  "lambda_bg"}
            if extra:
                raise CliError(f"unknown fiber keys: {sorted(extra)}")
            specs.append(FiberSpec(**spec_kwargs))
        return specs, dims
    shape = str(cfg["shape"])
    if shape == "cross":
        return _crossing_specs(float(cfg["angle"]), dims, thickness,
                               evals, lambda_bg), dims
    spec = FiberSpec(shape=shape, thickness=thickness, evals=tuple(evals),
                     lambda_bg=lambda_bg)
    return [spec], dims


def cmd_phantom(cfg):
    order = int(cfg["order"])
    if order not in (2, 4):
        raise CliError("order must be 2 or 4")
    noise = float(cfg["noise"])
    if noise < 0.0:
        raise CliError("noise sigma must be nonnegative")
    specs, dims = _phantom_specs(cfg)
    try:
        phantom = rasterize(specs, dims, with_quartic=(order == 4))
        scheme = gradient_scheme(int(cfg["gradients"]),
                                 bvalue=float(cfg["bvalue"]),
                                 s0=float(cfg["s0"]), dim=len(dims))
        signals = simulate_signal(phantom, scheme, order=order)
        if noise > 0.0:
            signals = add_rician(signals, noise * scheme.s0,
                                 rng_seed=int(cfg["seed"]))
        fitted_dt = TensorField(phantom.dims, phantom.spacing, phantom.origin,
                                fit_dti(signals, scheme))
        fitted_t4 = None
        if order == 4:
            fitted_t4 = Tensor4Field(phantom.dims, phantom.spacing,
                                     phantom.origin,
                                     fit_quartic(signals, scheme))
    except ValueError as exc:
        raise CliError(str(exc))

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    save_phantom(phantom, out)
    save_scheme(scheme, os.path.join(out, "scheme.json"))
    save_signals(signals, phantom.dims, os.path.join(out, "signals.json"))
    save_field(fitted_dt, os.path.join(out, "fitted_dt.json"))
    if fitted_t4 is not None:
        save_field4(fitted_t4, os.path.join(out, "fitted_t4.json"))


# ---------------------------------------------------------------------------
# fit


def cmd_fit(cfg):
    if cfg["signals"] is None or cfg["scheme"] is None:
        raise CliError("fit requires --signals and --scheme paths")
    order = int(cfg["order"])
    if order not in (2, 4):
        raise CliError("order must be 2 or 4")
    try:
        signals, dims = load_signals(cfg["signals"])
        scheme = load_scheme(cfg["scheme"])
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load inputs: {exc}")
    dim = len(dims)
    spacing = cfg["spacing"] or [1.0] * dim
    origin = cfg["origin"] or [0.0] * dim
    spacing = _as_float_list(spacing, "spacing", dim)
    origin = _as_float_list(origin, "origin", dim)

    try:
        if order == 2:
            fitted = TensorField(dims, spacing, origin,
                                 fit_dti(signals, scheme))
        else:
            fitted = Tensor4Field(dims, spacing, origin,
                                  fit_quartic(signals, scheme))
    except ValueError as exc:
        raise CliError(str(exc))

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    if order == 2:
        save_field(fitted, os.path.join(out, "fitted_dt.json"))
    else:
        save_field4(fitted, os.path.join(out, "fitted_t4.json"))


# ---------------------------------------------------------------------------
# track


def _field_order(path):
    try:
        doc = read_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read field file {path}: {exc}")
    if doc.get("format") != "tensor_field":
        raise CliError(f"{path}: not a tensor field file")
    return int(doc.get("order", 2))


def _build_seeds(seed_points, axes, cone, dim):
    cone_kwargs = {
        "radius": float(cone["radius"]),
        "sigma": float(cone["sigma"]),
        "count": int(cone["count"]),
    }
    seeds = []
    for point, axis in zip(seed_points, axes):
        if len(point) != dim or len(axis) != dim:
            raise CliError("seed and axis entries must match the field dim")
        seeds.append(ConeSeed(apex=tuple(point), axis=tuple(axis),
                              **cone_kwargs))
    return seeds


def _auto_axes(field, seed_points):
    """Principal diffusion direction at each seed's nearest voxel."""
    axes = []
    for point in seed_points:
        idx = field.nearest_voxel(point)
        e = eig_sym(field.tensor_at(idx))
        axes.append([float(c) for c in e.principal])
    return axes


def _deviation_stats(results, truth):
    """Mean per-vertex line angle between track direction and the nearest
    fiber tangent, over vertices that fall on a truth fiber."""
    tangents = truth.tangents
    angles = []
    for result in results:
        for track in result.tracks:
            for vertex, direction in zip(track.vertices, track.directions):
                idx = truth.dt_field.nearest_voxel(vertex)
                flat = truth.dt_field.flat_index(idx)
                best = None
                for f in range(truth.n_fibers):
                    if truth.masks[f, flat]:
                        a = _line_angle_deg(direction, tangents[f, flat])
                        if best is None or a < best:
                            best = a
                if best is not None and np.isfinite(best):
                    angles.append(best)
    if not angles:
        return None
    return float(np.mean(angles))


def _result_summary(result):
    lengths = [t.length() for t in result.tracks]
    return {
        "n_tracks": len(result.tracks),
        "hit_count": result.hit_count,
        "hit_fraction": result.hit_fraction,
        "mean_length": float(np.mean(lengths)) if lengths else 0.0,
    }


def cmd_track(cfg):
    if cfg["field"] is None:
        raise CliError("track requires a --field path")
    if cfg["seeds"] is None or cfg["target"] is None:
        raise CliError("track requires 'seeds' and 'target' settings")
    seed_points = [_as_float_list(p, "seed point") for p in cfg["seeds"]]
    if not seed_points:
        raise CliError("at least one seed point required")
    target_cfg = cfg["target"]
    if not isinstance(target_cfg, dict) or "lo" not in target_cfg \
            or "hi" not in target_cfg:
        raise CliError("target must provide 'lo' and 'hi' corners")

    params = TrackingParams(
        step_size=float(cfg["step_size"]),
        max_steps=int(cfg["max_steps"]),
        mode=str(cfg["mode"]),
        scheme=_metric_scheme(cfg["metric"]),
        method=str(cfg["method"]),
        mesh=float(cfg["mesh"]),
    )
    order = _field_order(cfg["field"])
    truth = None
    if cfg["truth"] is not None:
        try:
            truth = load_phantom(cfg["truth"])
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot load truth bundle: {exc}")

    bidir = bool(cfg["bidirectional"])
    threads = int(cfg["threads"])
    axes_cfg = cfg["axes"]

    try:
        if order == 2:
            field = load_field(cfg["field"])
            target = TargetRegion(lo=tuple(target_cfg["lo"]),
                                  hi=tuple(target_cfg["hi"]))
            axes = (axes_cfg if axes_cfg is not None
                    else _auto_axes(field, seed_points))
            seeds = _build_seeds(seed_points, axes, cfg["cone"], field.dim)
            results = [point_to_region(field, seeds, target, params,
                                       bidirectional=bidir, threads=threads)]
            layer_fields = [field]
            names = ["tracks"]
        else:
            field4 = load_field4(cfg["field"])
            if field4.dim != 2:
                raise CliError("order-4 tracking is planar only")
            target = TargetRegion(lo=tuple(target_cfg["lo"]),
                                  hi=tuple(target_cfg["hi"]))
            layer_fields = list(diagonal_component_fields(field4))
            results = []
            for layer in layer_fields:
                axes = (axes_cfg if axes_cfg is not None
                        else _auto_axes(layer, seed_points))
                seeds = _build_seeds(seed_points, axes, cfg["cone"],
                                     layer.dim)
                results.append(point_to_region(layer, seeds, target, params,
                                               bidirectional=bidir,
                                               threads=threads))
            names = ["tracks_layer1", "tracks_layer2"]
    except ValueError as exc:
        raise CliError(str(exc))

    summary = {"command": "track", "order": order, "layers": []}
    for result in results:
        entry = _result_summary(result)
        entry["mean_angular_deviation_deg"] = (
            _deviation_stats([result], truth) if truth is not None else None
        )
        summary["layers"].append(entry)
    summary["hit_fraction"] = float(
        np.mean([e["hit_fraction"] for e in summary["layers"]])
    )

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    for name, result, layer_field in zip(names, results, layer_fields):
        save_tracks(result, params, layer_field,
                    os.path.join(out, f"{name}.json"))
        save_tracks_csv(result, os.path.join(out, f"{name}.csv"))
    write_json_atomic(os.path.join(out, "summary.json"), summary)


# ---------------------------------------------------------------------------
# cost-profile


def _rotation_matrix(dim, angle_rad):
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    r = np.eye(dim)
    r[0, 0], r[0, 1], r[1, 0], r[1, 1] = c, -s, s, c
    return r


def _path_tensor(d_start, d_end, t, method):
    from .fields import loge_geodesic, sq_geodesic

    if method == "euclidean":
        return SpdTensor.from_matrix((1.0 - t) * d_start + t * d_end)
    if method == "loge":
        return loge_geodesic(d_end, d_start, t)
    if method == "sq":
        return sq_geodesic(d_start, d_end, t)
    raise CliError(f"unknown interpolation method {method!r}")


def _directional_costs(tensor, direction, metric_cfg):
    costs = {}
    for variant in ("inverse", "adjugate", "beta"):
        scheme = _metric_scheme({**metric_cfg, "variant": variant})
        g = np.asarray(metric_from_tensor(tensor, scheme), dtype=float)
        costs[variant] = float(direction @ g @ direction)
    return costs


def cmd_cost_profile(cfg):
    evals = _as_float_list(cfg["evals"], "evals")
    if len(evals) not in (2, 3) or any(v <= 0.0 for v in evals):
        raise CliError("evals must be 2 or 3 positive values")
    if sorted(evals, reverse=True) != evals:
        raise CliError("evals must be non-increasing")
    samples = int(cfg["samples"])
    if samples < 5:
        raise CliError("at least 5 path samples required")
    metric_cfg = {**cfg["metric"]}
    metric_cfg.pop("variant", None)
    p = float(metric_cfg["p"])
    floor = float(metric_cfg["beta_floor"])
    act = str(metric_cfg["activation"])
    dim = len(evals)

    d_start = np.diag(evals)
    rot = _rotation_matrix(dim, np.radians(float(cfg["rotation_deg"])))
    d_end = rot @ d_start @ rot.T

    ts = np.linspace(0.0, 1.0, samples)
    rows = []
    for t in ts:
        tensor = _path_tensor(d_start, d_end, float(t), str(cfg["method"]))
        e = eig_sym(tensor)
        ha = anisotropy_scalar(tensor, "ha")
        fa = anisotropy_scalar(tensor, "fa")
        costs = _directional_costs(tensor, e.principal, metric_cfg)
        beta_factor = float(
            max(float(activation(np.array(ha), act)), floor) ** (-p)
        )
        rows.append([float(t), float(ha), float(fa), costs["inverse"],
                     costs["adjugate"], costs["beta"], beta_factor])

    profile_csv = _csv_text(
        ["t", "ha", "fa", "cost_inverse", "cost_adjugate", "cost_beta",
         "beta_factor"],
        rows,
    )
    cost_cols = np.array([[r[3], r[4], r[5]] for r in rows])
    profile_svg = line_chart(
        ts,
        [("log10 cost (inverse)", np.log10(cost_cols[:, 0])),
         ("log10 cost (adjugate)", np.log10(cost_cols[:, 1])),
         ("log10 cost (beta-scaled)", np.log10(cost_cols[:, 2]))],
        x_label="path parameter t",
        y_label="log10 directional cost",
    )

    gap_cases = _as_float_list(cfg["gap_cases"], "gap_cases")
    if any(v <= 0.0 for v in gap_cases):
        raise CliError("gap_cases must be positive diffusivities")
    fiber_dir = np.zeros(dim)
    fiber_dir[0] = 1.0
    case_rows = []
    for case_idx, lam in enumerate(gap_cases, start=1):
        gap = SpdTensor.from_matrix(lam * np.eye(dim))
        costs = _directional_costs(gap, fiber_dir, metric_cfg)
        beta_factor = float(
            max(float(activation(np.array(0.0), act)), floor) ** (-p)
        )
        case_rows.append([case_idx, float(lam), beta_factor, costs["beta"],
                          costs["inverse"], costs["adjugate"]])
    two_case_csv = _csv_text(
        ["case", "lambda_gap", "beta_factor", "cost_beta", "cost_inverse",
         "cost_adjugate"],
        case_rows,
    )

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    write_text_atomic(os.path.join(out, "profile.csv"), profile_csv)
    save_svg(profile_svg, os.path.join(out, "profile.svg"))
    write_text_atomic(os.path.join(out, "two_case.csv"), two_case_csv)


# ---------------------------------------------------------------------------
# angle-sweep


def cmd_angle_sweep(cfg):
    start = float(cfg["theta_start"])
    stop = float(cfg["theta_stop"])
    step = float(cfg["theta_step"])
    if step <= 0.0 or stop < start:
        raise CliError("need theta_stop >= theta_start and theta_step > 0")
    thetas = np.arange(start, stop + 0.5 * step, step)
    dims = [int(n) for n in cfg["dims"]]
    if len(dims) != 2:
        raise CliError("angle sweep runs on planar grids")
    noise = float(cfg["noise"])
    if noise < 0.0:
        raise CliError("noise sigma must be nonnegative")
    evals = _as_float_list(cfg["evals"], "evals")
    thickness = float(cfg["thickness"])
    lambda_bg = float(cfg["lambda_bg"])

    try:
        scheme = gradient_scheme(int(cfg["gradients"]),
                                 bvalue=float(cfg["bvalue"]),
                                 s0=float(cfg["s0"]), dim=2)
    except ValueError as exc:
        raise CliError(str(exc))

    rows = []
    for theta in thetas:
        half = np.radians(theta) / 2.0
        u1 = np.array([np.cos(np.pi / 4 - half), np.sin(np.pi / 4 - half)])
        u2 = np.array([np.cos(np.pi / 4 + half), np.sin(np.pi / 4 + half)])
        try:
            specs = _crossing_specs(float(theta), dims, thickness, evals,
                                    lambda_bg)
            phantom = rasterize(specs, dims, with_quartic=True)
            signals = simulate_signal(phantom, scheme, order=4)
            if noise > 0.0:
                signals = add_rician(signals, noise * scheme.s0,
                                     rng_seed=int(cfg["seed"]))
            coeffs = fit_quartic(signals, scheme)
        except ValueError as exc:
            raise CliError(f"theta={theta:g}: {exc}")
        crossing = np.flatnonzero(phantom.masks.all(axis=0))
        if crossing.size == 0:
            raise CliError(f"theta={theta:g}: fibers do not overlap")
        errs1, errs2 = [], []
        for flat in crossing:
            t4 = Tensor4(2, tuple(coeffs[flat]))
            try:
                bx, by = diagonal_components(t4)
            except ValueError as exc:
                raise CliError(f"theta={theta:g}: {exc}")
            errs1.append(_line_angle_deg(eig_sym(bx).principal, u1))
            errs2.append(_line_angle_deg(eig_sym(by).principal, u2))
        rows.append([float(theta), float(np.mean(errs1)),
                     float(np.mean(errs2))])

    sweep_csv = _csv_text(["theta_deg", "err_layer1_deg", "err_layer2_deg"],
                          rows)
    arr = np.array(rows)
    if arr.shape[0] == 1:  # a single-theta sweep still gets a chart
        arr = np.vstack([arr, arr])
    sweep_svg = line_chart(
        arr[:, 0],
        [("layer 1 error", arr[:, 1]), ("layer 2 error", arr[:, 2])],
        x_label="crossing angle (deg)",
        y_label="orientation error (deg)",
    )

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    write_text_atomic(os.path.join(out, "sweep.csv"), sweep_csv)
    save_svg(sweep_svg, os.path.join(out, "sweep.svg"))


# ---------------------------------------------------------------------------
# plot


def cmd_plot(cfg):
    if cfg["field"] is None:
        raise CliError("plot requires a --field path")
    order = _field_order(cfg["field"])
    if order != 2:
        raise CliError("plot renders 2nd-order tensor fields")
    try:
        field = load_field(cfg["field"])
    except (OSError, ValueError) as exc:
        raise CliError(str(exc))
    if field.dim != 2:
        raise CliError("plot renders planar fields only")

    track_paths = cfg["tracks"] or []
    labels = cfg["labels"]
    if labels is not None and len(labels) != len(track_paths):
        raise CliError("one label per track file required")
    track_sets = []
    for path in track_paths:
        try:
            tracks, _, grid, _ = load_tracks(path)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot load tracks {path}: {exc}")
        if (tuple(grid["dims"]) != field.dims
                or tuple(grid["spacing"]) != field.spacing
                or tuple(grid["origin"]) != field.origin):
            raise CliError(
                f"mismatched grids: {path} was traced on a different field"
            )
        track_sets.append(tracks)
    if labels is None:
        labels = [os.path.splitext(os.path.basename(p))[0]
                  for p in track_paths]

    svg = field_map(field, track_sets=track_sets, track_labels=labels)

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    save_svg(svg, os.path.join(out, "map.svg"))


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub):
    sub.add_argument("--config", default=None, help="JSON settings file")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--seed", type=int, default=None, help="RNG seed")
    sub.add_argument("--threads", type=int, default=None,
                     help="worker processes for tracking")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="geotract",
        description="geodesic tractography experiments on synthetic phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom bundle")
    _add_common(p)
    p.add_argument("--shape", default=None,
                   choices=["line", "arc", "ushape", "sshape", "sine",
                            "cross"])
    p.add_argument("--angle", type=float, default=None,
                   help="crossing angle in degrees (shape=cross)")
    p.add_argument("--dims", type=_parse_number_list, default=None,
                   help="grid size, e.g. 50,50")
    p.add_argument("--order", type=int, default=None, choices=[2, 4])
    p.add_argument("--gradients", type=int, default=None)
    p.add_argument("--bvalue", type=float, default=None)
    p.add_argument("--noise", type=float, default=None,
                   help="Rician sigma relative to S0")

    p = sub.add_parser("fit", help="fit tensors to a signal volume")
    _add_common(p)
    p.add_argument("--signals", default=None)
    p.add_argument("--scheme", default=None)
    p.add_argument("--order", type=int, default=None, choices=[2, 4])

    p = sub.add_parser("track", help="run geodesic tracking to a target")
    _add_common(p)
    p.add_argument("--field", default=None)
    p.add_argument("--truth", default=None,
                   help="phantom bundle directory for deviation metrics")
    p.add_argument("--seeds", type=_parse_point_list, default=None,
                   help="semicolon-separated points, e.g. 5,8;10,8")
    p.add_argument("--target", type=_parse_target, default=None,
                   help="box corners lo:hi, e.g. 30,6:38,10")
    p.add_argument("--mode", default=None, choices=["pure", "hybrid"])
    p.add_argument("--metric-variant", dest="metric_variant", default=None,
                   choices=["inverse", "adjugate", "beta"])
    p.add_argument("--step-size", dest="step_size", type=float, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--bidirectional", action="store_true", default=None)

    p = sub.add_parser("cost-profile",
                       help="Riemannian cost along an interpolation path")
    _add_common(p)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--method", default=None,
                   choices=["euclidean", "loge", "sq"])
    p.add_argument("--rotation-deg", dest="rotation_deg", type=float,
                   default=None)

    p = sub.add_parser("angle-sweep",
                       help="crossing-angle recovery error sweep")
    _add_common(p)
    p.add_argument("--theta-start", dest="theta_start", type=float,
                   default=None)
    p.add_argument("--theta-stop", dest="theta_stop", type=float,
                   default=None)
    p.add_argument("--theta-step", dest="theta_step", type=float,
                   default=None)
    p.add_argument("--gradients", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)

    p = sub.add_parser("plot", help="tensor glyph map with track overlays")
    _add_common(p)
    p.add_argument("--field", default=None)
    p.add_argument("--tracks", action="append", default=None,
                   help="track file to overlay (repeatable)")

    return parser


_HANDLERS = {
    "phantom": cmd_phantom,
    "fit": cmd_fit,
    "track": cmd_track,
    "cost-profile": cmd_cost_profile,
    "angle-sweep": cmd_angle_sweep,
    "plot": cmd_plot,
}

_NOT_CONFIG_KEYS = {"command", "config"}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    for key, value in vars(args).items():
        if key in _NOT_CONFIG_KEYS:
            continue
        if key == "metric_variant":
            continue
        overrides[key] = value
    try:
        cfg = resolve_config(args.command, args.config, overrides)
        if getattr(args, "metric_variant", None) is not None:
            cfg["metric"] = {**cfg["metric"],
                             "variant": args.metric_variant}
        _HANDLERS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
