import numpy as np
import pytest

from geotract.phantoms import (
    AcquisitionScheme,
    FiberSpec,
    Phantom,
    add_rician,
    fit_dti,
    fit_quartic,
    gradient_scheme,
    load_phantom,
    load_scheme,
    load_signals,
    rasterize,
    sample_curve,
    save_phantom,
    save_scheme,
    save_signals,
    simulate_signal,
)
from geotract.quartic import Tensor4, diagonal_components, odf_maxima
from geotract.spd import anisotropy_scalar, eig_sym, SpdTensor

EXP_MINUS_255 = 0.07808166600115317


def crossing_specs(theta_deg, center=(10.0, 10.0), length=30.0):
    half = np.deg2rad(theta_deg) / 2.0
    specs = []
    for ang in (np.pi / 4 - half, np.pi / 4 + half):
        u = np.array([np.cos(ang), np.sin(ang)])
        c = np.asarray(center)
        specs.append(FiberSpec(
            shape="line",
            params={"start": tuple(c - length / 2 * u),
                    "end": tuple(c + length / 2 * u)},
        ))
    return specs


def line_angle(u, v):
    return np.arccos(np.clip(abs(np.dot(u, v)), 0.0, 1.0))


class TestGradientScheme:
    def test_fibonacci_81(self):
        scheme = gradient_scheme(81, bvalue=1500.0, s0=1.0)
        assert scheme.n_gradients == 81 and scheme.dim == 3
        norms = np.linalg.norm(scheme.gradients, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-12
        dots = np.clip(scheme.gradients @ scheme.gradients.T, -1.0, 1.0)
        np.fill_diagonal(dots, -1.0)
        min_angle = np.rad2deg(np.arccos(dots.max()))
        assert min_angle > 10.0

    def test_2d_even_spread(self):
        scheme = gradient_scheme(12, dim=2)
        ang = np.arctan2(scheme.gradients[:, 1], scheme.gradients[:, 0])
        assert np.allclose(np.diff(ang), np.pi / 12, atol=1e-12)
        assert ang.min() >= 0.0 and ang.max() < np.pi

    def test_deterministic(self):
        a = gradient_scheme(81)
        b = gradient_scheme(81)
        assert np.array_equal(a.gradients, b.gradients)

    def test_validation(self):
        with pytest.raises(ValueError):
            gradient_scheme(5)
        with pytest.raises(ValueError):
            gradient_scheme(10, dim=4)
        with pytest.raises(ValueError):
            AcquisitionScheme(1500.0, 1.0, np.array([[1.0, 1.0, 0.0]]))
        with pytest.raises(ValueError):
            AcquisitionScheme(-1.0, 1.0, np.eye(3))


class TestFiberSpec:
    def test_validation(self):
        with pytest.raises(ValueError, match="unknown shape"):
            FiberSpec(shape="zigzag")
        with pytest.raises(ValueError, match="unknown parameters"):
            FiberSpec(shape="line", params={"radius": 3.0})
        with pytest.raises(ValueError, match="thickness"):
            FiberSpec(shape="line", thickness=0.5)
        with pytest.raises(ValueError, match="non-increasing"):
            FiberSpec(shape="line", evals=(2e-4, 1.7e-3, 2e-4))
        with pytest.raises(ValueError):
            FiberSpec(shape="line", evals=(1.7e-3, -1e-4))

    def test_defaults_merge(self):
        spec = FiberSpec(shape="sine", params={"amplitude": 4.0})
        p = spec.resolved_params()
        assert p["amplitude"] == 4.0 and p["period"] == 40.0


class TestCurves:
    def test_line(self):
        spec = FiberSpec(shape="line",
                         params={"start": (0.0, 0.0), "end": (4.0, 3.0)})
        pts, tans = sample_curve(spec, ds=0.25)
        assert np.allclose(pts[0], [0.0, 0.0]) and np.allclose(pts[-1], [4, 3])
        assert np.allclose(tans, [0.8, 0.6], atol=1e-15)
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        assert gaps.max() <= 0.26

    def test_zero_length_line_rejected(self):
        spec = FiberSpec(shape="line",
                         params={"start": (1.0, 1.0), "end": (1.0, 1.0)})
        with pytest.raises(ValueError, match="degenerate"):
            sample_curve(spec)

    def test_ushape_geometry(self):
        pts, tans = sample_curve(FiberSpec(shape="ushape"), ds=0.05)
        # curve endpoints at the leg bottoms, apex on top of the cap
        assert np.allclose(pts[0], [14.987, 8.2077], atol=2e-3)
        assert np.allclose(pts[-1], [34.013, 8.2077], atol=2e-3)
        apex = pts[np.argmax(pts[:, 1])]
        assert np.allclose(apex, [24.5, 40.0], atol=0.05)
        # tangent horizontal at the apex, near-vertical at the bottoms
        t_apex = tans[np.argmax(pts[:, 1])]
        assert abs(t_apex[1]) < 0.05
        assert abs(tans[0][0]) < 0.3

    def test_ushape_c1_joints(self):
        _, tans = sample_curve(FiberSpec(shape="ushape"), ds=0.05)
        dots = np.einsum("ij,ij->i", tans[:-1], tans[1:])
        assert dots.min() > 0.999  # no tangent jumps anywhere

    def test_sshape_geometry(self):
        pts, tans = sample_curve(FiberSpec(shape="sshape"), ds=0.05)
        assert np.allclose(pts[0], [25.0, 5.0], atol=1e-9)
        assert np.allclose(pts[-1], [25.0, 45.0], atol=1e-9)
        # bulges right below the joint, left above it
        assert pts[:, 0].max() == pytest.approx(35.0, abs=1e-4)
        assert pts[:, 0].min() == pytest.approx(15.0, abs=1e-4)
        dots = np.einsum("ij,ij->i", tans[:-1], tans[1:])
        assert dots.min() > 0.999

    def test_sine_geometry(self):
        pts, tans = sample_curve(FiberSpec(shape="sine"), ds=0.1)
        assert np.allclose(pts[0], [5.0, 25.0], atol=1e-12)
        assert pts[:, 1].max() == pytest.approx(33.0, abs=0.01)
        assert pts[:, 1].min() == pytest.approx(17.0, abs=0.01)
        assert np.allclose(np.linalg.norm(tans, axis=1), 1.0, atol=1e-12)

    def test_arc(self):
        spec = FiberSpec(shape="arc", params={"center": (0.0, 0.0),
                                              "radius": 10.0,
                                              "start_deg": 0.0,
                                              "end_deg": 90.0})
        pts, tans = sample_curve(spec, ds=0.1)
        assert np.allclose(np.linalg.norm(pts, axis=1), 10.0, atol=1e-12)
        assert np.allclose(pts[0], [10.0, 0.0])
        assert np.allclose(tans[0], [0.0, 1.0])


class TestRasterize:
    def test_straight_fiber_tensors(self):
        spec = FiberSpec(shape="line",
                         params={"start": (2.0, 10.0), "end": (18.0, 10.0)})
        ph = rasterize([spec], dims=(21, 21))
        on = ph.fiber_mask(0)
        assert on.sum() > 0
        for flat in np.flatnonzero(on)[:20]:
            e = eig_sym(SpdTensor.from_matrix(ph.dt_field.data[flat]))
            assert line_angle(e.principal, np.array([1.0, 0.0])) < 1e-12
            assert np.allclose(e.values, [1.7e-3, 2e-4], rtol=1e-12)
        # band covers three rows around y = 10
        grid_mask = on.reshape(21, 21)
        assert grid_mask[10, 9:12].all()
        assert not grid_mask[10, 13:].any()

    def test_background_isotropic(self):
        ph = rasterize([FiberSpec(shape="line")], dims=(50, 50))
        off = ~ph.masks.any(axis=0)
        fa = anisotropy_scalar(
            SpdTensor.from_matrix(ph.dt_field.data[np.flatnonzero(off)[0]]),
            kind="fa",
        )
        assert fa == 0.0
        assert np.allclose(ph.dt_field.data[off], 0.7e-3 * np.eye(2),
                           atol=1e-15)

    def test_tangents_nan_off_unit_on(self):
        ph = rasterize([FiberSpec(shape="ushape")], dims=(50, 50))
        on = ph.fiber_mask(0)
        assert np.isnan(ph.tangents[0, ~on]).all()
        norms = np.linalg.norm(ph.tangents[0, on], axis=1)
        assert np.allclose(norms, 1.0, atol=1e-12)

    def test_ushape_apex_horizontal(self):
        ph = rasterize([FiberSpec(shape="ushape")], dims=(50, 50))
        flat = ph.dt_field.flat_index((24, 40))
        assert ph.fiber_mask(0)[flat]
        e = eig_sym(SpdTensor.from_matrix(ph.dt_field.data[flat]))
        assert np.rad2deg(line_angle(e.principal, np.array([1.0, 0.0]))) < 5.0

    def test_crossing_voxel_mean_tensor(self):
        ph = rasterize(crossing_specs(90.0), dims=(21, 21))
        both = ph.masks.all(axis=0)
        assert both.sum() > 0
        flat = ph.dt_field.flat_index((10, 10))
        assert both[flat]
        w = np.linalg.eigvalsh(ph.dt_field.data[flat])
        assert w[1] / w[0] < 1.05  # orthogonal mean degenerates to a disc

    def test_crossing_voxel_quartic_keeps_directions(self):
        ph = rasterize(crossing_specs(90.0), dims=(21, 21))
        t4 = ph.t4_field.tensor4_at((10, 10))
        dirs = odf_maxima(t4)
        assert dirs.shape[0] == 2
        u1 = np.array([np.cos(np.pi / 4 - np.pi / 4),
                       np.sin(np.pi / 4 - np.pi / 4)])
        errs = [min(np.rad2deg(line_angle(d, u1)),
                    np.rad2deg(line_angle(d, np.array([-u1[1], u1[0]]))))
                for d in dirs]
        assert max(errs) <= 2.0

    def test_grid_miss_rejected(self):
        spec = FiberSpec(shape="line",
                         params={"start": (100.0, 100.0),
                                 "end": (120.0, 100.0)})
        with pytest.raises(ValueError, match="misses the grid"):
            rasterize([spec], dims=(10, 10))

    def test_disagreeing_background_rejected(self):
        a = FiberSpec(shape="line", lambda_bg=0.7e-3)
        b = FiberSpec(shape="sine", lambda_bg=0.5e-3)
        with pytest.raises(ValueError, match="lambda_bg"):
            rasterize([a, b], dims=(50, 50))

    def test_empty_specs_rejected(self):
        with pytest.raises(ValueError):
            rasterize([], dims=(10, 10))


class TestSimulateSignal:
    def test_isotropic_voxel_direction_independent(self):
        ph = rasterize([FiberSpec(shape="line")], dims=(50, 50))
        scheme = gradient_scheme(12, dim=2)
        s = simulate_signal(ph, scheme)
        off = np.flatnonzero(~ph.masks.any(axis=0))[0]
        expected = np.exp(-1500.0 * 0.7e-3)
        assert np.allclose(s[off], expected, rtol=1e-12)

    def test_on_fiber_along_gradient(self):
        spec = FiberSpec(shape="line",
                         params={"start": (0.0, 5.0), "end": (10.0, 5.0)})
        ph = rasterize([spec], dims=(11, 11))
        g = np.array([[1.0, 0.0], [0.0, 1.0]])
        scheme = AcquisitionScheme(1500.0, 1.0, g)
        s = simulate_signal(ph, scheme)
        flat = ph.dt_field.flat_index((5, 5))
        assert s[flat, 0] == pytest.approx(EXP_MINUS_255, abs=1e-15)
        assert s[flat, 1] == pytest.approx(np.exp(-1500.0 * 2e-4), abs=1e-15)

    def test_order4_isotropic_matches(self):
        ph = rasterize([FiberSpec(shape="line")], dims=(50, 50))
        scheme = gradient_scheme(16, dim=2)
        s4 = simulate_signal(ph, scheme, order=4)
        off = np.flatnonzero(~ph.masks.any(axis=0))[0]
        assert np.allclose(s4[off], np.exp(-1500.0 * 0.7e-3), rtol=1e-12)

    def test_monotone_in_b(self):
        ph = rasterize([FiberSpec(shape="line")], dims=(50, 50))
        lo = simulate_signal(ph, gradient_scheme(10, bvalue=1000.0, dim=2))
        hi = simulate_signal(ph, gradient_scheme(10, bvalue=2000.0, dim=2))
        assert np.all(hi < lo)

    def test_order_validation(self):
        ph = rasterize([FiberSpec(shape="line")], dims=(50, 50),
                       with_quartic=False)
        scheme = gradient_scheme(10, dim=2)
        with pytest.raises(ValueError):
            simulate_signal(ph, scheme, order=3)
        with pytest.raises(ValueError, match="no 4th-order"):
            simulate_signal(ph, scheme, order=4)
        with pytest.raises(ValueError, match="2D"):
            simulate_signal(ph, gradient_scheme(10, dim=3))


class TestRician:
    def test_sigma_zero_identity(self):
        s = np.linspace(0.1, 1.0, 12).reshape(3, 4)
        out = add_rician(s, 0.0, rng_seed=7)
        assert np.array_equal(out, s)
        out[0, 0] = 9.0  # returned array is an independent copy
        assert s[0, 0] != 9.0

    def test_nonnegative(self):
        s = np.full((50, 20), 0.05)
        out = add_rician(s, 0.3, rng_seed=1)
        assert np.all(out >= 0.0)

    def test_seed_determinism(self):
        s = np.random.default_rng(5).uniform(0.1, 1.0, (30, 16))
        a = add_rician(s, 0.25, rng_seed=42)
        b = add_rician(s, 0.25, rng_seed=42)
        c = add_rician(s, 0.25, rng_seed=43)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_per_voxel_streams_independent(self):
        s1 = np.full((4, 8), 0.5)
        s2 = s1.copy()
        s2[0] = 0.9  # perturb one voxel only
        a = add_rician(s1, 0.2, rng_seed=3)
        b = add_rician(s2, 0.2, rng_seed=3)
        assert not np.array_equal(a[0], b[0])
        assert np.array_equal(a[1:], b[1:])

    def test_rayleigh_mean_at_zero_signal(self):
        sigma = 0.25
        draws = add_rician(np.zeros((1000, 100)), sigma, rng_seed=11)
        expected = sigma * np.sqrt(np.pi / 2.0)
        assert abs(draws.mean() - expected) / expected < 0.02

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            add_rician(np.ones((1, 4)), -0.1, rng_seed=0)


class TestFitDti:
    def test_round_trip_100_random(self):
        rng = np.random.default_rng(20)
        scheme = gradient_scheme(30)
        g = scheme.gradients
        for _ in range(100):
            a = rng.standard_normal((3, 3))
            d = 1e-3 * (a @ a.T / 3.0 + 0.2 * np.eye(3))
            s = np.exp(-1500.0 * np.einsum("ij,gi,gj->g", d, g, g))
            fitted = fit_dti(s, scheme)
            assert np.abs(fitted - d).max() < 1e-9

    def test_isotropic_signal(self):
        scheme = gradient_scheme(20)
        s = np.full(20, np.exp(-1500.0 * 1e-3))
        fitted = fit_dti(s, scheme)
        assert np.allclose(fitted, 1e-3 * np.eye(3), atol=1e-12)

    def test_common_scale_invariance(self):
        rng = np.random.default_rng(21)
        scheme1 = gradient_scheme(20, s0=1.0)
        scheme2 = gradient_scheme(20, s0=3.0)
        a = rng.standard_normal((3, 3))
        d = 1e-3 * (a @ a.T / 3.0 + 0.2 * np.eye(3))
        s = np.exp(-1500.0 * np.einsum("ij,gi,gj->g", d,
                                       scheme1.gradients, scheme1.gradients))
        f1 = fit_dti(s, scheme1)
        f2 = fit_dti(3.0 * s, scheme2)
        assert np.allclose(f1, f2, atol=1e-14)

    def test_rank_deficiency_rejected(self):
        # coplanar 3D gradients cannot determine the z components
        ang = np.arange(8) * np.pi / 8
        g = np.stack([np.cos(ang), np.sin(ang), np.zeros(8)], axis=1)
        scheme = AcquisitionScheme(1500.0, 1.0, g)
        with pytest.raises(ValueError, match="rank"):
            fit_dti(np.full(8, 0.5), scheme)

    def test_zero_signal_clamped_not_fatal(self):
        scheme = gradient_scheme(20)
        s = np.full(20, 0.5)
        s[0] = 0.0
        fitted = fit_dti(s, scheme)
        assert np.isfinite(fitted).all()
        assert np.linalg.eigvalsh(fitted).min() >= 0.9e-12

    def test_batched_matches_single(self):
        rng = np.random.default_rng(22)
        scheme = gradient_scheme(25)
        vol = rng.uniform(0.05, 1.0, (6, 25))
        batch = fit_dti(vol, scheme)
        for v in range(6):
            assert np.allclose(batch[v], fit_dti(vol[v], scheme), atol=1e-15)


class TestFitQuartic:
    def test_round_trip_on_phantom(self):
        ph = rasterize(crossing_specs(60.0), dims=(21, 21))
        scheme = gradient_scheme(81, dim=2)
        s = simulate_signal(ph, scheme, order=4)
        coeffs = fit_quartic(s, scheme)
        assert np.abs(coeffs - ph.t4_field.coeffs).max() < 1e-9

    def test_crossing_recovery_via_diagonal_blocks(self):
        for theta in (40.0, 90.0):
            ph = rasterize(crossing_specs(theta), dims=(21, 21))
            scheme = gradient_scheme(81, dim=2)
            s = simulate_signal(ph, scheme, order=4)
            flat = ph.dt_field.flat_index((10, 10))
            t4 = Tensor4(2, tuple(fit_quartic(s[flat], scheme)))
            bx, by = diagonal_components(t4)
            half = np.deg2rad(theta) / 2.0
            u1 = np.array([np.cos(np.pi / 4 - half), np.sin(np.pi / 4 - half)])
            u2 = np.array([np.cos(np.pi / 4 + half), np.sin(np.pi / 4 + half)])
            e1 = np.rad2deg(line_angle(eig_sym(bx).principal, u1))
            e2 = np.rad2deg(line_angle(eig_sym(by).principal, u2))
            limit = 3.0 if theta == 90.0 else 10.0
            assert e1 < limit and e2 < limit


class TestRoundTripFidelity:
    def test_rasterize_simulate_fit(self):
        ph = rasterize([FiberSpec(shape="ushape")], dims=(50, 50))
        scheme = gradient_scheme(81, dim=2)
        s = simulate_signal(ph, scheme)
        fitted = fit_dti(s, scheme)
        on = np.flatnonzero(ph.fiber_mask(0))
        for flat in on:
            truth = eig_sym(SpdTensor.from_matrix(ph.dt_field.data[flat]))
            est = eig_sym(SpdTensor.from_matrix(fitted[flat]))
            assert np.rad2deg(line_angle(truth.principal, est.principal)) < 1.0
            assert np.abs(est.values / truth.values - 1.0).max() < 1e-6


class TestDiskFormats:
    def test_scheme_round_trip(self, tmp_path):
        scheme = gradient_scheme(81, bvalue=1500.0, s0=1.0)
        p = tmp_path / "scheme.json"
        save_scheme(scheme, p)
        back = load_scheme(p)
        assert back.bvalue == scheme.bvalue and back.s0 == scheme.s0
        assert np.array_equal(back.gradients, scheme.gradients)

    def test_signals_round_trip(self, tmp_path):
        rng = np.random.default_rng(30)
        s = rng.uniform(0.01, 1.0, (12, 7))
        p = tmp_path / "signals.json"
        save_signals(s, (3, 4), p)
        back, dims = load_signals(p)
        assert dims == (3, 4)
        assert np.array_equal(back, s)

    def test_signals_shape_validation(self, tmp_path):
        with pytest.raises(ValueError):
            save_signals(np.ones((5, 3)), (2, 2), tmp_path / "x.json")

    def test_phantom_bundle_round_trip(self, tmp_path):
        ph = rasterize(crossing_specs(60.0), dims=(21, 21))
        save_phantom(ph, tmp_path / "bundle")
        back = load_phantom(tmp_path / "bundle")
        assert np.array_equal(back.dt_field.data, ph.dt_field.data)
        assert np.array_equal(back.t4_field.coeffs, ph.t4_field.coeffs)
        assert np.array_equal(back.masks, ph.masks)
        assert np.array_equal(back.tangents, ph.tangents, equal_nan=True)
        assert back.dims == ph.dims and back.spacing == ph.spacing

    def test_phantom_bundle_without_quartic(self, tmp_path):
        ph = rasterize([FiberSpec(shape="line")], dims=(50, 50),
                       with_quartic=False)
        save_phantom(ph, tmp_path / "bundle")
        back = load_phantom(tmp_path / "bundle")
        assert back.t4_field is None

    def test_deterministic_bytes(self, tmp_path):
        ph = rasterize([FiberSpec(shape="sshape")], dims=(50, 50))
        save_phantom(ph, tmp_path / "a")
        save_phantom(ph, tmp_path / "b")
        for name in ("dt_field.json", "t4_field.json", "truth.json"):
            assert ((tmp_path / "a" / name).read_bytes()
                    == (tmp_path / "b" / name).read_bytes())
