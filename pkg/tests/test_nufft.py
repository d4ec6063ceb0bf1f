import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from tomoforge import NufftPlan, direct_dft, plan, type1, type2
from tomoforge.nufft import kaiser_bessel_fourier, kernel_width_for_tolerance

from conftest import make_plan, uniform_angles


class TestPlanning:
    def test_width_rule(self):
        assert kernel_width_for_tolerance(1e-6) == 7
        assert kernel_width_for_tolerance(1e-2) == 3
        assert kernel_width_for_tolerance(1e-8) == 9

    def test_tolerance_range_enforced(self):
        _, sampling, _ = make_plan(16, 4)
        with pytest.raises(ValueError):
            plan(16, sampling, 1e-15)
        with pytest.raises(ValueError):
            plan(16, sampling, 0.5)

    def test_plan_reuse_is_bitwise(self, rng):
        _, _, p = make_plan(16, 6)
        img = rng.standard_normal((16, 16))
        assert type2(p, img).tobytes() == type2(p, img).tobytes()

    def test_oversampled_side_is_even(self):
        _, sampling, _ = make_plan(17, 4)
        p = plan(17, sampling, 1e-6)
        assert p.os_side % 2 == 0 and p.os_side >= 2 * 17

    def test_kernel_table_resolution(self):
        _, _, p = make_plan(16, 4)
        samples_per_unit = (p.kernel.lookup.size - 2) / (p.kernel_width / 2)
        assert samples_per_unit >= 1024


class TestKernelFourier:
    def test_matches_quadrature(self):
        w, beta = 7, 0.985 * np.pi * 7 * 0.75
        for xi in (0.0, 0.013, 0.07, 0.21):
            num = quad(
                lambda t: np.i0(beta * np.sqrt(max(1 - (2 * t / w) ** 2, 0.0)))
                * np.cos(2 * np.pi * xi * t),
                -w / 2, w / 2, limit=200,
            )[0]
            closed = float(kaiser_bessel_fourier(np.array([xi]), w, beta)[0])
            assert closed == pytest.approx(num, rel=1e-12)


class TestType2:
    def test_zero_image(self):
        _, _, p = make_plan(16, 8)
        out = type2(p, np.zeros((16, 16)))
        assert np.all(out == 0)

    def test_centered_impulse_gives_unit_spectrum(self):
        # odd side puts a pixel exactly at the grid center; pointwise error is
        # allowed a small constant over the L2 tolerance contract
        _, _, p = make_plan(17, 6, tol=1e-8)
        img = np.zeros((17, 17))
        img[8, 8] = 1.0
        out = type2(p, img)
        assert np.max(np.abs(out - 1.0)) < 3e-8

    def test_matches_direct_summation(self, rng):
        _, sampling, p = make_plan(16, 8, tol=1e-6)
        img = rng.standard_normal((16, 16))
        ref = direct_dft(sampling, img)
        got = type2(p, img)
        err = np.linalg.norm(got - ref) / np.linalg.norm(ref)
        assert err <= 1e-6

    def test_accuracy_spot_checks(self, rng):
        for side, tol in ((32, 1e-4), (32, 1e-6), (64, 1e-8)):
            _, sampling, _ = make_plan(side, 8, tol=tol)
            p = plan(side, sampling, tol)
            img = rng.standard_normal((side, side))
            ref = direct_dft(sampling, img)
            err = np.linalg.norm(type2(p, img) - ref) / np.linalg.norm(ref)
            assert err <= tol, f"N={side} tol={tol}: err {err:.3e}"

    def test_dimension_mismatch(self):
        _, _, p = make_plan(16, 4)
        with pytest.raises(ValueError):
            type2(p, np.zeros((8, 8)))

    def test_linearity(self, rng):
        _, _, p = make_plan(16, 6)
        f = rng.standard_normal((16, 16))
        g = rng.standard_normal((16, 16))
        lhs = type2(p, 2.0 * f + 0.5 * g)
        rhs = 2.0 * type2(p, f) + 0.5 * type2(p, g)
        assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(rhs)

    def test_hermitian_symmetry_for_real_images(self, rng):
        _, _, p = make_plan(32, 9)
        img = rng.standard_normal((32, 32))
        vals = type2(p, img).reshape(9, 32)
        center = 16
        for j in range(1, 16):
            np.testing.assert_allclose(
                vals[:, center + j], np.conj(vals[:, center - j]),
                atol=1e-6 * np.abs(vals).max())


class TestType1:
    def test_zero_samples(self):
        _, _, p = make_plan(16, 4)
        out = type1(p, np.zeros(p.sample_count, dtype=complex))
        assert np.all(out == 0)

    def test_length_mismatch(self):
        _, _, p = make_plan(16, 4)
        with pytest.raises(ValueError):
            type1(p, np.zeros(3, dtype=complex))

    def test_zero_frequency_atom_gives_constant(self):
        # single-atom synthesis: pointwise error concentrates at grid-edge
        # deapodization, a small constant over the L2 tolerance contract
        geom_side = 16
        _, sampling, p = make_plan(geom_side, 1, tol=1e-8)
        c = np.zeros(p.sample_count, dtype=complex)
        c[np.argmin(np.sum(sampling.samples**2, axis=1))] = 1.0
        out = type1(p, c)
        assert np.max(np.abs(out - 1.0)) < 3e-8

    def test_adjoint_pairing(self, rng):
        _, _, p = make_plan(32, 12)
        f = rng.standard_normal((32, 32))
        c = rng.standard_normal(p.sample_count) + 1j * rng.standard_normal(p.sample_count)
        lhs = np.vdot(type2(p, f), c)
        rhs = np.vdot(f.astype(complex), type1(p, c))
        bound = 1e-6 * np.linalg.norm(f) * np.linalg.norm(c)
        assert abs(lhs - rhs) <= bound

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_adjoint_pairing_property(self, seed):
        r = np.random.default_rng(seed)
        _, _, p = make_plan(12, 5)
        f = r.standard_normal((12, 12))
        c = r.standard_normal(p.sample_count) + 1j * r.standard_normal(p.sample_count)
        lhs = np.vdot(type2(p, f), c)
        rhs = np.vdot(f.astype(complex), type1(p, c))
        assert abs(lhs - rhs) <= 1e-6 * max(np.linalg.norm(f) * np.linalg.norm(c), 1e-30)


class TestDirectOracle:
    def test_size_guard(self):
        _, sampling, _ = make_plan(16, 4)
        with pytest.raises(ValueError):
            direct_dft(sampling, np.zeros((256, 256)))

    def test_zero_and_impulse(self):
        _, sampling, _ = make_plan(17, 4)
        assert np.all(direct_dft(sampling, np.zeros((17, 17))) == 0)
        img = np.zeros((17, 17))
        img[8, 8] = 1.0
        np.testing.assert_allclose(direct_dft(sampling, img), 1.0, atol=1e-12)
