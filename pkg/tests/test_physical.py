import numpy as np
import pytest

from rfdcodec.physical import (
    EPS_T,
    UnderwaterPriors,
    degrade,
    estimate_priors,
    load_priors,
    restore,
    save_priors,
    style_transfer,
    transmission_from_depth,
)
from rfdcodec.errors import DegenerateTransmissionError
from rfdcodec.synth import make_bank, synth_underwater_image


def uniform_priors(h, w, t, a):
    return UnderwaterPriors(T=np.full((h, w, 3), float(t)), A=np.full(3, float(a)))


class TestTransmissionFromDepth:
    def test_zero_depth_gives_unit_transmission(self):
        T = transmission_from_depth((0.3, 0.3, 0.3), np.zeros((4, 5)))
        np.testing.assert_array_equal(T, np.ones((4, 5, 3)))

    def test_zero_attenuation_gives_unit_transmission(self):
        d = np.random.default_rng(0).uniform(0, 10, size=(6, 6))
        T = transmission_from_depth((0.0, 0.0, 0.0), d)
        np.testing.assert_array_equal(T, np.ones((6, 6, 3)))

    def test_closed_form_value(self):
        T = transmission_from_depth((0.5, 0.5, 0.5), np.full((3, 3), 2.0))
        np.testing.assert_allclose(T, np.exp(-1.0), rtol=0, atol=1e-12)

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            transmission_from_depth((-0.1, 0.2, 0.2), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            transmission_from_depth((0.1, 0.2, 0.2), np.full((2, 2), -1.0))

    def test_floor_applied(self):
        T = transmission_from_depth((10.0, 10.0, 10.0), np.full((2, 2), 100.0))
        assert T.min() == EPS_T

    def test_antitone_in_depth_and_alpha(self):
        rng = np.random.default_rng(7)
        d1 = rng.uniform(0, 2, size=(5, 5))
        d2 = d1 + rng.uniform(0, 1, size=(5, 5))
        a = rng.uniform(0.1, 1.0, size=3)
        assert (transmission_from_depth(a, d2) <= transmission_from_depth(a, d1)).all()
        assert (
            transmission_from_depth(a + 0.5, d1) <= transmission_from_depth(a, d1)
        ).all()


class TestDegradeRestore:
    def test_unit_transmission_is_identity(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, size=(4, 4, 3))
        p = uniform_priors(4, 4, 1.0, 0.7)
        np.testing.assert_array_equal(degrade(img, p), img)
        np.testing.assert_array_equal(restore(img, p), img)

    def test_vanishing_transmission_gives_ambient(self):
        img = np.random.default_rng(2).uniform(0, 1, size=(3, 3, 3))
        p = uniform_priors(3, 3, 1e-300, 0.2)
        np.testing.assert_allclose(degrade(img, p), 0.2, atol=1e-12)

    def test_direct_substitution(self):
        img = np.full((2, 2, 3), 0.8)
        p = uniform_priors(2, 2, 0.5, 0.2)
        np.testing.assert_allclose(degrade(img, p), 0.5, atol=1e-12)

    def test_restore_of_ambient_is_ambient(self):
        p = uniform_priors(3, 3, 0.4, 0.35)
        img = np.full((3, 3, 3), 0.35)
        np.testing.assert_allclose(restore(img, p), 0.35, atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            img = rng.uniform(0, 1, size=(6, 5, 3))
            T = rng.uniform(0.1, 1.0, size=(6, 5, 3))
            A = rng.uniform(0, 1, size=3)
            p = UnderwaterPriors(T=T, A=A)
            back = restore(degrade(img, p, clamp=False), p, clamp=False)
            assert np.abs(back - img).max() < 1e-6

    def test_shape_mismatch_rejected(self):
        img = np.zeros((4, 4, 3))
        p = uniform_priors(5, 4, 0.5, 0.5)
        with pytest.raises(ValueError):
            degrade(img, p)
        with pytest.raises(ValueError):
            restore(img, p)

    def test_restore_rejects_degenerate_transmission(self):
        p = uniform_priors(2, 2, 1e-300, 0.5)
        with pytest.raises(DegenerateTransmissionError):
            restore(np.zeros((2, 2, 3)), p)

    def test_degrade_monotone_in_scene(self):
        rng = np.random.default_rng(4)
        lo = rng.uniform(0, 0.5, size=(5, 5, 3))
        hi = lo + rng.uniform(0, 0.5, size=(5, 5, 3))
        T = rng.uniform(0.05, 1.0, size=(5, 5, 3))
        p = UnderwaterPriors(T=T, A=rng.uniform(0, 1, size=3))
        assert (degrade(lo, p) <= degrade(hi, p) + 1e-12).all()

    def test_outputs_clamped(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            img = rng.uniform(0, 1, size=(4, 4, 3))
            p = UnderwaterPriors(
                T=rng.uniform(0.1, 1.0, size=(4, 4, 3)), A=rng.uniform(0, 1, size=3)
            )
            for out in (degrade(img, p), restore(img, p)):
                assert out.min() >= 0.0 and out.max() <= 1.0


class TestStyleTransfer:
    def test_equal_priors_identity(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 1, size=(5, 5, 3))
        p = UnderwaterPriors(
            T=rng.uniform(0.2, 1.0, size=(5, 5, 3)), A=rng.uniform(0, 1, size=3)
        )
        out = style_transfer(img, p, p, clamp=False)
        assert np.abs(out - img).max() < 1e-6

    def test_scalar_case(self):
        img = np.full((2, 2, 3), 0.5)
        p_dic = uniform_priors(2, 2, 0.5, 0.2)
        p_in = uniform_priors(2, 2, 0.25, 0.6)
        # clear scene (0.5 - 0.2*0.5)/0.5 = 0.8, restyled 0.8*0.25 + 0.6*0.75
        np.testing.assert_allclose(style_transfer(img, p_dic, p_in), 0.65, atol=1e-12)

    def test_matches_expanded_form(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            img = rng.uniform(0, 1, size=(4, 6, 3))
            T1 = rng.uniform(0.1, 1.0, size=(4, 6, 3))
            T2 = rng.uniform(0.1, 1.0, size=(4, 6, 3))
            A1 = rng.uniform(0, 1, size=3)
            A2 = rng.uniform(0, 1, size=3)
            p1 = UnderwaterPriors(T=T1, A=A1)
            p2 = UnderwaterPriors(T=T2, A=A2)
            expanded = ((img - A1 * (1 - T1)) / T1) * T2 + A2 * (1 - T2)
            got = style_transfer(img, p1, p2, clamp=False)
            assert np.abs(got - expanded).max() < 1e-6
            two_step = degrade(restore(img, p1, clamp=False), p2, clamp=False)
            np.testing.assert_allclose(got, two_step, atol=1e-12)


class TestEstimatePriors:
    def test_constant_image_ambient(self):
        img = np.full((32, 32, 3), 0.37)
        p = estimate_priors(img)
        np.testing.assert_allclose(p.A, 0.37, atol=1e-12)

    def test_synthetic_suite_recovers_priors(self):
        bank = make_bank(seed=11)
        rng = np.random.default_rng(12)
        a_errors = []
        t_true, t_est = [], []
        for _ in range(20):
            captured, _, priors = synth_underwater_image(
                bank, rng, 64, 64, uniform_T=True, dark_fraction=0.015, near_gray=True
            )
            est = estimate_priors(captured)
            a_errors.append(np.abs(est.A - priors.A).max())
            t_true.append(float(priors.T.mean()))
            t_est.append(float(est.T.mean()))
        assert max(a_errors) < 0.1
        r = np.corrcoef(t_true, t_est)[0, 1]
        assert r > 0.5

    def test_estimates_always_valid(self):
        rng = np.random.default_rng(13)
        img = rng.uniform(0, 1, size=(40, 40, 3))
        p = estimate_priors(img)
        assert p.T.min() >= EPS_T and p.T.max() <= 1.0
        assert p.A.min() >= 0.0 and p.A.max() <= 1.0


def test_priors_file_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    p = UnderwaterPriors(
        T=rng.uniform(0.2, 1.0, size=(8, 6, 3)),
        A=rng.uniform(0, 1, size=3),
        alpha=[0.5, 0.3, 0.2],
        d=rng.uniform(0, 2, size=(8, 6)),
    )
    path = tmp_path / "priors.json"
    save_priors(p, path)
    q = load_priors(path)
    np.testing.assert_allclose(q.A, p.A, atol=1e-12)
    np.testing.assert_allclose(q.T, p.T, atol=1e-6)
    np.testing.assert_allclose(q.d, p.d, atol=1e-6)
