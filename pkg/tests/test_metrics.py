import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from evtol_pinn.errors import InvalidInputError
from evtol_pinn.metrics import EvalReport, evaluate, time_inference
from evtol_pinn.nn import MlpSpec, init_model


class TestEvaluate:
    def test_identity(self):
        y = np.linspace(3.2, 4.1, 50)
        r = evaluate(y, y)
        assert (r.max_error_mv, r.mae_mv, r.rmse_mv, r.r2_pct) == (0.0, 0.0, 0.0, 100.0)

    def test_constant_offset(self):
        y = np.linspace(3.2, 4.1, 50)
        r = evaluate(y + 0.010, y)
        assert r.mae_mv == pytest.approx(10.0, rel=1e-9)
        assert r.rmse_mv == pytest.approx(10.0, rel=1e-9)
        assert r.max_error_mv == pytest.approx(10.0, rel=1e-9)

    def test_hand_values(self):
        r = evaluate([1.0, 2.0, 4.0], [1.0, 2.0, 3.0])
        # errors (0, 0, 1) V; SST = 2
        assert r.mae_mv == pytest.approx(1000 / 3)
        assert r.rmse_mv == pytest.approx(1000 / np.sqrt(3))
        assert r.r2_pct == pytest.approx(50.0)

    def test_zero_variance(self):
        with pytest.raises(InvalidInputError, match="R\\^2"):
            evaluate([1.0, 2.0], [3.0, 3.0])

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            evaluate([1.0], [1.0, 2.0])

    @given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-5, 5)), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, e, rnd):
        y = np.linspace(3.0, 4.0, e.size)
        perm = list(range(e.size))
        rnd.shuffle(perm)
        a = evaluate(y + e, y)
        b = evaluate((y + e)[perm], y[perm])
        assert a.max_error_mv == b.max_error_mv
        assert a.mae_mv == pytest.approx(b.mae_mv, rel=1e-12, abs=1e-12)
        assert a.rmse_mv == pytest.approx(b.rmse_mv, rel=1e-12, abs=1e-12)
        assert a.r2_pct == pytest.approx(b.r2_pct, rel=1e-12, abs=1e-9)

    def test_csv_row(self):
        r = EvalReport("PINN", 2, 64, 110.0, 9.652, 20.1, 99.2, 4865, 1.5)
        assert r.csv_row() == ["PINN", "2", "64", "110.000000", "9.652000", "20.100000", "99.200000", "4865", "1.5000"]
        assert len(r.csv_row(timing=False)) == 8


class TestTiming:
    def test_repetitions_zero(self):
        with pytest.raises(InvalidInputError):
            time_inference(init_model(MlpSpec(5, 1, 4), 0), np.zeros((1, 5)), 0)

    def test_counts(self):
        t = time_inference(lambda rows: rows.sum(), np.ones((3, 2)), 10)
        assert t.repetitions == 10 and t.n_rows == 3 and t.mean_us > 0

    def test_small_model_faster(self):
        small = init_model(MlpSpec(9, 1, 32), 0)
        big = init_model(MlpSpec(5, 4, 128), 0)
        rng = np.random.default_rng(0)
        t_small = time_inference(small, rng.normal(size=(64, 9)), 300)
        t_big = time_inference(big, rng.normal(size=(64, 5)), 300)
        assert t_small.mean_us < t_big.mean_us

    def test_linear_scaling(self):
        # total time per pass should roughly double with twice the rows
        model = init_model(MlpSpec(5, 4, 128), 0)
        rng = np.random.default_rng(0)
        one = time_inference(model, rng.normal(size=(2000, 5)), 50)
        two = time_inference(model, rng.normal(size=(4000, 5)), 50)
        ratio = (two.mean_us * 4000) / (one.mean_us * 2000)
        assert 1.0 <= ratio <= 4.0
