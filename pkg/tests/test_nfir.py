import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpff.nfir import (
    Dataset,
    WindowConfig,
    assemble_dataset,
    average_repetitions,
    build_windows,
    reference_to_query_windows,
)
from gpff.plantsim import ClosedLoopLog, FrictionPlant, pd_controller, simulate_closed_loop


def make_log(y, u, ref_id="r", rep=0):
    y = np.asarray(y, dtype=float)
    return ClosedLoopLog(r=y, y=y, u=u, e=np.zeros_like(y), reference_id=ref_id, repetition=rep)


@pytest.mark.parametrize("windowing", [build_windows, reference_to_query_windows])
class TestWindows:
    def test_hand_example(self, windowing):
        W = windowing([1, 2, 3], WindowConfig(n_c=1, n_ac=1))
        np.testing.assert_array_equal(W, [[2, 1, 0], [3, 2, 1], [0, 3, 2]])

    def test_identity_windowing(self, windowing):
        s = np.array([0.5, -1.0, 2.0, 7.0])
        W = windowing(s, WindowConfig(0, 0))
        np.testing.assert_array_equal(W, s[:, None])

    def test_constant_signal_padding(self, windowing):
        cfg = WindowConfig(n_c=2, n_ac=3)
        W = windowing(np.full(10, 4.0), cfg)
        assert W.shape == (10, 6)
        np.testing.assert_array_equal(W[2:7], 4.0)
        # first window (t=1): positions j=4,5 look at t-1, t-2 -> padded
        np.testing.assert_array_equal(W[0], [4, 4, 4, 4, 0, 0])
        # last window (t=10): positions j=0..2 look past the end
        np.testing.assert_array_equal(W[-1], [0, 0, 0, 4, 4, 4])

    def test_empty_signal(self, windowing):
        with pytest.raises(ValueError):
            windowing([], WindowConfig(1, 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 4), st.integers(0, 4))
def test_window_positions(N, n_c, n_ac):
    s = np.arange(1, N + 1, dtype=float)
    W = build_windows(s, WindowConfig(n_c, n_ac))
    for t in range(N):
        for j in range(n_c + n_ac + 1):
            idx = t + n_ac - j
            expected = s[idx] if 0 <= idx < N else 0.0
            assert W[t, j] == expected


class TestWindowConfig:
    def test_n_theta(self):
        assert WindowConfig(20, 40).n_theta == 61

    @pytest.mark.parametrize("kw", [dict(n_c=-1), dict(n_ac=-2), dict(stride=0), dict(n_c=1.5)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            WindowConfig(**kw)


class TestAssemble:
    def test_one_log_stride_30(self):
        log = make_log(np.linspace(0, 1, 90), np.arange(90.0))
        ds = assemble_dataset([log], WindowConfig(2, 3, stride=30))
        assert ds.M == 3
        np.testing.assert_array_equal(ds.u, [0, 30, 60])

    def test_paper_sized_count(self):
        # 11 experiments of 4501 samples, every 30th row from t = 1
        logs = [make_log(np.zeros(4501), np.zeros(4501), f"r{j}") for j in range(11)]
        ds = assemble_dataset(logs, WindowConfig(20, 40, stride=30))
        assert ds.M == 11 * 151 == 1661
        assert ds.n_theta == 61

    def test_stride_one_keeps_everything(self):
        logs = [make_log(np.ones(n), np.ones(n)) for n in (5, 7, 11)]
        assert assemble_dataset(logs, WindowConfig(1, 1)).M == 23

    def test_pairing_preserved(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=50)
        u = rng.normal(size=50)
        cfg = WindowConfig(2, 2, stride=7)
        ds = assemble_dataset([make_log(y, u)], cfg)
        full = build_windows(y, cfg)
        for i, t in enumerate(range(0, 50, 7)):
            np.testing.assert_array_equal(ds.Y[i], full[t])
            assert ds.u[i] == u[t]

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        logs = [make_log(rng.normal(size=20), rng.normal(size=20), f"r{k}") for k in range(3)]
        cfg = WindowConfig(1, 2, stride=3)
        a = assemble_dataset(logs, cfg)
        b = assemble_dataset(logs[::-1], cfg)
        rows = lambda ds: sorted(map(tuple, np.column_stack([ds.Y, ds.u])))
        assert rows(a) == rows(b)

    def test_mismatched_lengths(self):
        class Bad:
            y = np.zeros(5)
            u = np.zeros(4)

        with pytest.raises(ValueError):
            assemble_dataset([Bad()], WindowConfig(1, 1))

    def test_dataset_invariants(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 3)), np.zeros(2), WindowConfig(1, 1))
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 4)), np.zeros(3), WindowConfig(1, 1))
        with pytest.raises(ValueError):
            Dataset(np.full((1, 3), np.nan), np.zeros(1), WindowConfig(1, 1))

    def test_csv_export(self, tmp_path):
        ds = assemble_dataset([make_log([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])], WindowConfig(1, 1))
        ds.to_csv(tmp_path / "d.csv")
        rows = list(csv.reader(open(tmp_path / "d.csv")))
        assert rows[0] == ["u", "w_0", "w_1", "w_2"]
        assert [float(v) for v in rows[1]] == [4.0, 2.0, 1.0, 0.0]


class TestAverage:
    def test_identical_logs(self):
        a = make_log([1.0, 2.0], [3.0, 4.0], "x", 0)
        b = make_log([1.0, 2.0], [3.0, 4.0], "x", 1)
        (out,) = average_repetitions([a, b])
        np.testing.assert_array_equal(out.y, a.y)
        np.testing.assert_array_equal(out.u, a.u)

    def test_opposite_inputs_cancel(self):
        u = np.array([1.0, -2.0, 3.0])
        (out,) = average_repetitions([make_log(np.zeros(3), u, "x"), make_log(np.zeros(3), -u, "x")])
        np.testing.assert_array_equal(out.u, 0.0)

    def test_singleton_passthrough_and_grouping(self):
        a = make_log([1.0], [1.0], "a")
        b1 = make_log([2.0], [2.0], "b", 0)
        b2 = make_log([4.0], [6.0], "b", 1)
        out = average_repetitions([a, b1, b2])
        assert out[0] is a
        assert out[1].reference_id == "b" and out[1].u[0] == 4.0 and out[1].y[0] == 3.0
        np.testing.assert_array_equal(out[1].e, out[1].r - out[1].y)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            average_repetitions([make_log([1.0, 2.0], [1.0, 2.0], "x"), make_log([1.0], [1.0], "x")])

    def test_noise_variance_reduced(self):
        plant = FrictionPlant(m=0.083, Fc=0.0, viscous=2.8531)
        C = pd_controller(300.0, 5.0)
        r = np.zeros(3000)
        logs = [
            simulate_closed_loop(plant, C, r, noise_std=0.05, seed=s, reference_id="n", repetition=k)
            for k, s in enumerate((101, 202))
        ]
        (avg,) = average_repetitions(logs)
        assert np.var(avg.u) <= min(np.var(l.u) for l in logs)
