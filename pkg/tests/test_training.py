import csv
import math

import numpy as np
import pytest

from goldilocks.autodiff import NetworkArchitecture
from goldilocks.datasets import synthetic_blobs
from goldilocks.errors import InputError, NumericalError
from goldilocks.geometry import make_chart, xavier_init
from goldilocks.training import TRAJECTORY_COLUMNS, AdamState, adam_step, train_fullspace, train_subspace


@pytest.fixture(scope="module")
def blobs():
    return synthetic_blobs(n_classes=10, input_dim=20, n_per_class=40, spread=0.3, seed=0)


@pytest.fixture(scope="module")
def small_arch():
    return NetworkArchitecture((20, 16, 10))


class TestAdam:
    def test_hand_oracle(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        grads = [np.array([1.0, -2.0]), np.array([0.5, 0.5]), np.array([-1.0, 3.0])]
        state = AdamState.zeros(2, lr=lr, beta1=b1, beta2=b2, eps_hat=eps)
        x = np.array([1.0, 1.0])
        m = v = np.zeros(2)
        expected = x.copy()
        for t, g in enumerate(grads, start=1):
            state, x = adam_step(state, x, g)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            expected = expected - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            np.testing.assert_allclose(x, expected, atol=1e-12, rtol=0)
        assert state.step == 3

    def test_first_step_magnitude_is_lr(self):
        state = AdamState.zeros(3, lr=0.01)
        _, x = adam_step(state, np.zeros(3), np.array([5.0, -0.2, 1e3]))
        np.testing.assert_allclose(np.abs(x), 0.01, rtol=1e-6)

    def test_zero_gradient_coordinates_unchanged(self):
        state = AdamState.zeros(4)
        x = np.array([1.0, 2.0, 3.0, 4.0])
        for _ in range(5):
            state, x = adam_step(state, x, np.array([0.0, 1.0, 0.0, 1.0]))
        assert x[0] == 1.0 and x[2] == 3.0
        assert x[1] < 2.0

    def test_constant_gradient_step_tends_to_lr(self):
        state = AdamState.zeros(1, lr=1e-3)
        x = np.zeros(1)
        for _ in range(200):
            state, new = adam_step(state, x, np.array([0.7]))
            step, x = x - new, new
        assert step[0] == pytest.approx(1e-3, rel=1e-6)

    def test_rejects_bad_gradient(self):
        state = AdamState.zeros(2)
        with pytest.raises(InputError):
            adam_step(state, np.zeros(2), np.zeros(3))
        with pytest.raises(NumericalError):
            adam_step(state, np.zeros(2), np.array([np.nan, 0.0]))


class TestSubspaceTraining:
    def test_zero_steps_single_point(self, blobs, small_arch):
        chart = make_chart(small_arch, 1e-6, 5, anchor_seed=0, projection_seed=0, overlap_bound=None)
        traj = train_subspace(small_arch, chart, blobs, 0)
        assert traj.steps == [0]
        assert traj.initial.eval_loss == pytest.approx(math.log(10), abs=1e-4)

    def test_d0_chart_constant(self, blobs, small_arch):
        chart = make_chart(small_arch, 1.0, 0, anchor_seed=0)
        traj = train_subspace(small_arch, chart, blobs, 20, batch_size=32, eval_every=5)
        losses = {p.eval_loss for p in traj.points}
        assert len(losses) == 1
        np.testing.assert_array_equal(traj.final_params, chart.anchor)

    def test_sphere_keeps_radius(self, blobs, small_arch):
        chart = make_chart(small_arch, 1.0, 8, kind="sphere", anchor_seed=1, projection_seed=2,
                           overlap_bound=None)
        traj = train_subspace(small_arch, chart, blobs, 1000, batch_size=32, eval_every=100, lr=1e-2)
        assert not traj.diverged
        r0 = chart.normalized_norm(chart.anchor)
        assert chart.normalized_norm(traj.final_params) == pytest.approx(r0, abs=1e-6)

    def test_lr_zero_freezes(self, blobs, small_arch):
        chart = make_chart(small_arch, 1.0, 6, anchor_seed=0, projection_seed=1, overlap_bound=None)
        traj = train_subspace(small_arch, chart, blobs, 10, batch_size=32, lr=0.0)
        np.testing.assert_array_equal(traj.final, np.zeros(6))

    def test_deterministic(self, blobs, small_arch):
        chart = make_chart(small_arch, 1.0, 6, anchor_seed=0, projection_seed=1, overlap_bound=None)
        a = train_subspace(small_arch, chart, blobs, 30, batch_size=32, eval_every=10, seed=5)
        b = train_subspace(small_arch, chart, blobs, 30, batch_size=32, eval_every=10, seed=5)
        np.testing.assert_array_equal(a.final, b.final)
        assert a.points == b.points

    def test_divergence_flagged(self, blobs, small_arch):
        chart = make_chart(small_arch, 1.0, 6, anchor_seed=0, projection_seed=1, overlap_bound=None)
        traj = train_subspace(small_arch, chart, blobs, 50, batch_size=32, lr=1e300)
        assert traj.diverged
        assert traj.diverged_step is not None

    def test_csv_stream(self, blobs, small_arch, tmp_path):
        chart = make_chart(small_arch, 1.0, 6, anchor_seed=0, projection_seed=1, overlap_bound=None)
        path = tmp_path / "traj.csv"
        traj = train_subspace(small_arch, chart, blobs, 25, batch_size=32, eval_every=10, csv_path=path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == TRAJECTORY_COLUMNS
        assert [int(r[0]) for r in rows[1:]] == traj.steps == [0, 10, 20, 25]
        assert float(rows[-1][2]) == traj.last.eval_loss


class TestFullspaceTraining:
    def test_loss_decreases(self, blobs, small_arch):
        x0 = xavier_init(small_arch, 0)
        traj = train_fullspace(small_arch, x0, blobs, 300, batch_size=32, eval_every=100, lr=1e-2)
        assert np.mean(traj.train_losses[-20:]) < traj.train_losses[0]
        assert traj.last.eval_accuracy > 0.5

    def test_negative_steps(self, blobs, small_arch):
        with pytest.raises(InputError):
            train_fullspace(small_arch, xavier_init(small_arch, 0), blobs, -1)
