import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beef.decoder import (
    ControlCommand,
    ControlHead,
    GRUCell,
    Trajectory,
    TrajectoryDecoder,
    drive_loss,
    flatten_trajectory,
    gru_cell,
    unflatten_trajectory,
)
from beef.tensor import ShapeError, Tensor


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _scalar_gru(x, h, wr, br, wz, bz, wh, bh):
    r = _sig(wr[0] * x + wr[1] * h + br)
    z = _sig(wz[0] * x + wz[1] * h + bz)
    ht = np.tanh(wh[0] * x + wh[1] * r * h + bh)
    return (1 - z) * h + z * ht


class TestGRU:
    def test_zero_fixed_point(self, rng):
        cell = GRUCell(3, 4, rng)
        for p in cell.parameters():
            p.data = np.zeros_like(p.data)
        assert not gru_cell(Tensor(rng.standard_normal(3)), Tensor(np.zeros(4)), cell).numpy().any()

    def test_scalar_oracle(self, rng):
        cell = GRUCell(1, 1, rng)
        w = dict(wr=(0.5, -0.3), br=0.1, wz=(1.2, 0.4), bz=-0.2, wh=(-0.7, 0.9), bh=0.05)
        cell.W_r.data = np.array([w["wr"]], dtype=np.float64)
        cell.b_r.data = np.array([w["br"]])
        cell.W_z.data = np.array([w["wz"]])
        cell.b_z.data = np.array([w["bz"]])
        cell.W_h.data = np.array([w["wh"]])
        cell.b_h.data = np.array([w["bh"]])
        for x, h in [(0.3, -0.5), (2.0, 0.9), (-1.0, 0.0)]:
            got = gru_cell(Tensor([x], np.float64), Tensor([h], np.float64), cell).item()
            assert got == pytest.approx(_scalar_gru(x, h, **w), abs=1e-12)

    @given(st.integers(0, 10_000))
    def test_bounded_from_zero_state(self, seed):
        rng = np.random.default_rng(seed)
        cell = GRUCell(3, 5, rng)
        x = Tensor(rng.standard_normal(3) * 10)
        assert (np.abs(gru_cell(x, Tensor(np.zeros(5)), cell).numpy()) <= 1).all()

    def test_shape_check(self, rng):
        with pytest.raises(ShapeError):
            gru_cell(Tensor(np.zeros(2)), Tensor(np.zeros(4)), GRUCell(3, 4, rng))


class TestTrajectoryDecoder:
    def test_zero_weights_zero_points(self, rng):
        dec = TrajectoryDecoder(5, 4, 13, rng)
        for p in dec.parameters():
            p.data = np.zeros_like(p.data)
        traj, m = dec(Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(2)))
        assert traj.shape == (13, 2) and m.shape == (26,)
        assert not traj.numpy().any()

    def test_composition_oracle(self, rng):
        dec = TrajectoryDecoder(3, 4, 2, rng)
        r, g = rng.standard_normal(2), rng.standard_normal(1)
        traj, m = dec(Tensor(r, np.float32), Tensor(g, np.float32))
        inp = Tensor(np.concatenate([r, g]), np.float32)
        h = Tensor(np.zeros(4), np.float32)
        points = []
        for _ in range(2):
            h = gru_cell(inp, h, dec.gru)
            points.append(dec.head(h).numpy())
        np.testing.assert_array_equal(traj.numpy(), np.stack(points))
        np.testing.assert_array_equal(m.numpy(), np.stack(points).ravel())

    def test_batched_rows_match_single(self, rng):
        dec = TrajectoryDecoder(5, 4, 3, rng)
        r, g = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
        batch = dec(Tensor(r), Tensor(g))[1].numpy()
        for i in range(4):
            np.testing.assert_allclose(batch[i], dec(Tensor(r[i]), Tensor(g[i]))[1].numpy(), atol=1e-6)

    def test_goal_changes_output(self, rng):
        dec = TrajectoryDecoder(5, 4, 3, rng)
        r = Tensor(rng.standard_normal(3))
        left = dec(r, Tensor([1.0, 0.0]))[1].numpy()
        right = dec(r, Tensor([0.0, 1.0]))[1].numpy()
        assert not np.array_equal(left, right)

    def test_rank_mismatch(self, rng):
        with pytest.raises(ShapeError):
            TrajectoryDecoder(5, 4, 3, rng)(Tensor(np.zeros((1, 3))), Tensor(np.zeros(2)))


class TestControlHead:
    def test_zero_weights(self, rng):
        head = ControlHead(4, rng)
        for p in head.parameters():
            p.data = np.zeros_like(p.data)
        assert not head(Tensor(np.ones(3)), Tensor(np.ones(1))).numpy().any()

    def test_identity_slice_echo(self, rng):
        head = ControlHead(4, rng)
        w = np.zeros((2, 4), dtype=np.float32)
        w[0, 1] = w[1, 2] = 1.0
        head.proj.weight.data = w
        out = head(Tensor([0.5, -1.5, 2.5]), Tensor([9.0])).numpy()
        np.testing.assert_array_equal(out, [-1.5, 2.5])

    def test_command_type(self):
        with pytest.raises(ValueError):
            ControlCommand(float("nan"), 0.0)


class TestDriveLoss:
    def test_equal_is_zero(self, rng):
        a = rng.standard_normal((13, 2))
        assert drive_loss(Tensor(a), Tensor(a)).item() == 0.0

    def test_constant_offset(self):
        assert drive_loss(Tensor(np.zeros((13, 2))), Tensor(np.ones((13, 2)))).item() == 1.0

    def test_loop_oracle(self, rng):
        a, b = rng.standard_normal((3, 13, 2)), rng.standard_normal((3, 13, 2))
        s = 0.0
        for i in range(3):
            for k in range(13):
                for c in range(2):
                    s += (a[i, k, c] - b[i, k, c]) ** 2
        assert drive_loss(Tensor(a, np.float64), Tensor(b, np.float64)).item() == pytest.approx(s / 78, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            drive_loss(Tensor(np.zeros((13, 2))), Tensor(np.zeros((12, 2))))


class TestTrajectoryType:
    @given(st.integers(1, 20))
    def test_flatten_roundtrip(self, K):
        pts = np.random.default_rng(K).standard_normal((K, 2))
        m = flatten_trajectory(pts)
        assert m.shape == (2 * K,) and m[0] == pts[0, 0] and m[1] == pts[0, 1]
        np.testing.assert_array_equal(unflatten_trajectory(m), pts)

    def test_validation(self):
        with pytest.raises(ShapeError):
            Trajectory(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            Trajectory(np.array([[0.0, np.inf]]))
        with pytest.raises(ShapeError):
            unflatten_trajectory(np.zeros(5))
        t = Trajectory(np.zeros((13, 2)))
        assert t.K == 13 and t.to_dict()["seconds_before"] == 2.0
