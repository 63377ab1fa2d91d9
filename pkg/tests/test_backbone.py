import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beef import ops
from beef.backbone import (
    GOALS,
    Backbone,
    BackboneConfig,
    Conv2Plus1D,
    GoalEmbedding,
    LayerActivation,
    goal_index,
    space_time_avg_pool,
)
from beef.tensor import ShapeError, Tape, Tensor


def _small_config(**kw):
    base = dict(channels=(4, 4, 6), spatial_strides=(2, 1, 2), temporal_strides=(1, 2, 1), goal_dim=3)
    base.update(kw)
    return BackboneConfig(**base)


class TestConv2Plus1D:
    def test_identity_kernels_give_relu(self, rng):
        stage = Conv2Plus1D(3, 3, 1, 1, 1, 1, False, rng)
        stage.conv_s.weight.data = np.eye(3, dtype=np.float32).reshape(1, 1, 1, 3, 3)
        stage.conv_t.weight.data = np.eye(3, dtype=np.float32).reshape(1, 1, 1, 3, 3)
        x = rng.standard_normal((2, 4, 5, 5, 3)).astype(np.float32)
        np.testing.assert_array_equal(stage(Tensor(x)).numpy(), np.maximum(x, 0))

    def test_stride_formula_on_full_clip_shape(self):
        cfg = BackboneConfig(channels=(8, 8), spatial_strides=(2, 1), temporal_strides=(1, 1))
        assert cfg.stage_shapes(21, 90, 160)[0] == (21, 45, 80, 8)

    def test_stage_shapes_match_forward(self, rng):
        cfg = _small_config()
        bb = Backbone(cfg, rng)
        enc = bb.encode(Tensor(rng.standard_normal((1, 5, 3, 9, 7))), taps=(1, 2, 3))
        for (shape, L) in zip(cfg.stage_shapes(5, 9, 7), (1, 2, 3)):
            assert enc.taps[L].value.shape[1:] == shape

    def test_unbatched_input(self, rng):
        stage = Conv2Plus1D(2, 3, 2, 1, 3, 3, False, rng)
        x = rng.standard_normal((4, 6, 6, 2)).astype(np.float32)
        single = stage(Tensor(x)).numpy()
        batched = stage(Tensor(x[None])).numpy()[0]
        np.testing.assert_array_equal(single, batched)

    def test_residual_when_shapes_match(self, rng):
        stage = Conv2Plus1D(3, 3, 1, 1, 3, 3, True, rng)
        for p in stage.parameters():
            p.data = np.zeros_like(p.data)
        x = rng.standard_normal((1, 3, 4, 4, 3)).astype(np.float32)
        np.testing.assert_array_equal(stage(Tensor(x)).numpy(), x)


class TestEncode:
    def test_zero_clip_zero_bias_gives_zero(self, rng):
        bb = Backbone(_small_config(), rng)
        enc = bb.encode(Tensor(np.zeros((2, 4, 3, 8, 8))))
        assert not enc.r.numpy().any()

    def test_single_tap(self, rng):
        bb = Backbone(_small_config(), rng)
        enc = bb.encode(Tensor(rng.standard_normal((4, 3, 8, 8))), taps={3})
        assert list(enc.taps) == [3]
        assert isinstance(enc.taps[3], LayerActivation) and enc.taps[3].layer == 3
        assert enc.r.shape == (6,)

    def test_deterministic(self):
        clip = np.random.default_rng(0).standard_normal((2, 4, 3, 8, 8))
        r1 = Backbone(_small_config(), np.random.default_rng(7)).encode(Tensor(clip)).r.numpy()
        r2 = Backbone(_small_config(), np.random.default_rng(7)).encode(Tensor(clip)).r.numpy()
        assert r1.tobytes() == r2.tobytes()

    def test_bad_inputs(self, rng):
        bb = Backbone(_small_config(), rng)
        with pytest.raises(ValueError):
            bb.encode(Tensor(np.zeros((1, 4, 3, 8, 8))), taps=(4,))
        with pytest.raises(ShapeError):
            bb.encode(Tensor(np.zeros((1, 4, 2, 8, 8))))
        with pytest.raises(ShapeError):
            bb.encode(Tensor(np.zeros((1, 1, 3, 8, 8))))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BackboneConfig(channels=(8,), spatial_strides=(1,), temporal_strides=(1,)).validate()
        with pytest.raises(ValueError):
            BackboneConfig.from_dict({"channels": [4, 4], "depth": 2})
        cfg = BackboneConfig()
        assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


class TestPooling:
    def test_constant(self):
        assert (space_time_avg_pool(Tensor(np.full((2, 3, 4, 5), 7.0))).numpy() == 7.0).all()

    def test_two_frame_mean(self):
        np.testing.assert_array_equal(space_time_avg_pool(Tensor(np.array([2.0, 4.0]).reshape(2, 1, 1, 1))).numpy(), [3.0])

    def test_loop_oracle(self, rng):
        a = rng.standard_normal((3, 2, 2, 4))
        want = np.zeros(4)
        for d in range(4):
            s = 0.0
            for t in range(3):
                for i in range(2):
                    for j in range(2):
                        s += a[t, i, j, d]
            want[d] = s / 12
        np.testing.assert_allclose(space_time_avg_pool(Tensor(a, np.float64)).numpy(), want, atol=1e-12)

    @given(st.permutations(list(range(4))))
    def test_commutes_with_channel_permutation(self, perm):
        a = np.random.default_rng(3).standard_normal((2, 3, 3, 4))
        pooled = space_time_avg_pool(Tensor(a, np.float64)).numpy()
        permuted = space_time_avg_pool(Tensor(a[..., perm], np.float64)).numpy()
        np.testing.assert_allclose(permuted, pooled[perm], atol=1e-12)

    def test_rank_check(self):
        with pytest.raises(ShapeError):
            space_time_avg_pool(Tensor(np.ones((2, 3))))


class TestGoalEmbedding:
    def test_identity_table_one_hot(self, rng):
        emb = GoalEmbedding(3, rng)
        emb.table.data = np.eye(3, dtype=np.float32)
        for i, g in enumerate(GOALS):
            np.testing.assert_array_equal(emb(g).numpy(), np.eye(3)[i])

    def test_gradient_touches_one_row(self, rng):
        emb = GoalEmbedding(4, rng)
        tape = Tape()
        with tape:
            loss = ops.sum(ops.square(emb("left")))
        tape.backward(loss)
        assert emb.table.grad[0].any() and not emb.table.grad[1:].any()

    def test_default_width(self, rng):
        assert GoalEmbedding(BackboneConfig().goal_dim, rng)("straight").shape == (16,)

    def test_goal_tokens(self):
        assert goal_index("right") == 2 and goal_index(1) == 1
        with pytest.raises(ValueError):
            goal_index("reverse")
        with pytest.raises(ValueError):
            goal_index(3)
