import numpy as np
import pytest

from beef import ops
from beef.gradcheck import grad_check, relu_margin
from beef.gradsuite import CASES, MIN_RELU_MARGIN, TOLERANCE, build_case, run_case
from beef.tensor import Tensor, precision


class TestSuiteCases:
    @pytest.mark.parametrize("name", sorted(CASES))
    def test_twenty_kink_safe_seeds(self, name):
        result = run_case(name, seeds=20, max_coords=6)
        assert len(result.seeds) == 20
        assert result.max_error < TOLERANCE, (name, result.max_error)

    def test_every_required_op_is_covered(self):
        required = {
            "conv2plus1d_block", "encode", "space_time_avg_pool", "embed_goal", "gru_cell",
            "decode_trajectory", "decode_control", "fuse_bilinear", "fuse_block", "fuse_mutan",
            "fuse_mlb", "fuse_mfb", "fuse_cat_mlp", "classify_cause", "language_head_sequence_loss",
            "drive_loss", "explain_loss",
        }
        assert required <= set(CASES)

    def test_cases_are_built_in_float64(self):
        _, inputs, _ = build_case("fuse_block", 0)
        assert all(t.dtype == np.float64 for t in inputs)


class TestReluMargin:
    def test_reports_smallest_input(self):
        a = Tensor([0.5, -0.01, 2.0])
        assert relu_margin(lambda: ops.relu(a)) == pytest.approx(0.01)

    def test_no_relu_is_infinite(self):
        a = Tensor([1.0])
        assert relu_margin(lambda: ops.tanh(a)) == float("inf")

    def test_observer_removed_after_use(self):
        relu_margin(lambda: ops.relu(Tensor([1.0])))
        assert ops.relu_observers == []

    def test_kink_straddle_breaks_central_difference(self):
        with precision(np.float64):
            a = Tensor([1e-7, 1.0], requires_grad=True)
            assert relu_margin(lambda: ops.relu(a)) < MIN_RELU_MARGIN
            assert grad_check(lambda: ops.relu(a), [a]) > 1e-2
