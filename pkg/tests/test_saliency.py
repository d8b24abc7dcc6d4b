import math

import numpy as np
import pytest
import reference as ref
from conftest import as_flat_lists, random_instance, taskvector_from

from taskvec import (
    ParameterMask,
    SaliencyMatrix,
    SharedMask,
    compute_absolute_score,
    compute_saliency,
    load_checkpoint,
    or_masks,
    parameter_saliency_mask,
    random_layer_mask,
    save_checkpoint,
    threshold_mask,
)


def tvs_from_instances(tv_values, ids=None):
    ids = ids or [f"t{i}" for i in range(len(tv_values))]
    return [taskvector_from(vals, tid) for vals, tid in zip(tv_values, ids)]


class TestComputeSaliency:
    def test_single_task_scores_zero(self):
        tv = taskvector_from({"a": [1.0, 2.0], "b": [[3.0, 4.0]]})
        matrix = compute_saliency([tv])
        assert matrix.scores.shape == (1, 2)
        assert not matrix.scores.any()

    def test_two_task_hand_value(self):
        # layer values [1,-1] and [3,1]: cross-task mean [2,0], both rows
        # deviate by [1,1], so both scores are 1.0
        t1 = taskvector_from({"w": [1.0, -1.0]}, "t1")
        t2 = taskvector_from({"w": [3.0, 1.0]}, "t2")
        matrix = compute_saliency([t1, t2])
        np.testing.assert_array_equal(matrix.scores, [[1.0], [1.0]])

    def test_three_task_scalar_layer(self):
        tvs = tvs_from_instances([{"w": [0.0]}, {"w": [3.0]}, {"w": [6.0]}])
        matrix = compute_saliency(tvs)
        np.testing.assert_array_equal(matrix.scores.ravel(), [3.0, 0.0, 3.0])

    def test_two_task_rows_identical(self, rng):
        vals1 = {"a": rng.normal(size=5).astype(np.float32)}
        vals2 = {"a": rng.normal(size=5).astype(np.float32)}
        matrix = compute_saliency(tvs_from_instances([vals1, vals2]))
        np.testing.assert_array_equal(matrix.scores[0], matrix.scores[1])

    def test_nonnegative_and_labels(self, rng):
        _, tv_values = random_instance(5)
        matrix = compute_saliency(tvs_from_instances(tv_values))
        assert (matrix.scores >= 0).all()
        assert len(matrix.task_ids) == len(tv_values)
        assert matrix.layer_names == sorted(tv_values[0])

    def test_translation_invariance_per_layer(self, rng):
        # adding one constant tensor to every task at a layer leaves that
        # column unchanged up to float32 rounding
        base_vals = [
            {"w": rng.normal(size=6).astype(np.float32)} for _ in range(3)
        ]
        before = compute_saliency(tvs_from_instances(base_vals))
        shift = rng.normal(size=6).astype(np.float32)
        shifted = [{"w": v["w"] + shift} for v in base_vals]
        after = compute_saliency(tvs_from_instances(shifted))
        np.testing.assert_allclose(after.scores, before.scores, atol=1e-6)

    def test_positive_scale_equivariance(self, rng):
        tv_values = [
            {"w": rng.normal(size=6).astype(np.float32)} for _ in range(3)
        ]
        before = compute_saliency(tvs_from_instances(tv_values))
        doubled = [{"w": v["w"] * np.float32(2.0)} for v in tv_values]
        after = compute_saliency(tvs_from_instances(doubled))
        np.testing.assert_array_equal(after.scores, 2.0 * before.scores)

    def test_empty_list_rejected(self):
        with pytest.raises(Exception):
            compute_saliency([])

    def test_matches_reference_on_random_instances(self):
        for seed in range(30):
            _, tv_values = random_instance(seed)
            tvs = tvs_from_instances(tv_values)
            got = compute_saliency(tvs).scores
            want = np.array(ref.ref_saliency([as_flat_lists(v) for v in tv_values]))
            np.testing.assert_allclose(got, want, atol=1e-12)


class TestAbsoluteScore:
    def test_zero_vector(self):
        matrix = compute_absolute_score([taskvector_from({"w": [0.0, 0.0]})])
        assert not matrix.scores.any()

    def test_hand_value(self):
        matrix = compute_absolute_score([taskvector_from({"w": [-2.0, 4.0]})])
        assert matrix.scores.tolist() == [[3.0]]

    def test_independent_of_other_tasks(self, rng):
        a = {"w": rng.normal(size=4).astype(np.float32)}
        b = {"w": rng.normal(size=4).astype(np.float32)}
        alone = compute_absolute_score(tvs_from_instances([a]))
        paired = compute_absolute_score(tvs_from_instances([a, b]))
        np.testing.assert_array_equal(alone.scores[0], paired.scores[0])


class TestThresholdMask:
    def matrix(self, rows, layers=None):
        rows = np.atleast_2d(rows)
        layers = layers or [f"l{i}" for i in range(rows.shape[1])]
        return SaliencyMatrix(
            task_ids=[f"t{i}" for i in range(rows.shape[0])],
            layer_names=layers,
            scores=rows,
        )

    def test_eta_zero_keeps_all(self):
        masks = threshold_mask(self.matrix([[0.1, 0.5, 0.3, 0.9]]), 0.0)
        assert masks.masks.tolist() == [[1, 1, 1, 1]]

    def test_half_pruning_hand_case(self):
        # floor(4 * 0.5) = 2, threshold is the 2nd smallest (0.3); strictly
        # larger scores survive
        masks = threshold_mask(self.matrix([[0.1, 0.5, 0.3, 0.9]]), 0.5)
        assert masks.masks.tolist() == [[0, 1, 0, 1]]

    def test_all_tied_scores_prune_everything(self):
        masks = threshold_mask(self.matrix([[0.0, 0.0, 0.0]]), 0.7)
        assert masks.masks.tolist() == [[0, 0, 0]]

    def test_eta_one_prunes_all(self):
        masks = threshold_mask(self.matrix([[0.1, 0.2]]), 1.0)
        assert masks.masks.tolist() == [[0, 0]]

    def test_cardinality_with_distinct_scores(self, rng):
        for _ in range(20):
            n_layers = int(rng.integers(1, 15))
            scores = rng.permutation(np.arange(1, n_layers + 1)).astype(float)
            eta = float(rng.uniform(0, 1))
            masks = threshold_mask(self.matrix([scores]), eta)
            expected = n_layers - math.floor(n_layers * eta)
            assert masks.masks.sum() == expected

    def test_eta_out_of_range(self):
        with pytest.raises(ValueError):
            threshold_mask(self.matrix([[1.0]]), 1.5)

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            threshold_mask(self.matrix([[float("nan"), 1.0]]), 0.5)

    def test_negative_scores_rejected_at_construction(self):
        with pytest.raises(ValueError, match="nonnegative"):
            self.matrix([[-0.1, 1.0]])

    def test_matches_reference(self):
        rng = np.random.default_rng(42)
        for _ in range(40):
            k = int(rng.integers(1, 5))
            n_layers = int(rng.integers(1, 13))
            scores = rng.uniform(0, 1, size=(k, n_layers))
            eta = float(rng.choice([0.0, 0.3, 0.5, 0.7, 1.0]))
            got = threshold_mask(self.matrix(scores), eta).masks.tolist()
            want = ref.ref_threshold([list(r) for r in scores], eta)
            assert got == want


class TestOrMasks:
    def test_or_of_two_rows(self):
        masks = threshold_mask(
            SaliencyMatrix(
                task_ids=["a", "b"],
                layer_names=["x", "y", "z"],
                scores=[[3.0, 1.0, 2.0], [1.0, 2.0, 3.0]],
            ),
            2 / 3,
        )
        assert masks.masks.tolist() == [[1, 0, 0], [0, 0, 1]]
        assert or_masks(masks).values.tolist() == [1, 0, 1]

    def test_dominates_every_row(self, rng):
        for seed in range(20):
            _, tv_values = random_instance(seed)
            masks = threshold_mask(
                compute_saliency(tvs_from_instances(tv_values)), 0.7
            )
            shared = or_masks(masks)
            assert (shared.values >= masks.masks).all()

    def test_single_row_unchanged(self):
        masks = threshold_mask(
            SaliencyMatrix(task_ids=["a"], layer_names=["x", "y"], scores=[[2.0, 1.0]]),
            0.5,
        )
        assert or_masks(masks).values.tolist() == masks.masks[0].tolist()


class TestRandomLayerMask:
    def test_eta_zero_all_ones(self):
        assert random_layer_mask(5, 0.0, seed=1).values.tolist() == [1] * 5

    def test_eta_one_all_zeros(self):
        assert random_layer_mask(5, 1.0, seed=1).values.tolist() == [0] * 5

    def test_exact_retention_and_reproducibility(self):
        m1 = random_layer_mask(10, 0.7, seed=99)
        m2 = random_layer_mask(10, 0.7, seed=99)
        assert m1.values.sum() == 3
        assert m1.values.tolist() == m2.values.tolist()
        m3 = random_layer_mask(10, 0.7, seed=100)
        assert m1.values.sum() == m3.values.sum()

    def test_accepts_names(self):
        mask = random_layer_mask(["a", "b", "c"], 0.5, seed=0)
        assert mask.layer_names == ["a", "b", "c"]
        assert mask.values.sum() == 2


class TestParameterMask:
    def test_single_task_all_zero(self):
        tv = taskvector_from({"w": [1.0, 2.0, 3.0]})
        mask = parameter_saliency_mask([tv], 0.5)
        assert not mask.entries["w"].any()

    def test_eta_zero_all_ones(self):
        tv = taskvector_from({"w": [1.0, 2.0]})
        mask = parameter_saliency_mask([tv], 0.0)
        assert mask.entries["w"].all()

    def test_hand_case(self):
        # deviations per task are [1,1,0,0]; with eta=0.5 the threshold is
        # the 2nd smallest (0), keeping the strictly positive pair
        t1 = taskvector_from({"w": [1.0, -1.0, 0.0, 0.0]}, "t1")
        t2 = taskvector_from({"w": [-1.0, 1.0, 0.0, 0.0]}, "t2")
        mask = parameter_saliency_mask([t1, t2], 0.5)
        assert mask.entries["w"].tolist() == [True, True, False, False]

    def test_serializes_as_checkpoint(self, tmp_path):
        t1 = taskvector_from({"w": [1.0, -1.0, 0.0, 0.0]}, "t1")
        t2 = taskvector_from({"w": [-1.0, 1.0, 0.0, 0.0]}, "t2")
        mask = parameter_saliency_mask([t1, t2], 0.5)
        path = tmp_path / "mask.safetensors"
        save_checkpoint(mask.to_checkpoint(), path)
        loaded = ParameterMask.from_checkpoint(load_checkpoint(path))
        assert loaded.entries["w"].tolist() == mask.entries["w"].tolist()


class TestSerde:
    def test_saliency_json_round_trip(self, rng):
        _, tv_values = random_instance(3)
        matrix = compute_saliency(tvs_from_instances(tv_values))
        again = SaliencyMatrix.from_json_dict(matrix.to_json_dict())
        assert again.task_ids == matrix.task_ids
        assert again.layer_names == matrix.layer_names
        np.testing.assert_array_equal(again.scores, matrix.scores)

    def test_shared_mask_json_round_trip(self):
        shared = SharedMask(layer_names=["a", "b"], values=[1, 0])
        again = SharedMask.from_json_dict(shared.to_json_dict())
        assert again.layer_names == shared.layer_names
        assert again.values.tolist() == shared.values.tolist()
