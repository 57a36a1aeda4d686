import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_recall
from relfn.metrics import ImagePrediction, ImageTruth, exact_iou, recall_at_k

KS = (1, 5, 50, 100)


def random_fixture(seed, n_images=5):
    """Five images with random rankings over every (i, p, j) and random GT subsets."""
    rng = np.random.default_rng(seed)
    preds, truths = [], []
    for _ in range(n_images):
        n, P = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        universe = [(i, p, j) for i in range(n) for p in range(P) for j in range(n) if i != j]
        scores = rng.uniform(size=len(universe))
        ranked = [(*universe[k], float(scores[k])) for k in np.argsort(-scores, kind="stable")]
        gt = [universe[k] for k in rng.choice(len(universe), size=min(len(universe), int(rng.integers(1, 4))), replace=False)]
        preds.append(ImagePrediction(tuple(ranked)))
        truths.append(ImageTruth(tuple(gt)))
    return preds, truths


class TestRecallAtK:
    def test_all_hit(self):
        res = recall_at_k([ImagePrediction(((0, 1, 1, 0.9), (1, 0, 0, 0.1)))], [ImageTruth(((0, 1, 1), (1, 0, 0)))], 2)
        assert res.mean[2] == 1.0

    def test_half(self):
        pred = ImagePrediction(((0, 0, 1, 0.9), (1, 0, 0, 0.5), (0, 1, 1, 0.1)))
        assert recall_at_k([pred], [ImageTruth(((0, 0, 1), (0, 1, 1)))], 2).mean[2] == 0.5

    @pytest.mark.parametrize("seed", range(20))
    def test_randomized_fixture_matches_set_intersection(self, seed):
        preds, truths = random_fixture(seed)
        res = recall_at_k(preds, truths, KS)
        for k in KS:
            per = [brute_force_recall(p.tuples, t.triples, k) for p, t in zip(preds, truths)]
            assert res.per_image[k] == per
            assert res.mean[k] == math.fsum(per) / len(per)

    @pytest.mark.parametrize("seed", range(20))
    def test_monotone_in_k(self, seed):
        res = recall_at_k(*random_fixture(seed), KS)
        vals = [res.mean[k] for k in KS]
        assert vals == sorted(vals)

    @given(st.integers(0, 10_000), st.randoms(use_true_random=False))
    @settings(max_examples=40, deadline=None)
    def test_image_order_does_not_matter(self, seed, rnd):
        preds, truths = random_fixture(seed)
        order = list(range(5))
        rnd.shuffle(order)
        a = recall_at_k(preds, truths, KS)
        b = recall_at_k([preds[k] for k in order], [truths[k] for k in order], KS)
        for k in KS:
            assert a.mean[k] == b.mean[k]

    @pytest.mark.parametrize("seed", range(5))
    def test_k_beyond_universe_is_one(self, seed):
        preds, truths = random_fixture(seed)
        assert recall_at_k(preds, truths, 10_000).mean[10_000] == 1.0

    def test_zero_gt_images_excluded(self):
        preds = [ImagePrediction(((0, 0, 1, 1.0),)), ImagePrediction(((0, 0, 1, 1.0),))]
        truths = [ImageTruth(((0, 0, 1),)), ImageTruth(())]
        res = recall_at_k(preds, truths, 1)
        assert res.mean[1] == 1.0
        assert res.per_image[1] == [1.0, None]

    def test_bad_k(self):
        with pytest.raises(ValueError):
            recall_at_k([], [], 0)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            recall_at_k([], [], 5, mode="detcls")

    def test_to_dict_keys(self):
        preds, truths = random_fixture(0)
        d = recall_at_k(preds, truths, (50, 100)).to_dict()
        assert {"recall@50", "recall@100"} <= set(d)


class TestModes:
    def test_sgcls_needs_labels_to_match(self):
        pred = ImagePrediction(((0, 0, 1, 0.9),), labels=(3, 4))
        good = ImageTruth(((0, 0, 1),), labels=(3, 4))
        bad = ImageTruth(((0, 0, 1),), labels=(3, 5))
        assert recall_at_k([pred], [good], 1, "sgcls").mean[1] == 1.0
        assert recall_at_k([pred], [bad], 1, "sgcls").mean[1] == 0.0

    def test_sggen_box_threshold(self):
        gt_boxes = ((0.0, 0.0, 0.5, 0.5), (0.5, 0.5, 1.0, 1.0))
        truth = ImageTruth(((0, 0, 1),), labels=(1, 2), boxes=gt_boxes)
        # the prediction refers to proposals in its own index space
        near = ImagePrediction(((1, 0, 0, 0.9),), labels=(2, 1), boxes=((0.5, 0.5, 1.0, 0.95), (0.0, 0.0, 0.5, 0.45)))
        far = ImagePrediction(((1, 0, 0, 0.9),), labels=(2, 1), boxes=((0.5, 0.5, 1.0, 1.0), (0.0, 0.0, 0.2, 0.2)))
        assert recall_at_k([near], [truth], 1, "sggen").mean[1] == 1.0
        assert recall_at_k([far], [truth], 1, "sggen").mean[1] == 0.0


class TestExactIoU:
    def test_identical(self):
        assert exact_iou((0.1, 0.2, 0.5, 0.7), (0.1, 0.2, 0.5, 0.7)) == 1.0

    def test_disjoint(self):
        assert exact_iou((0, 0, 0.2, 0.2), (0.5, 0.5, 1, 1)) == 0.0

    def test_half(self):
        assert exact_iou((0, 0, 1, 1), (0, 0, 0.5, 1)) == 0.5
