from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from relfn.checkpoint import checkpoint_bytes
from relfn.datamodel import ObjectProposal, SceneGraphSample, sample_k_shot_episode
from relfn.fewshot import (
    FrozenGraphRepresenter,
    RawFeatureRepresenter,
    eval_fewshot,
    fit_classifier,
    pair_representation,
    run_fewshot,
    train_fewshot,
)
from relfn.gcn import ModelConfig, SceneGraphModel
from relfn.synthworld import SyntheticFeatureProvider, WorldConfig
from relfn.trainer import default_model_config


@pytest.fixture(scope="module")
def frozen(small_world):
    return SceneGraphModel(default_model_config(small_world, mask_resolution=8, spa_depth=2, spa_channels=2))


class TestPairRepresentation:
    def test_small_dims(self):
        sem = torch.arange(4.0).reshape(2, 2)
        spa = torch.arange(8.0).reshape(2, 2, 2)
        v = pair_representation(sem, spa, 0, 1)
        assert v.shape == (12,)
        assert v.tolist() == [0, 1, 0, 1, 2, 3, 2, 3, 4, 5, 6, 7]

    def test_swap_permutes_halves(self):
        rng = np.random.default_rng(0)
        sem, spa = torch.as_tensor(rng.standard_normal((3, 4))), torch.as_tensor(rng.uniform(size=(3, 5, 5)))
        a, b = pair_representation(sem, spa, 0, 2), pair_representation(sem, spa, 2, 0)
        half = 4 + 25
        assert torch.equal(a[:half], b[half:]) and torch.equal(a[half:], b[:half])

    @given(st.integers(1, 16), st.integers(2, 12), st.integers(2, 4))
    @settings(max_examples=30, deadline=None)
    def test_length(self, D, L, n):
        v = pair_representation(torch.zeros(n, D), torch.zeros(n, L, L), 0, n - 1)
        assert v.numel() == 2 * D + 2 * L * L

    def test_pooling(self):
        v = pair_representation(torch.zeros(2, 3), torch.ones(2, 16, 16), 0, 1, pool=8)
        assert v.numel() == 2 * 3 + 2 * 64

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            pair_representation(torch.zeros(2, 3), torch.zeros(2, 4, 4), 0, 2)

    def test_zero_noise_same_layout_same_vector(self):
        cfg = WorldConfig(noise_sigma=0.0, feature_dim=8)
        boxes = ((0.1, 0.1, 0.3, 0.4), (0.5, 0.2, 0.9, 0.6))
        make = lambda sid: SceneGraphSample(sid, tuple(ObjectProposal(b, c) for b, c in zip(boxes, (1, 6))))
        model = SceneGraphModel(ModelConfig(feature_dim=8, mask_resolution=8, predicate_ids=(0, 1), n_categories=12))
        rep = FrozenGraphRepresenter(model, SyntheticFeatureProvider(cfg))
        assert torch.equal(rep(make("a"), 0, 1), rep(make("b"), 0, 1))


def perceptron_separates(x, y, n_classes, epochs=1000):
    """Multiclass perceptron; returns True once it classifies every point."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    w = np.zeros((n_classes, xb.shape[1]))
    for _ in range(epochs):
        mistakes = 0
        for xi, yi in zip(xb, y):
            guess = int(np.argmax(w @ xi))
            if guess != yi:
                w[yi] += xi
                w[guess] -= xi
                mistakes += 1
        if not mistakes:
            return True
    return False


class TestClassifier:
    def test_separable_toy_reaches_full_accuracy(self):
        rng = np.random.default_rng(0)
        k, C, dim = 5, 4, 10
        centers = rng.standard_normal((C, dim)) * 3
        x = np.concatenate([centers[c] + 0.3 * rng.standard_normal((k, dim)) for c in range(C)])
        y = np.repeat(np.arange(C), k)
        assert perceptron_separates(x, y, C)
        clf = fit_classifier(torch.as_tensor(x), torch.as_tensor(y), C, seed=0)
        with torch.no_grad():
            pred = clf(torch.as_tensor(x)).argmax(dim=1).numpy()
        assert (pred == y).mean() == 1.0

    def test_stops_on_flat_loss(self):
        x = torch.zeros(4, 3, dtype=torch.float64)
        clf = fit_classifier(x, torch.tensor([0, 1, 0, 1]), 2)
        assert len(clf.history) < 500

    def test_same_episode_same_parameters(self, small_world, frozen):
        ep = sample_k_shot_episode(small_world, 3, 1)
        rep = FrozenGraphRepresenter(frozen)
        a, b = train_fewshot(ep, small_world, rep), train_fewshot(ep, small_world, rep)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_frozen_model_unchanged(self, small_world, frozen):
        before = checkpoint_bytes(frozen)
        out = run_fewshot(frozen, small_world, ks=(1, 2), seeds=(0,))
        assert checkpoint_bytes(frozen) == before
        assert set(out["summary"]) == {"gcn", "raw"}


class OneHotOracle:
    """Represents each pair by the one-hot of its ground-truth rare predicate."""

    def __init__(self, rare):
        self.rare = list(rare)

    def __call__(self, sample, i, j, pool=None):
        v = torch.zeros(len(self.rare), dtype=torch.float64)
        for s, p, o in sample.triples(self.rare):
            if (s, o) == (i, j):
                v[self.rare.index(p)] = 1.0
        return v


class TestEval:
    def test_perfect_classifier(self, small_world):
        ep = sample_k_shot_episode(small_world, 1, 0)
        res = eval_fewshot(lambda x: x, ep, small_world, OneHotOracle(ep.rare_ids))
        assert res["recall_at_1"] == 1.0
        assert res["recall_at_50"] == 1.0
        assert res["recall_scope"] == "rare predicates only"

    def test_uniform_classifier_picks_lowest_index(self, small_world):
        ep = sample_k_shot_episode(small_world, 1, 0)
        uniform = lambda x: torch.full((x.shape[0], len(ep.rare_ids)), 0.25)
        res = eval_fewshot(uniform, ep, small_world, OneHotOracle(ep.rare_ids))
        counts = Counter(p for _, _, p, _ in ep.eval_pairs)
        assert res["recall_at_1"] == counts[ep.rare_ids[0]] / len(ep.eval_pairs)

    def test_raw_baseline_runs(self, small_world):
        ep = sample_k_shot_episode(small_world, 2, 0)
        rep = RawFeatureRepresenter(8)
        res = eval_fewshot(train_fewshot(ep, small_world, rep), ep, small_world, rep)
        assert 0.0 <= res["recall_at_1"] <= 1.0
        assert res["eval_pairs"] == len(ep.eval_pairs)


def test_k5_not_worse_than_k1(trained_models, default_world):
    """Median recall@1 over seeds is non-decreasing from k=1 to k=5."""
    model = trained_models["full"][0][0]
    out = run_fewshot(model, default_world, ks=(1, 5), seeds=(0, 1, 2), baseline=False)
    s = out["summary"]["gcn"]
    assert s["5"]["median_recall_at_1"] >= s["1"]["median_recall_at_1"]
