import json
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relfn.datamodel import dumps_dataset
from relfn.synthworld import (
    WorldConfig,
    build_rules,
    category_groups,
    generate_world,
    rasterize_mask,
    SyntheticFeatureProvider,
)


@pytest.fixture(scope="module")
def default_world():
    return generate_world(WorldConfig())


def cell_center_oracle(bbox, L):
    """Enumerate every cell and test its center point against the box."""
    x1, y1, x2, y2 = bbox
    out = np.zeros((L, L))
    for r in range(L):
        for c in range(L):
            cx, cy = (c + 0.5) / L, (r + 0.5) / L
            out[r, c] = float(x1 <= cx <= x2 and y1 <= cy <= y2)
    return out


class TestRasterize:
    def test_full_image(self):
        assert np.array_equal(rasterize_mask((0, 0, 1, 1), 4), np.ones((4, 4)))

    def test_left_half(self):
        want = np.zeros((4, 4))
        want[:, :2] = 1
        assert np.array_equal(rasterize_mask((0, 0, 0.5, 1), 4), want)

    def test_tiny_centered_box(self):
        m = rasterize_mask((0.49, 0.49, 0.51, 0.51), 4)
        assert m.sum() == 1
        # no cell center lies inside, so the cell holding the box center is lit
        assert cell_center_oracle((0.49, 0.49, 0.51, 0.51), 4).sum() == 0
        assert m[2, 2] == 1

    @given(st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.integers(4, 20))
    @settings(max_examples=100)
    def test_matches_enumeration(self, x1, y1, w, h, L):
        box = (x1, y1, min(1.0, x1 + w), min(1.0, y1 + h))
        want = cell_center_oracle(box, L)
        if want.any():
            assert np.array_equal(rasterize_mask(box, L), want)

    @pytest.mark.parametrize("L", [8, 32, 128])
    def test_area_converges(self, L):
        rng = np.random.default_rng(L)
        for _ in range(50):
            x1, y1 = rng.uniform(0, 0.7, 2)
            x2, y2 = x1 + rng.uniform(0.05, 0.3), y1 + rng.uniform(0.05, 0.3)
            area = (x2 - x1) * (y2 - y1)
            assert abs(rasterize_mask((x1, y1, x2, y2), L).sum() / L**2 - area) <= 2 / L


class TestGenerateWorld:
    def test_seed_7_byte_identical(self, tmp_path):
        cfg = WorldConfig(seed=7, samples_per_split=(30, 5, 10))
        assert dumps_dataset(generate_world(cfg)) == dumps_dataset(generate_world(cfg))

    def test_seed_matters(self):
        a = WorldConfig(seed=1, samples_per_split=(5, 1, 1))
        b = WorldConfig(seed=2, samples_per_split=(5, 1, 1))
        assert dumps_dataset(generate_world(a)) != dumps_dataset(generate_world(b))

    def test_zero_noise_shares_features(self):
        ds = generate_world(WorldConfig(noise_sigma=0.0, samples_per_split=(40, 5, 5)))
        feats = defaultdict(set)
        for s in ds.train:
            for p in s.proposals:
                feats[p.category_id].add(p.feature)
        assert all(len(v) == 1 for v in feats.values())

    def test_rare_test_counts(self, default_world):
        counts = Counter(r.predicate_id for s in default_world.test for r in s.relationships)
        for p in default_world.vocabulary.rare:
            assert counts[p] >= 20

    def test_shape(self, default_world):
        v = default_world.vocabulary
        assert (v.n_categories, len(v.frequent), len(v.rare)) == (12, 6, 4)
        assert [len(default_world.split(n)) for n in ("train", "val", "test")] == [600, 100, 200]
        assert all(2 <= s.n_nodes <= 6 for n in ("train", "val", "test") for s in default_world.split(n))
        assert default_world.feature_dim == 64

    def test_groups_afford_predicates(self, default_world):
        rules = build_rules(WorldConfig())
        for name in ("train", "val", "test"):
            for s in default_world.split(name):
                for r in s.relationships:
                    rule = rules[r.predicate_id]
                    assert s.categories[r.subject_idx] in rule.subject_group
                    assert s.categories[r.object_idx] in rule.object_group

    def test_rare_rules_reuse_one_frequent_layout(self):
        cfg = WorldConfig()
        rules = build_rules(cfg)
        freq = rules[: cfg.n_frequent_predicates]
        for rule in rules[cfg.n_frequent_predicates:]:
            same = [f for f in freq if f.displacement == rule.displacement]
            assert len(same) == 1
            assert same[0].object_group != rule.object_group

    def test_displacement_mean(self, default_world):
        rules = build_rules(WorldConfig())
        offsets = defaultdict(list)
        for name in ("train", "val", "test"):
            for s in default_world.split(name):
                for r in s.relationships:
                    a, b = s.proposals[r.subject_idx].center, s.proposals[r.object_idx].center
                    offsets[r.predicate_id].append((b[0] - a[0], b[1] - a[1]))
        for p, off in offsets.items():
            off = np.asarray(off)
            n = len(off)
            sigma = off.std(axis=0, ddof=1)
            err = np.abs(off.mean(axis=0) - np.asarray(rules[p].displacement))
            assert np.all(err <= 3 * sigma / np.sqrt(n)), (p, err, sigma)

    def test_categories_in_groups(self):
        groups = category_groups(WorldConfig())
        assert sorted(c for g in groups for c in g) == list(range(12))

    def test_infeasible_geometry_names_rule(self):
        with pytest.raises(ValueError, match=r"rule \d+: displacement"):
            generate_world(WorldConfig(radius=0.95, samples_per_split=(1, 1, 1)))


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = WorldConfig(seed=5, noise_sigma=0.1)
        path = tmp_path / "w.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert WorldConfig.from_json(path) == cfg

    @pytest.mark.parametrize("bad", [{"feature_dim": 1}, {"mask_resolution": 3}, {"noise_sigma": -1.0},
                                     {"n_categories": 0}, {"samples_per_split": [0, 1, 1]}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            WorldConfig.from_dict(bad)

    def test_unknown_field(self):
        with pytest.raises(ValueError):
            WorldConfig.from_dict({"colour": 3})


def test_synthetic_provider_is_a_function_of_the_sample(small_world):
    prov = SyntheticFeatureProvider(WorldConfig(seed=3))
    s = small_world.train[0]
    assert np.array_equal(prov(s), prov(s))
    assert prov(s).shape == (s.n_nodes, 64)
