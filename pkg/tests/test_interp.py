import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from relfn.datamodel import ObjectProposal, SceneGraphSample
from relfn.gcn import ModelConfig, SceneGraphModel
from relfn.interp import (
    category_means,
    centroid,
    compose_heatmap,
    embedding_projection,
    projection_csv,
    read_pgm,
    semantic_neighbors,
    spatial_heatmap,
    to_gray,
    write_pgm,
)
from relfn.synthworld import rasterize_mask


def identity_model(D=6, L=8, P=2):
    cfg = ModelConfig(feature_dim=D, mask_resolution=L, predicate_ids=tuple(range(3, 3 + P)), n_categories=4,
                      sem_depth=1, spa_depth=3, spa_channels=2)
    model = SceneGraphModel(cfg).double()
    model.reset_identity()  # a single linear layer, so truly the identity
    return model


def one_box_sample(box=(0.25, 0.25, 0.75, 0.5)):
    return SceneGraphSample("s", (ObjectProposal(box, 0), ObjectProposal((0.0, 0.0, 0.2, 0.2), 1)))


class TestHeatmap:
    def test_identity_stack_is_sigmoid_of_mask(self):
        model = identity_model()
        out = spatial_heatmap(model, 3, "forward", one_box_sample(), 0)
        want = 1.0 / (1.0 + np.exp(-rasterize_mask((0.25, 0.25, 0.75, 0.5), 8)))
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_file_values_exact(self, tmp_path, instance):
        model, _, _ = instance(3, n_preds=2, L=8)
        out = spatial_heatmap(model, 1, "inverse", one_box_sample(), 0, tmp_path / "h.pgm")
        img = read_pgm(tmp_path / "h.pgm")
        assert np.array_equal(img, np.floor(255 * out + 0.5).astype(np.uint8))
        header = (tmp_path / "h.pgm").read_bytes()[:11]
        assert header == b"P5\n8 8\n255\n"

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
    def test_gray_levels(self, values):
        v = np.asarray(values)
        assert np.array_equal(to_gray(v), np.floor(255 * v + 0.5).astype(np.uint8))

    def test_round_half_up(self):
        assert to_gray(np.array([0.5 / 255, 1.5 / 255]))[0] == 1

    def test_unknown_predicate(self):
        with pytest.raises(KeyError):
            spatial_heatmap(identity_model(), 0, "forward", one_box_sample(), 0)

    def test_unknown_node(self):
        with pytest.raises(IndexError):
            spatial_heatmap(identity_model(), 3, "forward", one_box_sample(), 5)

    def test_write_read_round_trip(self, tmp_path):
        v = np.random.default_rng(0).uniform(size=(5, 7))
        assert np.array_equal(read_pgm(write_pgm(v, tmp_path / "x.pgm")), to_gray(v))

    def test_compose_identity(self):
        model = identity_model()
        m = rasterize_mask((0.1, 0.1, 0.4, 0.4), 8)
        fwd, back = compose_heatmap(model, 4, m)
        np.testing.assert_allclose(back, 1 / (1 + np.exp(-fwd)), atol=1e-12)


def test_centroid():
    m = np.zeros((4, 4))
    m[3, 1] = 1.0
    assert centroid(m) == (3.0, 1.0)


class TestNeighbors:
    def means(self, seed=0, C=5, D=6):
        rng = np.random.default_rng(seed)
        return {c: rng.standard_normal(D) for c in range(C)}

    def test_top_n_clipped(self):
        assert len(semantic_neighbors(identity_model(), self.means(), 3, 0, top_n=50)) == 4

    @pytest.mark.parametrize("seed", range(5))
    def test_identity_transform_is_plain_nearest_neighbour(self, seed):
        means = self.means(seed)
        q = means[2]
        cos = {c: q @ m / np.linalg.norm(q) / np.linalg.norm(m) for c, m in means.items() if c != 2}
        got = semantic_neighbors(identity_model(), means, 3, 2, top_n=1)
        assert got[0][0] == max(cos, key=cos.get)
        assert got[0][1] == pytest.approx(cos[got[0][0]])

    @given(st.floats(1e-3, 1e3))
    @settings(max_examples=20, deadline=None)
    def test_scale_invariant_ranking(self, c):
        model = identity_model()
        means = self.means(1)
        a = semantic_neighbors(model, means, 3, 0, top_n=4)
        b = semantic_neighbors(model, {k: c * v for k, v in means.items()}, 3, 0, top_n=4)
        assert [x[0] for x in a] == [x[0] for x in b]

    def test_unknown_category(self):
        with pytest.raises(KeyError):
            semantic_neighbors(identity_model(), self.means(), 3, 99)


class TestEmbedding:
    def test_collinear_means(self):
        d = np.random.default_rng(0).standard_normal(6)
        coords = embedding_projection({c: (c - 2.0) * d for c in range(5)})
        ys = np.asarray([xy[1] for xy in coords.values()])
        assert ys.var() < 1e-20

    def test_duplicates_coincide(self):
        rng = np.random.default_rng(1)
        means = {c: rng.standard_normal(4) for c in range(4)}
        means[4] = means[1].copy()
        coords = embedding_projection(means)
        assert coords[4] == coords[1]

    def test_deterministic_and_sign_fixed(self):
        rng = np.random.default_rng(2)
        means = {c: rng.standard_normal(5) for c in range(6)}
        assert embedding_projection(means) == embedding_projection(dict(means))
        flipped = embedding_projection({c: -v for c, v in means.items()})
        a, b = embedding_projection(means), flipped
        # negating the data flips the loadings back, so the coordinates negate
        for c in means:
            assert a[c][0] == pytest.approx(-b[c][0]) and a[c][1] == pytest.approx(-b[c][1])

    def test_too_few(self):
        with pytest.raises(ValueError):
            embedding_projection({0: np.ones(3), 1: np.zeros(3)})

    def test_csv(self):
        text = projection_csv({0: (1.0, 2.0), 1: (-0.5, 0.25)}, ["a", "b"])
        assert text == "category,x,y\na,1.0,2.0\nb,-0.5,0.25\n"


def test_category_means_cover_observed_categories(small_world):
    model = SceneGraphModel(ModelConfig(mask_resolution=8, spa_depth=2, spa_channels=2))
    means = category_means(model, small_world, "val")
    seen = {c for s in small_world.val for c in s.categories}
    assert set(means) == seen
    assert all(v.shape == (64,) for v in means.values())
