"""Deterministic synthetic relational worlds.

Categories are partitioned into affordance groups. Each predicate has a
spatial rule (mean displacement of the object box from the subject box
plus a size ratio) and a semantic rule (which groups may act as subject
and object). Rare predicates reuse the displacement of one frequent
predicate but point at a different object group, so what a model learns
about frequent predicates carries over to the rare ones.

Category features are fixed random unit vectors plus isotropic Gaussian
noise; they stand in for CNN features.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from relfn.datamodel import (
    Dataset,
    ObjectProposal,
    PredicateVocabulary,
    Relationship,
    SceneGraphSample,
)

# size range of a subject box side, normalized units
_MIN_SIDE, _MAX_SIDE = 0.12, 0.24
_JITTER = 0.02
_DECIMALS = 6


@dataclass(frozen=True)
class WorldConfig:
    n_categories: int = 12
    n_frequent_predicates: int = 6
    n_rare_predicates: int = 4
    feature_dim: int = 64
    mask_resolution: int = 16
    samples_per_split: tuple[int, int, int] = (600, 100, 200)
    noise_sigma: float = 0.05
    seed: int = 0
    n_groups: int = 4
    rare_fraction: float = 0.3
    radius: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "samples_per_split", tuple(int(n) for n in self.samples_per_split))
        counts = (self.n_categories, self.n_frequent_predicates, self.n_rare_predicates, *self.samples_per_split)
        if any(c < 1 for c in counts):
            raise ValueError("all counts must be >= 1")
        if len(self.samples_per_split) != 3:
            raise ValueError("samples_per_split needs (train, val, test)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.mask_resolution < 4:
            raise ValueError("mask_resolution must be >= 4")
        if not 2 <= self.n_groups <= self.n_categories:
            raise ValueError("n_groups must lie in [2, n_categories]")
        if not 0.0 <= self.rare_fraction <= 1.0:
            raise ValueError("rare_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "WorldConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown world config fields: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path: str | Path) -> "WorldConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples_per_split"] = list(self.samples_per_split)
        return d


@dataclass(frozen=True)
class PredicateRule:
    displacement: tuple[float, float]
    scale: tuple[float, float]
    subject_group: frozenset[int]
    object_group: frozenset[int]
    base: int | None = field(default=None, compare=False)  # frequent rule a rare rule borrows from

    def __post_init__(self):
        if not self.object_group or not self.subject_group:
            raise ValueError("rule groups must be nonempty")


def category_groups(config: WorldConfig) -> list[list[int]]:
    groups = [[] for _ in range(config.n_groups)]
    for c in range(config.n_categories):
        groups[c % config.n_groups].append(c)
    return groups


def build_rules(config: WorldConfig) -> list[PredicateRule]:
    """Frequent rules first, then rare rules, indexed like the vocabulary."""
    groups = category_groups(config)
    n_g = config.n_groups
    rules = []
    n_f = config.n_frequent_predicates
    for k in range(n_f):
        angle = 2.0 * math.pi * k / n_f + 0.25 * math.pi
        s = 0.8 + 0.2 * (k % 3)
        subj = k % n_g
        obj = (subj + 1 + (k // n_g)) % n_g
        if obj == subj:
            obj = (obj + 1) % n_g
        rules.append(
            PredicateRule(
                displacement=(config.radius * math.cos(angle), config.radius * math.sin(angle)),
                scale=(s, s),
                subject_group=frozenset(groups[subj]),
                object_group=frozenset(groups[obj]),
                base=None,
            )
        )
    # consecutive rare predicates share a base layout and differ in object group
    for r in range(config.n_rare_predicates):
        b = (r // 2) % n_f
        base = rules[b]
        subj = b % n_g
        base_obj = groups.index(sorted(base.object_group))
        candidates = [g for g in range(n_g) if g not in (subj, base_obj)] or [g for g in range(n_g) if g != subj]
        obj = candidates[r % len(candidates)]
        rules.append(
            PredicateRule(
                displacement=base.displacement,
                scale=base.scale,
                subject_group=base.subject_group,
                object_group=frozenset(groups[obj]),
                base=b,
            )
        )
    for idx, rule in enumerate(rules):
        _check_geometry(rule, idx)
    return rules


def _check_geometry(rule: PredicateRule, idx: int) -> None:
    dx, dy = rule.displacement
    for d, sc in ((dx, rule.scale[0]), (dy, rule.scale[1])):
        half_s, half_o = 0.5 * _MAX_SIDE, 0.5 * _MAX_SIDE * sc * 1.1
        lo = max(half_s, half_o - d + 3 * _JITTER)
        hi = min(1.0 - half_s, 1.0 - half_o - d - 3 * _JITTER)
        if lo > hi:
            raise ValueError(f"rule {idx}: displacement {rule.displacement} cannot fit in the unit square")


def category_prototypes(config: WorldConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0xC0FFEE])
    protos = rng.standard_normal((config.n_categories, config.feature_dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def rasterize_mask(bbox, L: int) -> np.ndarray:
    """Binary ``L x L`` mask of the cells whose centers fall inside ``bbox``.

    A box too small to contain any cell center lights the cell holding its
    center.
    """
    x1, y1, x2, y2 = bbox
    centers = (np.arange(L) + 0.5) / L
    cols = (centers >= x1) & (centers <= x2)
    rows = (centers >= y1) & (centers <= y2)
    mask = np.outer(rows, cols).astype(np.float64)
    if not mask.any():
        r = min(int(0.5 * (y1 + y2) * L), L - 1)
        c = min(int(0.5 * (x1 + x2) * L), L - 1)
        mask[r, c] = 1.0
    return mask


def _place_pair(rule: PredicateRule, rng: np.random.Generator):
    w, h = rng.uniform(_MIN_SIDE, _MAX_SIDE, size=2)
    ow = w * rule.scale[0] * rng.uniform(0.9, 1.1)
    oh = h * rule.scale[1] * rng.uniform(0.9, 1.1)
    off = np.asarray(rule.displacement) + rng.normal(0.0, _JITTER, size=2)
    centers = []
    for side, oside, d in ((w, ow, off[0]), (h, oh, off[1])):
        lo = max(0.5 * side, 0.5 * oside - d)
        hi = min(1.0 - 0.5 * side, 1.0 - 0.5 * oside - d)
        centers.append(rng.uniform(lo, hi) if lo < hi else 0.5 * (lo + hi))
    cx, cy = centers
    subj = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    ox, oy = cx + off[0], cy + off[1]
    obj = (ox - ow / 2, oy - oh / 2, ox + ow / 2, oy + oh / 2)
    return _clip(subj), _clip(obj)


def _clip(box):
    x1, y1, x2, y2 = (round(min(max(v, 0.0), 1.0), _DECIMALS) for v in box)
    return (x1, y1, x2, y2)


def sample_feature(protos: np.ndarray, category: int, sigma: float, rng: np.random.Generator) -> tuple[float, ...]:
    f = protos[category] + sigma * rng.standard_normal(protos.shape[1])
    return tuple(round(float(v), _DECIMALS) for v in f)


def _generate_sample(config, rules, protos, split_idx: int, index: int, sample_id: str) -> SceneGraphSample:
    rng = np.random.default_rng([config.seed, split_idx, index])
    n_f = config.n_frequent_predicates
    n_rel = int(rng.integers(1, 4))
    items = []  # (category, bbox) with pair structure
    pairs = []
    for _ in range(n_rel):
        if config.n_rare_predicates and rng.random() < config.rare_fraction:
            p = n_f + int(rng.integers(config.n_rare_predicates))
        else:
            p = int(rng.integers(n_f))
        rule = rules[p]
        cs = int(rng.choice(sorted(rule.subject_group)))
        co = int(rng.choice(sorted(rule.object_group)))
        bs, bo = _place_pair(rule, rng)
        pairs.append((len(items), p, len(items) + 1))
        items.append((cs, bs))
        items.append((co, bo))
    order = rng.permutation(len(items))
    where = {int(old): new for new, old in enumerate(order)}
    proposals = []
    for old in order:
        c, box = items[int(old)]
        proposals.append(ObjectProposal(bbox=box, category_id=c, feature=sample_feature(protos, c, config.noise_sigma, rng)))
    rels = sorted((Relationship(where[s], p, where[o]) for s, p, o in pairs), key=Relationship.as_tuple)
    return SceneGraphSample(sample_id, tuple(proposals), tuple(rels))


def generate_world(config: WorldConfig) -> Dataset:
    rules = build_rules(config)
    protos = category_prototypes(config)
    n_f, n_r = config.n_frequent_predicates, config.n_rare_predicates
    vocab = PredicateVocabulary(
        object_categories=tuple(f"cat{c:02d}" for c in range(config.n_categories)),
        predicates=tuple(f"freq{k}" for k in range(n_f)) + tuple(f"rare{k}" for k in range(n_r)),
        frequent_ids=frozenset(range(n_f)),
        rare_ids=frozenset(range(n_f, n_f + n_r)),
    )
    splits = {}
    for split_idx, (name, count) in enumerate(zip(("train", "val", "test"), config.samples_per_split)):
        splits[name] = tuple(
            _generate_sample(config, rules, protos, split_idx, i, f"{name}-{i:05d}") for i in range(count)
        )
    return Dataset(vocab, splits)


class SyntheticFeatureProvider:
    """Draws a fresh feature per proposal from its category prototype.

    Noise is seeded from the world seed and sample id, so features are a
    pure function of the sample.
    """

    def __init__(self, config: WorldConfig):
        self.config = config
        self.prototypes = category_prototypes(config)

    @property
    def dim(self) -> int:
        return self.config.feature_dim

    def __call__(self, sample: SceneGraphSample) -> np.ndarray:
        rng = np.random.default_rng([self.config.seed, zlib.crc32(sample.sample_id.encode())])
        rows = []
        for prop in sample.proposals:
            if prop.category_id is None:
                raise ValueError(f"sample {sample.sample_id!r}: synthetic features need category ids")
            rows.append(sample_feature(self.prototypes, prop.category_id, self.config.noise_sigma, rng))
        return np.asarray(rows, dtype=np.float64)
