"""Core data types, the dataset JSON format and predicate bookkeeping.

Everything here is immutable after construction. Boxes are stored in
normalized image coordinates ``(x1, y1, x2, y2)`` with ``y`` growing
downwards, so a mask row index increases with ``y``.
"""

from __future__ import annotations

import json
import math
import random
from functools import cached_property
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Raised when a dataset file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class PredicateVocabulary:
    object_categories: tuple[str, ...]
    predicates: tuple[str, ...]
    frequent_ids: frozenset[int]
    rare_ids: frozenset[int]

    def __post_init__(self):
        for kind, names in (("object", self.object_categories), ("predicate", self.predicates)):
            if any(not isinstance(n, str) or not n for n in names):
                raise DatasetError(f"vocabulary: empty {kind} name")
            if len(set(names)) != len(names):
                raise DatasetError(f"vocabulary: duplicate {kind} names")
        n_pred = len(self.predicates)
        if self.frequent_ids & self.rare_ids:
            raise DatasetError("vocabulary: frequent and rare predicate sets overlap")
        if (self.frequent_ids | self.rare_ids) != frozenset(range(n_pred)):
            raise DatasetError("vocabulary: frequent and rare sets must cover every predicate index")

    @property
    def n_categories(self) -> int:
        return len(self.object_categories)

    @property
    def n_predicates(self) -> int:
        return len(self.predicates)

    @property
    def frequent(self) -> list[int]:
        """Frequent predicate ids in ascending order (the model's predicate slots)."""
        return sorted(self.frequent_ids)

    @property
    def rare(self) -> list[int]:
        return sorted(self.rare_ids)


@dataclass(frozen=True)
class ObjectProposal:
    bbox: tuple[float, float, float, float]
    category_id: int | None = None
    feature: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.bbox) != 4:
            raise DatasetError("bbox must have 4 coordinates")
        x1, y1, x2, y2 = self.bbox
        if not all(0.0 <= v <= 1.0 for v in self.bbox) or not (x1 < x2 and y1 < y2):
            raise DatasetError(f"bbox {list(self.bbox)} is not a valid normalized box")
        if self.feature is not None and not all(math.isfinite(v) for v in self.feature):
            raise DatasetError("feature contains non-finite values")

    @property
    def center(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.bbox
        return (0.5 * (x1 + x2), 0.5 * (y1 + y2))


@dataclass(frozen=True)
class Relationship:
    subject_idx: int
    predicate_id: int
    object_idx: int

    def __post_init__(self):
        if self.subject_idx == self.object_idx:
            raise DatasetError(f"relationship {self.as_tuple()} is a self-loop")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.subject_idx, self.predicate_id, self.object_idx)


@dataclass(frozen=True)
class SceneGraphSample:
    sample_id: str
    proposals: tuple[ObjectProposal, ...]
    relationships: tuple[Relationship, ...] = ()

    def __post_init__(self):
        if not self.proposals:
            raise DatasetError(f"sample {self.sample_id!r}: no proposals")
        n = len(self.proposals)
        seen = set()
        for rel in self.relationships:
            if not (0 <= rel.subject_idx < n and 0 <= rel.object_idx < n):
                raise DatasetError(
                    f"sample {self.sample_id!r}: relationship {rel.as_tuple()} indexes outside {n} proposals"
                )
            if rel.as_tuple() in seen:
                raise DatasetError(f"sample {self.sample_id!r}: duplicate relationship {rel.as_tuple()}")
            seen.add(rel.as_tuple())
        dims = {len(p.feature) for p in self.proposals if p.feature is not None}
        if len(dims) > 1:
            raise DatasetError(f"sample {self.sample_id!r}: proposals have mixed feature lengths {sorted(dims)}")

    @property
    def n_nodes(self) -> int:
        return len(self.proposals)

    @property
    def categories(self) -> list[int | None]:
        return [p.category_id for p in self.proposals]

    @property
    def boxes(self) -> list[tuple[float, float, float, float]]:
        return [p.bbox for p in self.proposals]

    def triples(self, predicate_ids: Iterable[int] | None = None) -> list[tuple[int, int, int]]:
        """Ground-truth ``(subj, pred, obj)`` triples, optionally restricted to some predicates."""
        keep = None if predicate_ids is None else set(predicate_ids)
        return [r.as_tuple() for r in self.relationships if keep is None or r.predicate_id in keep]


@dataclass(frozen=True)
class Dataset:
    vocabulary: PredicateVocabulary
    splits: dict[str, tuple[SceneGraphSample, ...]] = field(default_factory=dict)

    def __post_init__(self):
        validate_dataset(self)

    def split(self, name: str) -> tuple[SceneGraphSample, ...]:
        return self.splits.get(name, ())

    @property
    def train(self):
        return self.split("train")

    @property
    def val(self):
        return self.split("val")

    @property
    def test(self):
        return self.split("test")

    @property
    def feature_dim(self) -> int | None:
        for samples in self.splits.values():
            for s in samples:
                for p in s.proposals:
                    if p.feature is not None:
                        return len(p.feature)
        return None

    def predicate_counts(self, split: str = "train") -> list[int]:
        counts = [0] * self.vocabulary.n_predicates
        for s in self.split(split):
            for r in s.relationships:
                counts[r.predicate_id] += 1
        return counts

    @cached_property
    def _by_id(self) -> dict[str, SceneGraphSample]:
        return {s.sample_id: s for samples in self.splits.values() for s in samples}

    def find(self, sample_id: str) -> SceneGraphSample:
        return self._by_id[sample_id]


def validate_dataset(dataset: Dataset) -> None:
    vocab = dataset.vocabulary
    dim = None
    for split, samples in dataset.splits.items():
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        for s in samples:
            for k, prop in enumerate(s.proposals):
                c = prop.category_id
                if c is not None and not 0 <= c < vocab.n_categories:
                    raise DatasetError(
                        f"sample {s.sample_id!r}: proposals[{k}].category {c} out of range [0, {vocab.n_categories})"
                    )
                if prop.feature is not None:
                    if dim is None:
                        dim = len(prop.feature)
                    elif len(prop.feature) != dim:
                        raise DatasetError(
                            f"sample {s.sample_id!r}: proposals[{k}].feature has length {len(prop.feature)}, expected {dim}"
                        )
            for rel in s.relationships:
                if not 0 <= rel.predicate_id < vocab.n_predicates:
                    raise DatasetError(
                        f"sample {s.sample_id!r}: relationship predicate {rel.predicate_id} out of range "
                        f"[0, {vocab.n_predicates})"
                    )


# ---------------------------------------------------------------------------
# JSON format


def _parse_sample(raw: dict, where: str) -> SceneGraphSample:
    try:
        sid = raw["id"]
        if not isinstance(sid, str):
            raise DatasetError(f"{where}: id must be a string")
        proposals = []
        for k, p in enumerate(raw["proposals"]):
            feat = p.get("feature")
            try:
                proposals.append(
                    ObjectProposal(
                        bbox=tuple(float(v) for v in p["bbox"]),
                        category_id=None if p.get("category") is None else int(p["category"]),
                        feature=None if feat is None else tuple(float(v) for v in feat),
                    )
                )
            except DatasetError as exc:
                raise DatasetError(f"sample {sid!r}: proposals[{k}]: {exc}") from None
        rels = []
        for k, triple in enumerate(raw.get("relationships", [])):
            if len(triple) != 3:
                raise DatasetError(f"sample {sid!r}: relationships[{k}] must be [subj, pred, obj]")
            try:
                rels.append(Relationship(int(triple[0]), int(triple[1]), int(triple[2])))
            except DatasetError as exc:
                raise DatasetError(f"sample {sid!r}: relationships[{k}]: {exc}") from None
        return SceneGraphSample(sid, tuple(proposals), tuple(rels))
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{where}: malformed sample ({exc!r})") from None


def dataset_from_dict(raw: dict) -> Dataset:
    try:
        v = raw["vocabulary"]
        vocab = PredicateVocabulary(
            object_categories=tuple(v["objects"]),
            predicates=tuple(v["predicates"]),
            frequent_ids=frozenset(int(i) for i in v["frequent"]),
            rare_ids=frozenset(int(i) for i in v["rare"]),
        )
        splits = {}
        for name, samples in raw["splits"].items():
            splits[name] = tuple(_parse_sample(s, f"splits.{name}[{k}]") for k, s in enumerate(samples))
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"malformed dataset ({exc!r})") from None
    return Dataset(vocab, splits)


def dataset_to_dict(dataset: Dataset) -> dict:
    vocab = dataset.vocabulary

    def sample(s: SceneGraphSample) -> dict:
        return {
            "id": s.sample_id,
            "proposals": [
                {
                    "bbox": list(p.bbox),
                    "category": p.category_id,
                    "feature": None if p.feature is None else list(p.feature),
                }
                for p in s.proposals
            ],
            "relationships": [list(r.as_tuple()) for r in s.relationships],
        }

    return {
        "vocabulary": {
            "objects": list(vocab.object_categories),
            "predicates": list(vocab.predicates),
            "frequent": sorted(vocab.frequent_ids),
            "rare": sorted(vocab.rare_ids),
        },
        "splits": {name: [sample(s) for s in dataset.splits[name]] for name in dataset.splits},
    }


def load_dataset(path: str | Path) -> Dataset:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: parse error: {exc}") from None
    if not isinstance(raw, dict):
        raise DatasetError(f"{path}: top level must be an object")
    return dataset_from_dict(raw)


def dumps_dataset(dataset: Dataset) -> str:
    return json.dumps(dataset_to_dict(dataset), separators=(",", ":"))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(dataset), encoding="utf-8")


# ---------------------------------------------------------------------------
# Predicate split and few-shot episodes


def split_predicates(counts: Sequence[int], n_frequent: int) -> tuple[set[int], set[int]]:
    """Partition predicate ids into the ``n_frequent`` most common and the rest.

    Ties are broken by ascending predicate index.
    """
    if n_frequent > len(counts) or n_frequent < 0:
        raise ValueError(f"n_frequent={n_frequent} exceeds the {len(counts)} predicates")
    if any(c < 0 for c in counts):
        raise ValueError("counts must be nonnegative")
    order = sorted(range(len(counts)), key=lambda p: (-counts[p], p))
    frequent = set(order[:n_frequent])
    return frequent, set(range(len(counts))) - frequent


@dataclass(frozen=True)
class FewShotEpisode:
    """k labelled training pairs per rare predicate plus held-out evaluation pairs.

    ``train_instances`` maps rare predicate id to ``(sample_id, subj, obj)``
    triples from the train split; ``eval_pairs`` holds
    ``(sample_id, subj, pred, obj)`` for every rare relationship in test.
    """

    k: int
    seed: int
    rare_ids: tuple[int, ...]
    train_instances: dict[int, tuple[tuple[str, int, int], ...]]
    eval_pairs: tuple[tuple[str, int, int, int], ...]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "rare": list(self.rare_ids),
            "train": {str(p): [list(t) for t in inst] for p, inst in self.train_instances.items()},
            "eval": [list(t) for t in self.eval_pairs],
        }


def sample_k_shot_episode(dataset: Dataset, k: int, seed: int) -> FewShotEpisode:
    if k < 1:
        raise ValueError("k must be >= 1")
    rare = dataset.vocabulary.rare
    pools: dict[int, list[tuple[str, int, int]]] = {p: [] for p in rare}
    for s in dataset.train:
        for r in s.relationships:
            if r.predicate_id in pools:
                pools[r.predicate_id].append((s.sample_id, r.subject_idx, r.object_idx))
    rng = random.Random(seed)
    train = {}
    for p in rare:
        if len(pools[p]) < k:
            name = dataset.vocabulary.predicates[p]
            raise ValueError(f"rare predicate {p} ({name!r}) has {len(pools[p])} training instances, need k={k}")
        train[p] = tuple(rng.sample(pools[p], k))
    eval_pairs = tuple(
        (s.sample_id, r.subject_idx, r.predicate_id, r.object_idx)
        for s in dataset.test
        for r in s.relationships
        if r.predicate_id in dataset.vocabulary.rare_ids
    )
    return FewShotEpisode(k=k, seed=seed, rare_ids=tuple(rare), train_instances=train, eval_pairs=eval_pairs)
