"""k-shot classifiers for rare predicates on top of a frozen graph model.

A pair ``(subject, object)`` is represented by the concatenated final
hidden states of both endpoints, each being the semantic vector followed
by the row-major flattened spatial mask. A small MLP is fit on the k
labelled pairs per rare predicate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from relfn.checkpoint import model_digest
from relfn.datamodel import Dataset, FewShotEpisode, SceneGraphSample, sample_k_shot_episode
from relfn.gcn import SceneGraphModel, forward_pass, initial_tensors
from relfn.layers import _he_uniform_
from relfn.metrics import ImagePrediction, ImageTruth, recall_at_k

__all__ = [
    "FewShotEpisode",
    "FewShotClassifier",
    "FrozenGraphRepresenter",
    "RawFeatureRepresenter",
    "pair_representation",
    "train_fewshot",
    "eval_fewshot",
    "run_fewshot",
]

MAX_STEPS = 500
TOLERANCE = 1e-5


def pair_representation(sem: torch.Tensor, spa: torch.Tensor, subj: int, obj: int,
                        pool: int | None = None) -> torch.Tensor:
    """[sem_s ; vec(spa_s) ; sem_o ; vec(spa_o)], length 2D + 2L^2.

    ``pool`` average-pools the masks to ``pool x pool`` first.
    """
    n = sem.shape[0]
    if not (0 <= subj < n and 0 <= obj < n):
        raise IndexError(f"pair ({subj}, {obj}) out of range for {n} nodes")
    maps = spa if pool is None else F.adaptive_avg_pool2d(spa[:, None], pool)[:, 0]
    return torch.cat([sem[subj], maps[subj].reshape(-1), sem[obj], maps[obj].reshape(-1)])


class FrozenGraphRepresenter:
    """Final-iteration hidden states of a frozen model, cached per sample."""

    def __init__(self, model: SceneGraphModel, provider=None, expand: bool = False):
        self.model = model.eval()
        self.provider = provider
        self.expand = expand
        self._cache: dict[str, tuple] = {}

    @property
    def name(self) -> str:
        return "gcn"

    def states(self, sample: SceneGraphSample):
        hit = self._cache.get(sample.sample_id)
        if hit is None:
            with torch.no_grad():
                res = forward_pass(sample, self.model, provider=self.provider)
                hit = (res.sem.double(), res.spa.double(), res.final)
            self._cache[sample.sample_id] = hit
        return hit

    def __call__(self, sample: SceneGraphSample, subj: int, obj: int, pool: int | None = None) -> torch.Tensor:
        sem, spa, table = self.states(sample)
        vec = pair_representation(sem, spa, subj, obj, pool)
        if self.expand:
            # per-predicate forward and backward edge scores of the pair
            extra = [table.fwd[:, subj, obj]]
            if table.bwd is not None:
                extra.append(table.bwd[:, subj, obj])
            vec = torch.cat([vec] + [e.double() for e in extra])
        return vec


class RawFeatureRepresenter:
    """Input features and masks with no message passing (the baseline)."""

    def __init__(self, L: int, provider=None):
        self.L = L
        self.provider = provider
        self._cache: dict[str, tuple] = {}

    @property
    def name(self) -> str:
        return "raw"

    def __call__(self, sample: SceneGraphSample, subj: int, obj: int, pool: int | None = None) -> torch.Tensor:
        hit = self._cache.get(sample.sample_id)
        if hit is None:
            hit = initial_tensors(sample, self.provider, self.L, dtype=torch.float64)
            self._cache[sample.sample_id] = hit
        return pair_representation(hit[0], hit[1], subj, obj, pool)


class FewShotClassifier(nn.Module):
    def __init__(self, in_dim: int, n_classes: int, hidden: int = 64, seed: int = 0):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)
        gen = torch.Generator().manual_seed(seed)
        for fc in (self.fc1, self.fc2):
            _he_uniform_(fc.weight, fc.in_features, gen)
            with torch.no_grad():
                fc.bias.zero_()
        self.double()
        self.history: list[float] = []

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=-1)


def fit_classifier(x: torch.Tensor, y: torch.Tensor, n_classes: int, seed: int = 0, lr: float = 1e-2,
                   hidden: int = 64, max_steps: int = MAX_STEPS, tol: float = TOLERANCE) -> FewShotClassifier:
    """Full-batch training until the loss moves by less than ``tol`` or ``max_steps``."""
    clf = FewShotClassifier(x.shape[1], n_classes, hidden, seed)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    prev = math.inf
    for _ in range(max_steps):
        loss = F.cross_entropy(clf.logits(x), y)
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite few-shot loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        cur = float(loss.detach())
        clf.history.append(cur)
        if abs(prev - cur) < tol:
            break
        prev = cur
    return clf.eval()


def episode_tensors(episode: FewShotEpisode, dataset: Dataset, represent: Callable, pool: int | None = None):
    xs, ys = [], []
    for cls, p in enumerate(episode.rare_ids):
        for sid, subj, obj in episode.train_instances[p]:
            xs.append(represent(dataset.find(sid), subj, obj, pool))
            ys.append(cls)
    return torch.stack(xs), torch.as_tensor(ys)


def train_fewshot(episode: FewShotEpisode, dataset: Dataset, represent: Callable, seed: int | None = None,
                  pool: int | None = None, **kw) -> FewShotClassifier:
    x, y = episode_tensors(episode, dataset, represent, pool)
    return fit_classifier(x, y, len(episode.rare_ids), episode.seed if seed is None else seed, **kw)


def eval_fewshot(classifier: FewShotClassifier, episode: FewShotEpisode, dataset: Dataset, represent: Callable,
                 pool: int | None = None, ks: Sequence[int] = (50,)) -> dict:
    """Rare-predicate recall@1 per GT pair and per-image recall@K over rare tuples."""
    if not episode.eval_pairs:
        raise ValueError("episode has no evaluation pairs")
    rare = list(episode.rare_ids)
    names = dataset.vocabulary.predicates
    hits = {p: [0, 0] for p in rare}
    by_image: dict[str, list[tuple[int, int, int]]] = {}
    for sid, subj, p, obj in episode.eval_pairs:
        by_image.setdefault(sid, []).append((subj, p, obj))

    preds, truths = [], []
    with torch.no_grad():
        for sid, gts in by_image.items():
            sample = dataset.find(sid)
            n = sample.n_nodes
            pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
            probs = classifier(torch.stack([represent(sample, i, j, pool) for i, j in pairs])).numpy()
            row = {pair: k for k, pair in enumerate(pairs)}
            for subj, p, obj in gts:
                # argmax picks the lowest class index on ties
                top = rare[int(np.argmax(probs[row[(subj, obj)]]))]
                hits[p][0] += int(top == p)
                hits[p][1] += 1
            cand = [(i, rare[c], j, float(probs[k, c])) for k, (i, j) in enumerate(pairs) for c in range(len(rare))]
            cand.sort(key=lambda t: (-t[3], t[0], t[2], t[1]))
            preds.append(ImagePrediction(tuple(cand)))
            truths.append(ImageTruth(tuple(gts)))
    total = sum(h for h, _ in hits.values())
    count = sum(n for _, n in hits.values())
    res = recall_at_k(preds, truths, tuple(ks), "predcls")
    out = {
        "k": episode.k,
        "seed": episode.seed,
        "recall_at_1": total / count,
        "per_predicate": {names[p]: (h / n if n else None) for p, (h, n) in hits.items()},
        "recall_scope": "rare predicates only",
        "eval_pairs": count,
    }
    for k in ks:
        out[f"recall_at_{k}"] = res.mean[k]
    return out


def run_fewshot(model: SceneGraphModel, dataset: Dataset, ks: Sequence[int] = (1, 2, 3, 4, 5),
                seeds: Sequence[int] = (0, 1, 2), baseline: bool = True, provider=None, expand: bool = False,
                pool: int | None = None) -> dict:
    """Sweep k and seeds for the frozen-graph classifier (and the raw-feature baseline)."""
    digest = model_digest(model)
    reps = {"gcn": FrozenGraphRepresenter(model, provider, expand)}
    if baseline:
        reps["raw"] = RawFeatureRepresenter(model.config.mask_resolution, provider)
    results = {name: [] for name in reps}
    for k in ks:
        for seed in seeds:
            episode = sample_k_shot_episode(dataset, k, seed)
            for name, rep in reps.items():
                clf = train_fewshot(episode, dataset, rep, pool=pool)
                results[name].append(eval_fewshot(clf, episode, dataset, rep, pool))
    if model_digest(model) != digest:
        raise RuntimeError("frozen model changed during few-shot training")
    return {
        "ks": list(ks),
        "seeds": list(seeds),
        "expand": expand,
        "pool": pool,
        "results": results,
        "summary": summarize(results),
    }


def summarize(results: dict) -> dict:
    """Median over seeds of recall@1 and recall@50 per (pipeline, k)."""
    out = {}
    for name, rows in results.items():
        per_k: dict[int, list[dict]] = {}
        for r in rows:
            per_k.setdefault(r["k"], []).append(r)
        out[name] = {
            str(k): {
                "median_recall_at_1": float(np.median([r["recall_at_1"] for r in rs])),
                "median_recall_at_50": float(np.median([r["recall_at_50"] for r in rs])),
            }
            for k, rs in sorted(per_k.items())
        }
    return out
