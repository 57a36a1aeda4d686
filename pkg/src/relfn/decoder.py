"""From final hidden states to scene graphs and ranked predictions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from relfn.datamodel import SceneGraphSample
from relfn.gcn import ForwardResult, SceneGraphModel, forward_pass
from relfn.layers import NodeClassifier
from relfn.metrics import MODES, ImagePrediction, ImageTruth

DEFAULT_TAU = 0.25

__all__ = [
    "NodeClassifier",
    "PredictedGraph",
    "classify_nodes",
    "score_all_edges",
    "emit_scene_graph",
    "rank_predictions",
    "decode_sample",
    "ground_truth",
    "prediction_record",
]


@dataclass(frozen=True)
class PredictedGraph:
    node_distributions: np.ndarray  # (N, C)
    labels: tuple[int, ...]
    edges: tuple[tuple[int, int, int, float], ...]  # (i, p, j, score)
    tau: float


def classify_nodes(model: SceneGraphModel, result: ForwardResult) -> np.ndarray:
    with torch.no_grad():
        return model.classify(result.sem).double().numpy()


def score_all_edges(result: ForwardResult) -> np.ndarray:
    """Forward x backward score of every edge on the final states -> (P, N, N); zero diagonal."""
    with torch.no_grad():
        c = result.final.combined().double().numpy().copy()
    idx = np.arange(c.shape[1])
    c[:, idx, idx] = 0.0
    return c


def _argmax_labels(dist: np.ndarray) -> tuple[int, ...]:
    # np.argmax returns the first maximum, i.e. the lowest category index on ties
    return tuple(int(v) for v in np.argmax(dist, axis=1))


def emit_scene_graph(scores: np.ndarray, node_distributions: np.ndarray, tau: float = DEFAULT_TAU,
                     predicate_ids: Sequence[int] | None = None) -> PredictedGraph:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    P, N, _ = scores.shape
    pid = list(predicate_ids) if predicate_ids is not None else list(range(P))
    edges = []
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            for p in range(P):
                if scores[p, i, j] > tau:
                    edges.append((i, pid[p], j, float(scores[p, i, j])))
    dist = np.asarray(node_distributions)
    return PredictedGraph(dist, _argmax_labels(dist), tuple(edges), tau)


def rank_predictions(scores: np.ndarray, node_distributions: np.ndarray | None, mode: str,
                     sample: SceneGraphSample, predicate_ids: Sequence[int] | None = None) -> ImagePrediction:
    """Every candidate ``(i, p, j)`` sorted by score, ties by ascending ``(i, j, p)``.

    PredCls scores by the edge score alone and uses ground-truth labels;
    SGCls and SGGen multiply in the probabilities of the predicted subject
    and object labels. SGGen additionally carries the proposal boxes.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    P, N, _ = scores.shape
    pid = np.asarray(list(predicate_ids) if predicate_ids is not None else range(P))
    if mode == "predcls":
        if any(c is None for c in sample.categories):
            raise ValueError(f"sample {sample.sample_id!r}: predcls needs ground-truth categories")
        labels = tuple(int(c) for c in sample.categories)
        node_score = np.ones(N)
    else:
        if node_distributions is None:
            raise ValueError(f"{mode} needs node distributions")
        dist = np.asarray(node_distributions)
        labels = _argmax_labels(dist)
        node_score = dist[np.arange(N), labels]

    p_idx, i_idx, j_idx = np.meshgrid(np.arange(P), np.arange(N), np.arange(N), indexing="ij")
    keep = i_idx != j_idx
    p_idx, i_idx, j_idx = p_idx[keep], i_idx[keep], j_idx[keep]
    vals = scores[p_idx, i_idx, j_idx]
    if mode != "predcls":
        vals = vals * node_score[i_idx] * node_score[j_idx]
    order = np.lexsort((p_idx, j_idx, i_idx, -vals))
    tuples = tuple(
        (int(i_idx[o]), int(pid[p_idx[o]]), int(j_idx[o]), float(vals[o])) for o in order
    )
    boxes = tuple(sample.boxes) if mode == "sggen" else None
    return ImagePrediction(tuples, labels, boxes)


def ground_truth(sample: SceneGraphSample, predicate_ids: Sequence[int] | None = None) -> ImageTruth:
    labels = None if any(c is None for c in sample.categories) else tuple(int(c) for c in sample.categories)
    return ImageTruth(tuple(sample.triples(predicate_ids)), labels, tuple(sample.boxes))


def decode_sample(model: SceneGraphModel, sample: SceneGraphSample, mode: str = "predcls",
                  provider=None) -> ImagePrediction:
    model.eval()
    with torch.no_grad():
        result = forward_pass(sample, model, provider=provider)
        dist = classify_nodes(model, result) if mode != "predcls" else None
    return rank_predictions(score_all_edges(result), dist, mode, sample, model.config.predicate_ids)


def prediction_record(sample_id: str, mode: str, pred: ImagePrediction, limit: int | None = None) -> str:
    """One JSON line of the prediction dump."""
    tuples = pred.tuples if limit is None else pred.tuples[:limit]
    return json.dumps(
        {
            "id": sample_id,
            "mode": mode,
            "tuples": [[i, p, j, s] for i, p, j, s in tuples],
            "labels": list(pred.labels) if pred.labels is not None else None,
        },
        separators=(",", ":"),
    )
