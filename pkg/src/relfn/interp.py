"""Looking inside a trained model: spatial heatmaps, semantic neighbours, category embeddings."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from relfn.datamodel import Dataset, SceneGraphSample
from relfn.gcn import SceneGraphModel, forward_pass
from relfn.synthworld import rasterize_mask


def _slot(model: SceneGraphModel, predicate_id: int) -> int:
    try:
        return model.config.predicate_ids.index(predicate_id)
    except ValueError:
        raise KeyError(f"predicate {predicate_id} is not one of the model's predicates "
                       f"{list(model.config.predicate_ids)}") from None


def to_gray(values: np.ndarray) -> np.ndarray:
    """8-bit levels round(255 v), rounding halves up."""
    return np.floor(255.0 * np.clip(values, 0.0, 1.0) + 0.5).astype(np.uint8)


def write_pgm(values: np.ndarray, path: str | Path) -> Path:
    """Binary PGM (P5, maxval 255), row-major."""
    values = np.asarray(values)
    h, w = values.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + to_gray(values).tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def spatial_heatmap(model: SceneGraphModel, predicate_id: int, direction: str, sample: SceneGraphSample,
                    node_idx: int, path: str | Path | None = None) -> np.ndarray:
    """The predicate's spatial function applied to one node's mask."""
    if not 0 <= node_idx < sample.n_nodes:
        raise IndexError(f"node {node_idx} out of range for sample {sample.sample_id!r}")
    L = model.config.mask_resolution
    mask = torch.as_tensor(rasterize_mask(sample.proposals[node_idx].bbox, L), dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        out = model.transform_spatial(_slot(model, predicate_id), mask, direction).double().numpy()
    if path is not None:
        write_pgm(out, path)
    return out


def compose_heatmap(model: SceneGraphModel, predicate_id: int, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(forward(mask), inverse(forward(mask)))."""
    p = _slot(model, predicate_id)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        fwd = model.transform_spatial(p, torch.as_tensor(mask, dtype=dtype), "forward")
        back = model.transform_spatial(p, fwd, "inverse")
    return fwd.double().numpy(), back.double().numpy()


def centroid(values: np.ndarray) -> tuple[float, float]:
    """Mass-weighted (row, col) centre of a map."""
    values = np.asarray(values, dtype=np.float64)
    total = values.sum()
    rows, cols = np.indices(values.shape)
    return float((rows * values).sum() / total), float((cols * values).sum() / total)


def category_means(model: SceneGraphModel, dataset: Dataset, split: str = "train", provider=None) -> dict[int, np.ndarray]:
    """Mean final-iteration semantic state of every category seen in ``split``."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    model.eval()
    with torch.no_grad():
        for s in dataset.split(split):
            sem = forward_pass(s, model, provider=provider).sem.double().numpy()
            for k, c in enumerate(s.categories):
                if c is None:
                    continue
                sums[c] = sums.get(c, 0.0) + sem[k]
                counts[c] = counts.get(c, 0) + 1
    return {c: sums[c] / counts[c] for c in sorted(sums)}


def semantic_neighbors(model: SceneGraphModel, means: dict[int, np.ndarray], predicate_id: int,
                       subject_category: int, top_n: int = 5, direction: str = "forward") -> list[tuple[int, float]]:
    """Categories ranked by cosine to the transformed subject mean, subject excluded."""
    if subject_category not in means:
        raise KeyError(f"category {subject_category} never observed")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        q = model.transform_semantic(_slot(model, predicate_id),
                                     torch.as_tensor(means[subject_category], dtype=dtype), direction)
    q = q.double().numpy()
    scored = []
    for c, m in means.items():
        if c == subject_category:
            continue
        denom = np.linalg.norm(q) * np.linalg.norm(m)
        scored.append((c, float(q @ m / denom) if denom > 0 else 0.0))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:top_n]


def embedding_projection(means: dict[int, np.ndarray]) -> dict[int, tuple[float, float]]:
    """Two-component PCA of category means.

    Each component is oriented so its largest-magnitude loading is positive.
    """
    if len(means) < 3:
        raise ValueError("embedding projection needs at least 3 categories")
    cats = sorted(means)
    x = np.stack([means[c] for c in cats])
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2].copy()
    for k in range(comps.shape[0]):
        if comps[k, np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    coords = x @ comps.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((len(cats), 2 - coords.shape[1]))])
    return {c: (float(coords[k, 0]), float(coords[k, 1])) for k, c in enumerate(cats)}


def projection_csv(coords: dict[int, tuple[float, float]], names: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "x", "y"])
    for c, (x, y) in coords.items():
        w.writerow([names[c] if names else c, repr(x), repr(y)])
    return buf.getvalue()


def neighbors_json(results: dict) -> str:
    return json.dumps(results, indent=2, sort_keys=True)
