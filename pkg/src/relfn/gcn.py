"""Graph convolution with predicates as learned transformation functions.

Every node carries a semantic vector and a fixed spatial mask. On each
iteration, node ``i`` scores every candidate edge ``(i, p, j)`` by how
well predicate ``p``'s forward functions map it onto node ``j``, then
collects ``j``'s inverse-transformed semantic vector weighted by that
score. The fully connected graph over all predicates is evaluated as
dense ``(P, N, N)`` tables.

Score tables are indexed ``[p, i, j]`` for the edge ``<i, p, j>``. The
backward table is stored in the same orientation: ``bwd[p, i, j]`` is
the inverse-function score of ``j`` looking back at ``i``, so the
decoder's edge score is simply ``fwd * bwd``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from relfn.datamodel import SceneGraphSample
from relfn.layers import NodeClassifier, PredicateConvStack, PredicateMLP
from relfn.synthworld import rasterize_mask

IOU_EPS = 1e-8


class NonFiniteError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    mask_resolution: int = 16
    predicate_ids: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    n_categories: int = 12
    iterations: int = 2
    sem_depth: int = 4
    spa_depth: int = 4
    spa_channels: int = 8
    alpha: float = 0.5
    update_sigmoid: bool = False
    use_inverse: bool = True
    use_semantic: bool = True
    use_spatial: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "predicate_ids", tuple(int(p) for p in self.predicate_ids))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.predicate_ids:
            raise ValueError("need at least one predicate")
        if not (self.use_semantic or self.use_spatial):
            raise ValueError("at least one of the semantic/spatial components must be enabled")

    @property
    def n_predicates(self) -> int:
        return len(self.predicate_ids)

    @property
    def effective_alpha(self) -> float:
        if not self.use_spatial:
            return 1.0
        if not self.use_semantic:
            return 0.0
        return self.alpha

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predicate_ids"] = list(self.predicate_ids)
        return d


class HiddenState(NamedTuple):
    sem: torch.Tensor  # (D,)
    spa: torch.Tensor  # (L, L), constant across iterations


@dataclass
class ScoreTable:
    """Edge scores of one iteration; every tensor is ``(P, N, N)``.

    Components that a configuration switches off are ``None``. ``cos``
    keeps the raw cosine before the [0, 1] remap.
    """

    iteration: int
    fwd: torch.Tensor
    fwd_sem: torch.Tensor | None
    fwd_spa: torch.Tensor | None
    cos: torch.Tensor | None
    bwd: torch.Tensor | None = None
    bwd_sem: torch.Tensor | None = None
    bwd_spa: torch.Tensor | None = None

    def combined(self) -> torch.Tensor:
        return self.fwd if self.bwd is None else self.fwd * self.bwd


@dataclass(frozen=True)
class ScoredEdge:
    i: int
    j: int
    p: int
    s_sem: float
    s_spa: float
    s: float
    direction: str
    iteration: int


@dataclass
class ForwardResult:
    sem: torch.Tensor  # (N, D) final semantic states
    spa: torch.Tensor  # (N, L, L)
    tables: list[ScoreTable]  # iterations 0..T, the last one scored on the final states
    graph: torch.Tensor | None = None  # (N,) graph index when several samples are batched

    @property
    def final(self) -> ScoreTable:
        return self.tables[-1]

    def hidden(self) -> list[HiddenState]:
        return [HiddenState(self.sem[i], self.spa[i]) for i in range(self.sem.shape[0])]

    def scored_edges(self, iteration: int = -1, predicate_ids: Sequence[int] | None = None) -> list[ScoredEdge]:
        table = self.tables[iteration]
        P, N, _ = table.fwd.shape
        pid = list(predicate_ids) if predicate_ids is not None else list(range(P))
        out = []
        for direction, s, sem, spa in (
            ("forward", table.fwd, table.fwd_sem, table.fwd_spa),
            ("backward", table.bwd, table.bwd_sem, table.bwd_spa),
        ):
            if s is None:
                continue
            for p in range(P):
                for i in range(N):
                    for j in range(N):
                        if i == j or (self.graph is not None and self.graph[i] != self.graph[j]):
                            continue
                        out.append(
                            ScoredEdge(
                                i, j, pid[p],
                                float(sem[p, i, j]) if sem is not None else 0.0,
                                float(spa[p, i, j]) if spa is not None else 0.0,
                                float(s[p, i, j]), direction, table.iteration,
                            )
                        )
        return out


# ---------------------------------------------------------------------------
# Scores


def cosine_table(transformed: torch.Tensor, targets: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Cosine between ``transformed[p, i]`` and ``targets[j]`` -> (P, N, N).

    Zero vectors get cosine 0; the second return value counts them.
    """
    sq_a = (transformed * transformed).sum(-1)
    sq_b = (targets * targets).sum(-1)
    dot = torch.einsum("pid,jd->pij", transformed, targets)
    prod = sq_a[:, :, None] * sq_b[None, None, :]
    # a zero norm (e.g. every ReLU unit dead) yields dot = 0 and cosine 0; a
    # unit denominator there keeps the gradient bounded
    degenerate = prod == 0
    denom = torch.sqrt(torch.where(degenerate, torch.ones_like(prod), prod))
    zeros = int((sq_a == 0).sum()) + int((sq_b == 0).sum())
    return dot / denom, zeros


def soft_iou(a: torch.Tensor, b: torch.Tensor, eps: float = IOU_EPS) -> torch.Tensor:
    """Product-overlap IoU of two maps in [0, 1]; exact IoU on binary masks."""
    inter = (a * b).sum()
    return inter / (a.sum() + b.sum() - inter + eps)


def soft_iou_table(transformed: torch.Tensor, targets: torch.Tensor, eps: float = IOU_EPS) -> torch.Tensor:
    """soft IoU of ``transformed[p, i]`` against ``targets[j]`` -> (P, N, N)."""
    inter = torch.einsum("pixy,jxy->pij", transformed, targets)
    sa = transformed.sum((-1, -2))
    sb = targets.sum((-1, -2))
    return inter / (sa[:, :, None] + sb[None, None, :] - inter + eps)


# ---------------------------------------------------------------------------
# Model


class PredicateFunctionSet(nn.Module):
    """Forward/inverse semantic and spatial functions of every predicate, plus W0."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.reads: Counter = Counter()
        P, D = config.n_predicates, config.feature_dim
        self.sem_fwd = self.sem_inv = self.spa_fwd = self.spa_inv = None
        if config.use_semantic:
            self.sem_fwd = PredicateMLP(P, D, config.sem_depth, "sem_fwd", self.reads)
            if config.use_inverse:
                self.sem_inv = PredicateMLP(P, D, config.sem_depth, "sem_inv", self.reads)
        if config.use_spatial:
            self.spa_fwd = PredicateConvStack(P, config.spa_depth, config.spa_channels, "spa_fwd", self.reads)
            if config.use_inverse:
                self.spa_inv = PredicateConvStack(P, config.spa_depth, config.spa_channels, "spa_inv", self.reads)
        self.w0 = nn.Parameter(torch.eye(D))

    def semantic(self, direction: str) -> PredicateMLP:
        fn = self.sem_fwd if direction == "forward" else self.sem_inv
        if fn is None:
            raise ValueError(f"model has no {direction} semantic functions")
        return fn

    def spatial(self, direction: str) -> PredicateConvStack:
        fn = self.spa_fwd if direction == "forward" else self.spa_inv
        if fn is None:
            raise ValueError(f"model has no {direction} spatial functions")
        return fn

    def message_source(self) -> PredicateMLP | None:
        """Functions applied to neighbours inside messages.

        Without inverse functions the forward ones stand in.
        """
        return self.sem_inv if self.sem_inv is not None else self.sem_fwd


class SceneGraphModel(nn.Module):
    """Predicate functions, the shared update matrix and the node classifier."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.functions = PredicateFunctionSet(config)
        self.classifier = NodeClassifier(config.feature_dim, config.n_categories)
        self.diagnostics: Counter = Counter()
        self.reset_parameters(config.seed)

    @property
    def reads(self) -> Counter:
        return self.functions.reads

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        f = self.functions
        for stack in (f.sem_fwd, f.sem_inv, f.spa_fwd, f.spa_inv):
            if stack is not None:
                stack.reset_parameters(gen)
        D = self.config.feature_dim
        with torch.no_grad():
            f.w0.copy_(torch.eye(D) + 0.01 * torch.randn(D, D, generator=gen))
        self.classifier.reset_parameters(gen)

    def reset_identity(self) -> None:
        """Identity predicate functions and W0; handy for sanity checks."""
        f = self.functions
        for stack in (f.sem_fwd, f.sem_inv, f.spa_fwd, f.spa_inv):
            if stack is not None:
                stack.reset_identity()
        with torch.no_grad():
            f.w0.copy_(torch.eye(self.config.feature_dim))

    # -- scoring -----------------------------------------------------------

    def score_tables(self, sem: torch.Tensor, spa_scores: dict, iteration: int) -> tuple[ScoreTable, torch.Tensor | None]:
        """Score every ``(p, i, j)`` from the current semantic states.

        Returns the table and the inverse-transformed states (reused as
        message payload when inverse functions exist).
        """
        f, alpha = self.functions, self.config.effective_alpha
        fwd_sem = bwd_sem = cos = None
        inv_states = None
        if self.config.use_semantic:
            cos, zeros = cosine_table(f.sem_fwd(sem), sem)
            fwd_sem = 0.5 * (1.0 + cos)
            self.diagnostics["zero_norm"] += zeros
            if f.sem_inv is not None:
                inv_states = f.sem_inv(sem)
                cos_b, zeros = cosine_table(inv_states, sem)
                bwd_sem = 0.5 * (1.0 + cos_b).transpose(1, 2)
                self.diagnostics["zero_norm"] += zeros
        fwd_spa, bwd_spa = spa_scores.get("fwd"), spa_scores.get("bwd")
        fwd = _blend(alpha, fwd_sem, fwd_spa)
        bwd = _blend(alpha, bwd_sem, bwd_spa) if self.config.use_inverse else None
        table = ScoreTable(iteration, fwd, fwd_sem, fwd_spa, cos, bwd, bwd_sem, bwd_spa)
        return table, inv_states

    def spatial_scores(self, spa: torch.Tensor) -> dict:
        """Spatial score tables; masks never change, so these are computed once."""
        f = self.functions
        out = {}
        if self.config.use_spatial:
            out["fwd"] = soft_iou_table(f.spa_fwd(spa), spa)
            if f.spa_inv is not None:
                out["bwd"] = soft_iou_table(f.spa_inv(spa), spa).transpose(1, 2)
        return out

    # -- propagation -------------------------------------------------------

    def propagate(self, sem: torch.Tensor, spa: torch.Tensor, graph: torch.Tensor | None = None,
                  iterations: int | None = None) -> ForwardResult:
        """Run ``iterations`` rounds of message passing over one or more graphs.

        ``graph[i]`` names the graph node ``i`` belongs to; nodes only
        exchange messages within their own graph.
        """
        T = self.config.iterations if iterations is None else iterations
        n = sem.shape[0]
        if graph is None:
            graph = torch.zeros(n, dtype=torch.long)
        pair_mask = (graph[:, None] == graph[None, :]) & ~torch.eye(n, dtype=torch.bool)
        weight_mask = pair_mask.to(sem.dtype)
        neighbours = pair_mask.sum(1).to(sem.dtype)
        P = self.config.n_predicates
        norm = torch.where(neighbours > 0, 1.0 / (P * neighbours.clamp(min=1)), torch.zeros_like(neighbours))

        spa_scores = self.spatial_scores(spa)
        tables = []
        h = sem
        for t in range(T):
            table, inv_states = self.score_tables(h, spa_scores, t)
            tables.append(table)
            m = self.messages(h, table.fwd * weight_mask, inv_states)
            h = self.update(h, m, norm)
            if not torch.isfinite(h).all():
                raise NonFiniteError(f"non-finite hidden state after iteration {t}")
        final, _ = self.score_tables(h, spa_scores, T)
        tables.append(final)
        return ForwardResult(h, spa, tables, graph)

    def messages(self, sem: torch.Tensor, weights: torch.Tensor, payload: torch.Tensor | None = None) -> torch.Tensor:
        """m_i = sum_p sum_j weights[p, i, j] * g_p(sem_j).

        ``g_p`` is the inverse semantic function (forward when inverses
        are disabled). ``weights`` must already be zero on the diagonal.
        """
        src = self.functions.message_source()
        if src is None:
            return torch.zeros_like(sem)
        if payload is None:
            payload = src(sem)
        return torch.einsum("pij,pjd->id", weights, payload)

    def update(self, sem: torch.Tensor, message: torch.Tensor, norm: torch.Tensor) -> torch.Tensor:
        """W0 h + m / (|P| (|V| - 1)); ``norm`` holds the per-node factor (0 for lone nodes)."""
        h = sem @ self.functions.w0.T + message * norm[:, None]
        return torch.sigmoid(h) if self.config.update_sigmoid else h

    def classify(self, sem: torch.Tensor) -> torch.Tensor:
        return self.classifier(sem)

    # -- single-edge API ---------------------------------------------------

    def transform_semantic(self, p: int, x: torch.Tensor, direction: str = "forward") -> torch.Tensor:
        return self.functions.semantic(direction).apply_one(p, x)

    def transform_spatial(self, p: int, mask: torch.Tensor, direction: str = "forward") -> torch.Tensor:
        return self.functions.spatial(direction).apply_one(p, mask)

    def score_semantic(self, p: int, h_i: torch.Tensor, h_j: torch.Tensor, direction: str = "forward") -> torch.Tensor:
        return score_semantic(lambda x: self.transform_semantic(p, x, direction), h_i, h_j, self.diagnostics)

    def score_spatial(self, p: int, m_i: torch.Tensor, m_j: torch.Tensor, direction: str = "forward") -> torch.Tensor:
        return soft_iou(self.transform_spatial(p, m_i, direction), m_j)

    def score_predicate(self, p: int, h_i: HiddenState, h_j: HiddenState, direction: str = "forward",
                        alpha: float | None = None, i: int = -1, j: int = -1) -> ScoredEdge:
        alpha = self.config.effective_alpha if alpha is None else alpha
        s_sem = float(self.score_semantic(p, h_i.sem, h_j.sem, direction).detach()) if self.config.use_semantic else 0.0
        s_spa = float(self.score_spatial(p, h_i.spa, h_j.spa, direction).detach()) if self.config.use_spatial else 0.0
        return ScoredEdge(i, j, p, s_sem, s_spa, blend(alpha, s_sem, s_spa), direction, -1)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {}
        for name, prm in self.named_parameters():
            parts = name.split(".")
            key = parts[1] if parts[0] == "functions" else parts[0]
            groups.setdefault(key, []).append((name, prm))
        return groups


def _blend(alpha: float, sem: torch.Tensor | None, spa: torch.Tensor | None) -> torch.Tensor:
    if sem is None:
        return spa
    if spa is None:
        return sem
    return alpha * sem + (1.0 - alpha) * spa


def blend(alpha: float, s_sem: float, s_spa: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * s_sem + (1.0 - alpha) * s_spa


def score_semantic(transform: Callable[[torch.Tensor], torch.Tensor], h_i: torch.Tensor, h_j: torch.Tensor,
                   diagnostics: Counter | None = None) -> torch.Tensor:
    """(1 + cos(transform(h_i), h_j)) / 2, neutral 0.5 if either vector is zero."""
    a = transform(h_i)
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(h_j)
    if na == 0 or nb == 0:
        if diagnostics is not None:
            diagnostics["zero_norm"] += 1
        return torch.tensor(0.5, dtype=h_i.dtype)
    return 0.5 * (1.0 + (a @ h_j) / (na * nb))


# ---------------------------------------------------------------------------
# Inputs


class StoredFeatureProvider:
    """Reads the features stored on each proposal."""

    def __init__(self, dim: int | None = None):
        self.dim = dim

    def __call__(self, sample: SceneGraphSample) -> np.ndarray:
        rows = []
        for k, prop in enumerate(sample.proposals):
            if prop.feature is None:
                raise ValueError(f"sample {sample.sample_id!r}: proposal {k} has no stored feature")
            rows.append(prop.feature)
        return np.asarray(rows, dtype=np.float64)


def init_hidden(sample: SceneGraphSample, provider=None, L: int = 32, dim: int | None = None,
                dtype=torch.float32) -> list[HiddenState]:
    sem, spa = initial_tensors(sample, provider, L, dim, dtype)
    return [HiddenState(sem[i], spa[i]) for i in range(sample.n_nodes)]


def initial_tensors(sample: SceneGraphSample, provider=None, L: int = 32, dim: int | None = None,
                    dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Stacked initial semantic states (N, D) and masks (N, L, L) of one sample."""
    provider = provider or StoredFeatureProvider()
    feats = np.asarray(provider(sample), dtype=np.float64)
    dim = dim if dim is not None else getattr(provider, "dim", None)
    if feats.ndim != 2 or feats.shape[0] != sample.n_nodes or (dim is not None and feats.shape[1] != dim):
        raise ValueError(
            f"sample {sample.sample_id!r}: provider returned features of shape {feats.shape}, "
            f"expected ({sample.n_nodes}, {dim})"
        )
    masks = np.stack([rasterize_mask(p.bbox, L) for p in sample.proposals])
    return torch.as_tensor(feats, dtype=dtype), torch.as_tensor(masks, dtype=dtype)


def forward_pass(sample: SceneGraphSample, model: SceneGraphModel, iterations: int | None = None,
                 provider=None) -> ForwardResult:
    dtype = next(model.parameters()).dtype
    sem, spa = initial_tensors(sample, provider, model.config.mask_resolution, model.config.feature_dim, dtype)
    return model.propagate(sem, spa, iterations=iterations)


def count_parameters(config: ModelConfig) -> dict[str, int]:
    """Parameter totals, including the average number owned by one predicate."""
    model = SceneGraphModel(replace(config, seed=0))
    total = sum(p.numel() for p in model.parameters())
    per_pred = sum(p.numel() for n, p in model.named_parameters() if n.startswith("functions.") and "w0" not in n)
    return {
        "total": total,
        "predicate_functions": per_pred,
        "per_predicate": per_pred // config.n_predicates,
        "shared": total - per_pred,
    }


def config_json(config: ModelConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
