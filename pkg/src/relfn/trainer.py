"""Training on frequent predicates, losses, and the finite-difference gradient check.

The objective is node cross-entropy plus binary cross-entropy on the
combined (forward x backward) edge scores, where every ground-truth
triple is a positive and ``r`` non-triples per positive are sampled as
negatives.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from relfn.checkpoint import save_checkpoint
from relfn.datamodel import Dataset, SceneGraphSample
from relfn.decoder import ground_truth, rank_predictions
from relfn.gcn import ModelConfig, NonFiniteError, SceneGraphModel, initial_tensors
from relfn.metrics import recall_at_k

log = logging.getLogger(__name__)

BCE_EPS = 1e-6
_VAL_EPOCH = 2**31 - 1  # seed slot for validation negatives


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 30
    batch_size: int = 8
    negative_ratio: int = 4
    node_weight: float = 1.0
    edge_weight: float = 1.0
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.0
    semantic_only: bool = False
    spatial_only: bool = False
    disable_inverse: bool = False
    eval_k: int = 50

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.negative_ratio < 1:
            raise ValueError("epochs, batch_size and negative_ratio must be >= 1")
        if self.node_weight < 0 or self.edge_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.semantic_only and self.spatial_only:
            raise ValueError("semantic_only and spatial_only are mutually exclusive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def apply_ablations(model_config: ModelConfig, train_config: TrainConfig) -> ModelConfig:
    return replace(
        model_config,
        use_semantic=model_config.use_semantic and not train_config.spatial_only,
        use_spatial=model_config.use_spatial and not train_config.semantic_only,
        use_inverse=model_config.use_inverse and not train_config.disable_inverse,
    )


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    val_recall: list[float] = field(default_factory=list)
    final_val_recall_at_50: float = float("nan")
    best_epoch: int = -1
    checkpoint: str | None = None
    seconds: float = 0.0
    empty_samples: int = 0
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("seconds")
        return d


# ---------------------------------------------------------------------------
# Losses


def _bce(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    pos = pos.clamp(BCE_EPS, 1 - BCE_EPS)
    neg = neg.clamp(BCE_EPS, 1 - BCE_EPS)
    terms = torch.cat([-torch.log(pos), -torch.log1p(-neg)])
    return terms.mean()


def sample_negatives(n_nodes: int, n_predicates: int, positives: Sequence[tuple[int, int, int]], r: int,
                     rng: np.random.Generator) -> np.ndarray:
    """``r`` distinct non-positive ``(i, p, j)`` per positive (fewer if the graph is small)."""
    pos = set(positives)
    cand = [
        (i, p, j)
        for i in range(n_nodes)
        for p in range(n_predicates)
        for j in range(n_nodes)
        if i != j and (i, p, j) not in pos
    ]
    n = min(r * len(pos), len(cand))
    if n == 0:
        return np.zeros((0, 3), dtype=np.int64)
    pick = np.sort(rng.choice(len(cand), size=n, replace=False))
    return np.asarray([cand[k] for k in pick], dtype=np.int64)


def edge_loss(scores: torch.Tensor, positives: Sequence[tuple[int, int, int]], r: int = 4, seed: int = 0,
              negatives: np.ndarray | None = None) -> torch.Tensor:
    """Mean BCE over the positives and sampled negatives of one graph.

    ``scores`` is a ``(P, N, N)`` table; triples are ``(i, p, j)`` with
    ``p`` a model predicate slot. A graph without positives contributes 0.
    """
    P, N, _ = scores.shape
    if not positives:
        return scores.sum() * 0.0
    if negatives is None:
        negatives = sample_negatives(N, P, positives, r, np.random.default_rng(seed))
    pos = torch.as_tensor(np.asarray(positives, dtype=np.int64).reshape(-1, 3))
    neg = torch.as_tensor(negatives.reshape(-1, 3))
    return _bce(scores[pos[:, 1], pos[:, 0], pos[:, 2]], scores[neg[:, 1], neg[:, 0], neg[:, 2]])


def node_loss(node_distributions: torch.Tensor, categories: Sequence[int | None]) -> torch.Tensor:
    """Mean cross-entropy over nodes with known categories (0 if none)."""
    idx = [k for k, c in enumerate(categories) if c is not None]
    if not idx:
        return node_distributions.sum() * 0.0
    rows = torch.as_tensor(idx)
    cols = torch.as_tensor([categories[k] for k in idx])
    return -torch.log(node_distributions[rows, cols].clamp_min(1e-12)).mean()


def _node_loss_logits(logits: torch.Tensor, categories: torch.Tensor) -> torch.Tensor:
    known = categories >= 0
    if not known.any():
        return logits.sum() * 0.0
    return torch.nn.functional.cross_entropy(logits[known], categories[known])


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Prepared:
    sample: SceneGraphSample
    sem: torch.Tensor
    spa: torch.Tensor
    categories: torch.Tensor
    positives: list[tuple[int, int, int]]


def prepare(samples: Sequence[SceneGraphSample], config: ModelConfig, provider=None,
            dtype=torch.float32) -> list[Prepared]:
    slot = {p: k for k, p in enumerate(config.predicate_ids)}
    out = []
    for s in samples:
        sem, spa = initial_tensors(s, provider, config.mask_resolution, config.feature_dim, dtype)
        cats = torch.as_tensor([-1 if c is None else c for c in s.categories], dtype=torch.long)
        pos = [(r.subject_idx, slot[r.predicate_id], r.object_idx) for r in s.relationships if r.predicate_id in slot]
        out.append(Prepared(s, sem, spa, cats, pos))
    return out


def batch_loss(model: SceneGraphModel, batch: Sequence[Prepared], tcfg: TrainConfig, seeds: Sequence[int]):
    """Weighted node + edge loss over several graphs run as one disconnected graph."""
    sem = torch.cat([b.sem for b in batch])
    spa = torch.cat([b.spa for b in batch])
    sizes = [b.sem.shape[0] for b in batch]
    graph = torch.repeat_interleave(torch.arange(len(batch)), torch.as_tensor(sizes))
    result = model.propagate(sem, spa, graph)
    combined = result.final.combined()
    cats = torch.cat([b.categories for b in batch])
    n_loss = _node_loss_logits(model.classifier.logits(result.sem), cats)
    e_terms, empty = [], 0
    start = 0
    for b, n, seed in zip(batch, sizes, seeds):
        if b.positives:
            block = combined[:, start:start + n, start:start + n]
            e_terms.append(edge_loss(block, b.positives, tcfg.negative_ratio, seed))
        else:
            empty += 1
        start += n
    e_loss = torch.stack(e_terms).mean() if e_terms else combined.sum() * 0.0
    total = tcfg.node_weight * n_loss + tcfg.edge_weight * e_loss
    return total, n_loss, e_loss, empty


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.default_rng([seed, epoch, index]).integers(2**31))


def evaluate_loss(model: SceneGraphModel, data: Sequence[Prepared], tcfg: TrainConfig, batch_size: int = 32) -> float:
    """Validation loss with negatives fixed by ``tcfg.seed`` (epoch-independent)."""
    model.eval()
    total, weight = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            batch = data[start:start + batch_size]
            seeds = [_sample_seed(tcfg.seed, _VAL_EPOCH, start + k) for k in range(len(batch))]
            loss, *_ = batch_loss(model, batch, tcfg, seeds)
            total += float(loss) * len(batch)
            weight += len(batch)
    return total / max(weight, 1)


def evaluate_recall(model: SceneGraphModel, samples: Sequence[SceneGraphSample], ks=(50, 100), mode="predcls",
                    provider=None, prepared: Sequence[Prepared] | None = None):
    """Recall@K over the model's own (frequent) predicates."""
    from relfn.decoder import classify_nodes, score_all_edges

    model.eval()
    cfg = model.config
    preds, truths = [], []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for k, s in enumerate(samples):
            if prepared is not None:
                sem, spa = prepared[k].sem, prepared[k].spa
            else:
                sem, spa = initial_tensors(s, provider, cfg.mask_resolution, cfg.feature_dim, dtype)
            result = model.propagate(sem, spa)
            dist = classify_nodes(model, result) if mode != "predcls" else None
            preds.append(rank_predictions(score_all_edges(result), dist, mode, s, cfg.predicate_ids))
            truths.append(ground_truth(s, cfg.predicate_ids))
    return recall_at_k(preds, truths, ks, mode)


def make_optimizer(model: SceneGraphModel, tcfg: TrainConfig) -> torch.optim.Optimizer:
    if tcfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=tcfg.learning_rate, momentum=tcfg.momentum)
    return torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate)


def train(dataset: Dataset, model_config: ModelConfig | None = None, train_config: TrainConfig | None = None,
          out_dir: str | Path | None = None, provider=None) -> tuple[SceneGraphModel, TrainReport]:
    """Fit a model on the train split's frequent predicates.

    The model with the lowest validation loss is kept and, when
    ``out_dir`` is given, written to ``out_dir/model.ckpt``. The training
    seed also seeds parameter initialization.
    """
    tcfg = train_config or TrainConfig()
    base = model_config or default_model_config(dataset)
    mcfg = apply_ablations(replace(base, predicate_ids=tuple(dataset.vocabulary.frequent), seed=tcfg.seed), tcfg)
    if not dataset.val:
        raise ValueError("training needs a nonempty val split")
    t0 = time.perf_counter()
    torch.manual_seed(tcfg.seed)
    model = SceneGraphModel(mcfg)
    opt = make_optimizer(model, tcfg)
    train_data = prepare(dataset.train, mcfg, provider)
    val_data = prepare(dataset.val, mcfg, provider)
    report = TrainReport(model_config=mcfg.to_dict(), train_config=tcfg.to_dict())
    report.empty_samples = sum(1 for d in train_data if not d.positives)
    ckpt_path = Path(out_dir) / "model.ckpt" if out_dir is not None else None
    best_loss, best_state = math.inf, None
    for epoch in range(tcfg.epochs):
        model.train()
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(train_data))
        running, count = 0.0, 0
        for step, start in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            batch = [train_data[k] for k in idx]
            seeds = [_sample_seed(tcfg.seed, epoch, int(k)) for k in idx]
            try:
                loss, _, _, _ = batch_loss(model, batch, tcfg, seeds)
            except NonFiniteError as exc:
                raise TrainingDivergence(f"epoch {epoch} step {step}: {exc}") from None
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.detach()) * len(batch)
            count += len(batch)
        report.train_losses.append(running / count)
        val_loss = evaluate_loss(model, val_data, tcfg)
        report.val_losses.append(val_loss)
        rec = evaluate_recall(model, dataset.val, (tcfg.eval_k,), prepared=val_data).mean[tcfg.eval_k]
        report.val_recall.append(rec)
        log.info("epoch %d train %.4f val %.4f R@%d %.4f", epoch, report.train_losses[-1], val_loss, tcfg.eval_k, rec)
        if val_loss < best_loss:
            best_loss, report.best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
            if ckpt_path is not None:
                save_checkpoint(model, ckpt_path, extra={"epoch": epoch, "val_loss": val_loss})
    model.load_state_dict(best_state)
    model.eval()
    report.final_val_recall_at_50 = evaluate_recall(model, dataset.val, (50,), prepared=val_data).mean[50]
    report.checkpoint = str(ckpt_path) if ckpt_path is not None else None
    report.seconds = time.perf_counter() - t0
    return model, report


def default_model_config(dataset: Dataset, **overrides) -> ModelConfig:
    dim = dataset.feature_dim
    if dim is None:
        raise ValueError("dataset has no stored features; pass a model config with feature_dim")
    kw = dict(
        feature_dim=dim,
        predicate_ids=tuple(dataset.vocabulary.frequent),
        n_categories=dataset.vocabulary.n_categories,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def step_once(model: SceneGraphModel, batch: Sequence[Prepared], tcfg: TrainConfig) -> None:
    """One optimizer step on ``batch`` (used to check the zero-learning-rate contract)."""
    opt = make_optimizer(model, tcfg)
    loss, *_ = batch_loss(model, batch, tcfg, [tcfg.seed] * len(batch))
    opt.zero_grad()
    loss.backward()
    opt.step()


# ---------------------------------------------------------------------------
# Gradient check


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_group: dict[str, float]
    n_parameters: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    @property
    def worst_group(self) -> str:
        return max(self.per_group, key=self.per_group.get)

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "per_group": self.per_group,
            "n_parameters": self.n_parameters,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def toy_batch(config: ModelConfig, seed: int = 0, n_samples: int = 2, max_nodes: int = 4) -> list[Prepared]:
    """Random small graphs with features, masks, labels and relationships."""
    from relfn.datamodel import ObjectProposal, Relationship

    rng = np.random.default_rng(seed)
    samples = []
    for s in range(n_samples):
        n = int(rng.integers(2, max_nodes + 1))
        props = []
        for _ in range(n):
            x1, y1 = rng.uniform(0.0, 0.6, size=2)
            w, h = rng.uniform(0.2, 0.4, size=2)
            props.append(
                ObjectProposal(
                    bbox=(float(x1), float(y1), float(x1 + w), float(y1 + h)),
                    category_id=int(rng.integers(config.n_categories)),
                    feature=tuple(float(v) for v in rng.standard_normal(config.feature_dim)),
                )
            )
        rels = {(0, config.predicate_ids[int(rng.integers(config.n_predicates))], 1)}
        if n > 2:
            rels.add((2, config.predicate_ids[0], 1))
        samples.append(
            SceneGraphSample(f"toy-{s}", tuple(props), tuple(Relationship(*r) for r in sorted(rels)))
        )
    return prepare(samples, config, dtype=torch.float64)


def gradcheck(model_config: ModelConfig, seed: int = 0, step: float = 1e-4, tolerance: float = 1e-4,
              train_config: TrainConfig | None = None, model: SceneGraphModel | None = None) -> GradcheckReport:
    """Compare autograd gradients of the training loss with central differences.

    Every scalar parameter is perturbed. The relative error of an entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)``; groups
    report their worst entry.
    """
    tcfg = train_config or TrainConfig(seed=seed)
    if model is None:
        model = SceneGraphModel(replace(model_config, seed=seed))
        _randomize_biases(model, seed)
    model = model.double()
    batch = toy_batch(model.config, seed)
    seeds = [seed + k for k in range(len(batch))]

    def loss_fn() -> torch.Tensor:
        return batch_loss(model, batch, tcfg, seeds)[0]

    model.zero_grad()
    loss_fn().backward()
    per_group = {}
    n_params = 0
    with torch.no_grad():
        for group, params in model.parameter_groups().items():
            worst = 0.0
            for _, prm in params:
                analytic = prm.grad.detach().clone() if prm.grad is not None else torch.zeros_like(prm)
                flat = prm.view(-1)
                for k in range(flat.numel()):
                    orig = float(flat[k])
                    flat[k] = orig + step
                    up = float(loss_fn())
                    flat[k] = orig - step
                    down = float(loss_fn())
                    flat[k] = orig
                    numeric = (up - down) / (2 * step)
                    a = float(analytic.view(-1)[k])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                    worst = max(worst, err)
                n_params += flat.numel()
            per_group[group] = worst
    return GradcheckReport(max(per_group.values()), per_group, n_params, tolerance)


def _randomize_biases(model: SceneGraphModel, seed: int) -> None:
    # zero biases put ReLU inputs of empty mask regions exactly on the kink
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, prm in model.named_parameters():
            if "bias" in name:
                prm.uniform_(-0.1, 0.1, generator=gen)


def save_report(report: TrainReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
