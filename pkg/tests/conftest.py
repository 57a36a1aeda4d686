import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from relfn.gcn import ModelConfig, SceneGraphModel  # noqa: E402
from relfn.synthworld import WorldConfig, generate_world, rasterize_mask  # noqa: E402

torch.set_num_threads(1)


def random_instance(seed, n_nodes=None, n_preds=None, dim=None, L=None, **cfg):
    """A random double-precision model plus random node states and masks."""
    rng = np.random.default_rng(seed)
    n = n_nodes or int(rng.integers(1, 6))
    P = n_preds or int(rng.integers(1, 4))
    D = dim or int(rng.integers(2, 9))
    L = L or int(rng.integers(4, 9))
    config = ModelConfig(
        feature_dim=D,
        mask_resolution=L,
        predicate_ids=tuple(range(P)),
        n_categories=3,
        sem_depth=cfg.pop("sem_depth", 2),
        spa_depth=cfg.pop("spa_depth", 2),
        spa_channels=cfg.pop("spa_channels", 3),
        seed=int(seed),
        **cfg,
    )
    model = SceneGraphModel(config).double()
    with torch.no_grad():
        for name, prm in model.named_parameters():
            if "bias" in name:
                prm.uniform_(-0.2, 0.2)
    sem = torch.as_tensor(rng.standard_normal((n, D)))
    boxes = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, 0.6, size=2)
        w, h = rng.uniform(0.15, 0.4, size=2)
        boxes.append((x1, y1, x1 + w, y1 + h))
    spa = torch.as_tensor(np.stack([rasterize_mask(b, L) for b in boxes]))
    return model, sem, spa


@pytest.fixture
def instance():
    return random_instance


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldConfig(samples_per_split=(80, 10, 20), seed=3))


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(
        WorldConfig(samples_per_split=(24, 6, 12), feature_dim=8, mask_resolution=8, seed=1)
    )


@pytest.fixture
def tiny_config(tiny_world):
    return ModelConfig(
        feature_dim=8,
        mask_resolution=8,
        predicate_ids=tuple(tiny_world.vocabulary.frequent),
        n_categories=tiny_world.vocabulary.n_categories,
        sem_depth=2,
        spa_depth=2,
        spa_channels=2,
    )


@pytest.fixture(scope="session")
def default_world():
    return generate_world(WorldConfig())


TRAIN_SEEDS = (0, 1, 2)


def _train_or_load(dataset, seed, disable_inverse, root):
    """Desk recipe on the default world; reuses a finished run under ``root``."""
    import json

    from relfn.checkpoint import load_checkpoint
    from relfn.trainer import TrainConfig, default_model_config, train

    out = Path(root) / f"s{seed}_{'noinv' if disable_inverse else 'full'}"
    report_path = out / "report.json"
    if report_path.exists():
        model, _ = load_checkpoint(out / "model.ckpt")
        return model, json.loads(report_path.read_text())
    model, rep = train(dataset, default_model_config(dataset), TrainConfig(seed=seed, disable_inverse=disable_inverse),
                       out_dir=out)
    report = rep.to_dict(include_timing=True)
    report_path.write_text(json.dumps(report))
    return model, report


@pytest.fixture(scope="session")
def trained_models(default_world, tmp_path_factory):
    """{"full": [(model, report)] * 3 seeds, "noinv": [...]}.

    Training takes several minutes per run. Set RELFN_TEST_CACHE to a
    directory to keep finished runs between pytest sessions.
    """
    import os

    root = os.environ.get("RELFN_TEST_CACHE") or tmp_path_factory.mktemp("trained")
    return {
        "full": [_train_or_load(default_world, s, False, root) for s in TRAIN_SEEDS],
        "noinv": [_train_or_load(default_world, s, True, root) for s in TRAIN_SEEDS],
    }


# criterion number -> list of (ok, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} ({'; '.join(d for _, d in parts)})")


def pytest_collection_modifyitems(items):
    for item in items:
        if "trained_models" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
