"""Learn the rare predicates from k examples on top of a frozen graph model.

The frozen node states give each object pair a representation; a small MLP
classifies it into one of the rare predicates. The same MLP on raw features
and masks is the baseline. The graph model is trained with the full desk
recipe (about six minutes on one core); a much shorter run leaves the frozen
states too weak to beat the baseline.

    python3 notebooks/03_fewshot_transfer.py
"""
import torch

from relfn.fewshot import run_fewshot
from relfn.synthworld import WorldConfig, generate_world
from relfn.trainer import TrainConfig, default_model_config, train

torch.set_num_threads(1)

world = generate_world(WorldConfig())
model, _ = train(world, default_model_config(world), TrainConfig(seed=0))

out = run_fewshot(model, world, ks=(1, 3, 5), seeds=(0, 1, 2))
print(f"rare predicates: {[world.vocabulary.predicates[p] for p in world.vocabulary.rare]}")
print("chance recall@1 = 1/4\n")
print("  k   frozen graph   raw features")
for k in ("1", "3", "5"):
    g, r = out["summary"]["gcn"][k], out["summary"]["raw"][k]
    print(f"  {k}   {g['median_recall_at_1']:12.3f}   {r['median_recall_at_1']:12.3f}")
