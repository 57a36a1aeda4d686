"""Look inside the learned predicate functions.

Writes a forward and an inverse heatmap as PGM images, lists which object
categories a predicate points to from a given subject, and projects the
category embeddings to 2D.

    python3 notebooks/04_inspect_functions.py [out_dir]
"""
import sys
from pathlib import Path

import torch

from relfn.interp import category_means, embedding_projection, projection_csv, semantic_neighbors, spatial_heatmap
from relfn.synthworld import WorldConfig, build_rules, generate_world
from relfn.trainer import TrainConfig, default_model_config, train

torch.set_num_threads(1)
out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "inspect_out")
out_dir.mkdir(parents=True, exist_ok=True)

config = WorldConfig(samples_per_split=(200, 40, 40))
world = generate_world(config)
vocab = world.vocabulary
model, _ = train(world, default_model_config(world), TrainConfig(epochs=8))

pred = vocab.frequent[1]
sample = world.val[0]
for direction in ("forward", "inverse"):
    path = out_dir / f"{vocab.predicates[pred]}_{direction}.pgm"
    spatial_heatmap(model, pred, direction, sample, 0, path)
    print("wrote", path)

means = category_means(model, world)
rule = build_rules(config)[pred]
subject = min(rule.subject_group)
ranked = semantic_neighbors(model, means, pred, subject, top_n=5)
print(f"\n{vocab.object_categories[subject]} --{vocab.predicates[pred]}--> ?")
print(f"(rule's object group: {[vocab.object_categories[c] for c in sorted(rule.object_group)]})")
for c, sim in ranked:
    print(f"  {vocab.object_categories[c]}  {sim:.3f}")

coords = embedding_projection(means)
(out_dir / "embedding.csv").write_text(projection_csv(coords, vocab.object_categories))
print("\nwrote", out_dir / "embedding.csv")
