"""Train the graph model on a small world and score it.

A reduced version of the desk recipe so it finishes in a couple of minutes on
one core. Swap in WorldConfig() and TrainConfig() for the full run.

    python3 notebooks/02_train_and_evaluate.py
"""
import torch

from relfn.decoder import classify_nodes, decode_sample, emit_scene_graph, score_all_edges
from relfn.gcn import forward_pass
from relfn.synthworld import WorldConfig, generate_world
from relfn.trainer import TrainConfig, default_model_config, evaluate_recall, train

torch.set_num_threads(1)

world = generate_world(WorldConfig(samples_per_split=(200, 40, 60)))
config = default_model_config(world, mask_resolution=8, spa_channels=4)
model, report = train(world, config, TrainConfig(epochs=8, seed=0))

print("epoch  train loss  val loss  val R@50")
for e, (tl, vl, r) in enumerate(zip(report.train_losses, report.val_losses, report.val_recall)):
    print(f"{e:5d}  {tl:10.4f}  {vl:8.4f}  {r:8.3f}")
print(f"kept epoch {report.best_epoch}")

for mode in ("predcls", "sgcls", "sggen"):
    res = evaluate_recall(model, world.test, ks=(20, 50, 100), mode=mode)
    print(mode, {k: round(v, 3) for k, v in res.mean.items()})

# one decoded graph next to its ground truth
vocab = world.vocabulary
sample = world.test[0]
result = forward_pass(sample, model)
graph = emit_scene_graph(score_all_edges(result), classify_nodes(model, result))
print(f"\n{sample.sample_id}: ground truth")
for s, p, o in sample.triples(vocab.frequent):
    print(f"  ({s}) {vocab.predicates[p]} ({o})")
print("top predictions")
for i, p, j, score in decode_sample(model, sample).tuples[:5]:
    print(f"  ({i}) {vocab.predicates[p]} ({j})  {score:.3f}")
print(f"{len(graph.edges)} edges above the threshold {graph.tau}")
