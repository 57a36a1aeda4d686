"""A tour of the synthetic relational world.

Every category belongs to one of four groups, and every predicate is a rule
"group A relates to group B at roughly this offset". This script prints the
rules, one sample, and how often each predicate occurs in training.

    python3 notebooks/01_synthetic_world.py
"""
from collections import Counter

import numpy as np

from relfn.synthworld import WorldConfig, build_rules, category_groups, generate_world, rasterize_mask

config = WorldConfig(samples_per_split=(200, 40, 40))
world = generate_world(config)
vocab = world.vocabulary

print("category groups:")
for g, members in enumerate(category_groups(config)):
    print(f"  group {g}: {[vocab.object_categories[c] for c in members]}")

print("\npredicate rules (subject group -> object group, mean offset of the object box):")
for p, rule in enumerate(build_rules(config)):
    kind = "rare" if p in vocab.rare_ids else "frequent"
    dx, dy = rule.displacement
    print(f"  {vocab.predicates[p]:>6} [{kind:>8}]  {sorted(rule.subject_group)} -> {sorted(rule.object_group)}"
          f"  offset ({dx:+.2f}, {dy:+.2f})")

sample = world.train[0]
print(f"\nsample {sample.sample_id}: {sample.n_nodes} objects")
for i, prop in enumerate(sample.proposals):
    print(f"  node {i}: {vocab.object_categories[prop.category_id]} at {np.round(prop.bbox, 2)}")
for s, p, o in sample.triples():
    print(f"  ({s}) {vocab.predicates[p]} ({o})")

# the spatial half of a node state is its box drawn on an L x L grid
mask = rasterize_mask(sample.proposals[0].bbox, 16)
print("\nmask of node 0:")
for row in mask.astype(int):
    print("  " + "".join("#" if v else "." for v in row))

counts = Counter(p for s in world.train for _, p, _ in s.triples())
print("\ntraining triples per predicate:")
for p in range(vocab.n_predicates):
    print(f"  {vocab.predicates[p]:>6}: {counts[p]}")
