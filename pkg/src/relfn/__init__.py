"""Scene graphs from learned predicate functions.

Predicates are modelled as forward and inverse functions acting on node
states (a semantic vector and a spatial attention map). A graph
convolution passes messages through these functions, the decoder turns
the final scores into scene graphs, and the frozen node states are reused
to learn rare predicates from a handful of examples.
"""

from relfn.datamodel import (
    Dataset,
    DatasetError,
    FewShotEpisode,
    ObjectProposal,
    PredicateVocabulary,
    Relationship,
    SceneGraphSample,
    load_dataset,
    sample_k_shot_episode,
    save_dataset,
    split_predicates,
)
from relfn.gcn import ModelConfig, SceneGraphModel, forward_pass, init_hidden
from relfn.synthworld import WorldConfig, generate_world
from relfn.trainer import TrainConfig, gradcheck, train
from relfn.metrics import recall_at_k
from relfn.checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DatasetError",
    "FewShotEpisode",
    "ModelConfig",
    "ObjectProposal",
    "PredicateVocabulary",
    "Relationship",
    "SceneGraphModel",
    "SceneGraphSample",
    "TrainConfig",
    "WorldConfig",
    "forward_pass",
    "generate_world",
    "gradcheck",
    "init_hidden",
    "load_checkpoint",
    "load_dataset",
    "recall_at_k",
    "sample_k_shot_episode",
    "save_checkpoint",
    "save_dataset",
    "split_predicates",
    "train",
]
