"""Per-predicate function stacks.

Every predicate owns its own MLP (semantic) and convolution stack
(spatial). Parameters of all predicates are stored stacked along a
leading predicate axis so one call transforms every node under every
predicate at once. ``apply_one`` runs a single predicate through plain
per-layer ops and serves as the slow reference path.
"""

from __future__ import annotations

import math
from collections import Counter

import torch
import torch.nn as nn
import torch.nn.functional as F


def _he_uniform_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator | None) -> None:
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


class PredicateMLP(nn.Module):
    """``n_predicates`` independent D -> D MLPs with ReLU between layers."""

    def __init__(self, n_predicates: int, dim: int, depth: int, name: str = "sem", counter: Counter | None = None):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.n_predicates, self.dim, self.depth = n_predicates, dim, depth
        self.weights = nn.ParameterList([nn.Parameter(torch.empty(n_predicates, dim, dim)) for _ in range(depth)])
        self.biases = nn.ParameterList([nn.Parameter(torch.zeros(n_predicates, dim)) for _ in range(depth)])
        self.name = name
        self.counter = counter if counter is not None else Counter()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for w, b in zip(self.weights, self.biases):
            _he_uniform_(w, self.dim, generator)
            with torch.no_grad():
                b.zero_()

    def reset_identity(self) -> None:
        with torch.no_grad():
            for w, b in zip(self.weights, self.biases):
                w.copy_(torch.eye(self.dim).expand_as(w))
                b.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, D) -> (P, N, D)."""
        self.counter[self.name] += 1
        h = torch.einsum("nd,ped->pne", x, self.weights[0]) + self.biases[0][:, None, :]
        for w, b in zip(self.weights[1:], self.biases[1:]):
            h = torch.einsum("pnd,ped->pne", torch.relu(h), w) + b[:, None, :]
        return h

    def apply_one(self, p: int, x: torch.Tensor) -> torch.Tensor:
        self.counter[self.name] += 1
        h = x
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            if layer:
                h = torch.relu(h)
            h = w[p] @ h + b[p]
        return h


class PredicateConvStack(nn.Module):
    """``n_predicates`` independent single-channel L x L -> L x L conv stacks.

    3x3 kernels, stride 1, zero same-padding, ReLU between layers and a
    sigmoid after the last one. Hidden layers carry ``channels`` maps.
    All predicates run as one grouped convolution.
    """

    def __init__(self, n_predicates: int, depth: int, channels: int = 8, name: str = "spa", counter: Counter | None = None):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.n_predicates, self.depth, self.channels = n_predicates, depth, channels
        widths = [1] + [channels] * (depth - 1) + [1]
        self.widths = widths
        self.weights = nn.ParameterList(
            [nn.Parameter(torch.empty(n_predicates * widths[l + 1], widths[l], 3, 3)) for l in range(depth)]
        )
        self.biases = nn.ParameterList([nn.Parameter(torch.zeros(n_predicates * widths[l + 1])) for l in range(depth)])
        self.name = name
        self.counter = counter if counter is not None else Counter()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            _he_uniform_(w, 9 * self.widths[l], generator)
            with torch.no_grad():
                b.zero_()

    def reset_identity(self) -> None:
        """Route the input through channel 0 with centre-tap kernels."""
        with torch.no_grad():
            for l, (w, b) in enumerate(zip(self.weights, self.biases)):
                w.zero_()
                b.zero_()
                c_out = self.widths[l + 1]
                for p in range(self.n_predicates):
                    w[p * c_out, 0, 1, 1] = 1.0

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        """(N, L, L) -> (P, N, L, L)."""
        self.counter[self.name] += 1
        n, L, _ = maps.shape
        P = self.n_predicates
        x = maps[:, None].expand(n, P, L, L)
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if l:
                x = torch.relu(x)
            x = F.conv2d(x, w, b, padding=1, groups=P)
        return torch.sigmoid(x).permute(1, 0, 2, 3)

    def apply_one(self, p: int, mask: torch.Tensor) -> torch.Tensor:
        self.counter[self.name] += 1
        x = mask[None, None]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            c_out = self.widths[l + 1]
            if l:
                x = torch.relu(x)
            x = F.conv2d(x, w[p * c_out:(p + 1) * c_out], b[p * c_out:(p + 1) * c_out], padding=1)
        return torch.sigmoid(x)[0, 0]


class NodeClassifier(nn.Module):
    """Two-layer MLP from a semantic hidden state to a category distribution."""

    def __init__(self, dim: int, n_categories: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, n_categories)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for fc in (self.fc1, self.fc2):
            _he_uniform_(fc.weight, fc.in_features, generator)
            with torch.no_grad():
                fc.bias.zero_()

    def logits(self, sem: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(sem)))

    def forward(self, sem: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(sem), dim=-1)
