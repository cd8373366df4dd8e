"""Online instance matching: a momentum-updated lookup table of identity
prototypes plus a circular queue of unlabeled embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import ContractError, Tensor, get_default_dtype

UNLABELED = -1


@dataclass
class OimState:
    num_identities: int
    dim: int = 128
    queue_capacity: int = 64
    momentum: float = 0.5
    temperature: float = 1.0 / 30
    lookup_table: np.ndarray = field(default=None)
    queue: np.ndarray = field(default=None)
    queue_len: int = 0
    queue_head: int = 0

    def __post_init__(self):
        if self.lookup_table is None:
            self.lookup_table = np.zeros((self.num_identities, self.dim), dtype=get_default_dtype())
        if self.queue is None:
            self.queue = np.zeros((self.queue_capacity, self.dim), dtype=get_default_dtype())

    def queue_rows(self) -> np.ndarray:
        return self.queue[:self.queue_len]

    def push_unlabeled(self, embeddings: np.ndarray) -> None:
        for e in embeddings:
            self.queue[self.queue_head] = e
            self.queue_head = (self.queue_head + 1) % self.queue_capacity
            self.queue_len = min(self.queue_len + 1, self.queue_capacity)

    def update(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        """``l <- normalize(momentum * l + (1 - momentum) * e)`` per labeled
        embedding, in order; unlabeled ones enter the queue."""
        for e, y in zip(embeddings, labels):
            if y == UNLABELED:
                self.push_unlabeled(e[None])
                continue
            row = self.momentum * self.lookup_table[y] + (1.0 - self.momentum) * e
            norm = np.linalg.norm(row)
            self.lookup_table[y] = row / norm if norm > 0 else e


def oim_logits(embeddings: Tensor, state: OimState) -> Tensor:
    table = np.concatenate([state.lookup_table, state.queue_rows()], axis=0)
    return (embeddings @ Tensor(table.T, dtype=embeddings.data.dtype)) * (1.0 / state.temperature)


def oim_loss(embeddings: Tensor, labels, state: OimState, update: bool = True) -> Tensor:
    """Mean cross-entropy of labeled embeddings against their LUT rows. The
    state is updated in place afterwards (set ``update=False`` to skip)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max(initial=-1) >= state.num_identities:
        raise ContractError(f"identity label {labels.max()} outside lookup table of {state.num_identities}")
    if labels.size and labels.min(initial=0) < UNLABELED:
        raise ContractError(f"invalid identity label {labels.min()}")
    labeled = np.flatnonzero(labels != UNLABELED)
    if len(labeled):
        picked = embeddings[labeled]
        loss = F.cross_entropy(oim_logits(picked, state), labels[labeled])
    elif embeddings.shape[0]:
        loss = (embeddings * 0.0).sum()
    else:
        loss = Tensor(0.0, dtype=embeddings.data.dtype)
    if update:
        state.update(embeddings.data.astype(np.float64), labels)
    return loss

