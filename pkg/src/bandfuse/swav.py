"""Swapped-assignment objective over multi-view embeddings.

Codes for each global view are computed (gradient-free) by aligning
embeddings to a bank of unit-norm prototype vectors and re-balancing the
assignment with Sinkhorn-Knopp; a FIFO queue of past embeddings widens
the Sinkhorn batch so the prototype count can exceed the mini-batch.
Every other view must then predict those codes through a temperature
softmax over its own prototype scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import SwavConfig
from .errors import ParameterError, UsageError


def prototype_scores(embeddings: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Cosine similarities (both inputs row-unit-norm): z @ C^T."""
    return embeddings @ prototypes.T


def sinkhorn_codes(scores: np.ndarray, epsilon: float, n_iters: int) -> np.ndarray:
    """Balanced soft assignments from an (M, K) score matrix.

    Q proportional to exp(scores/epsilon) is alternately normalized to
    row marginals 1/M and column marginals 1/K, then each row is
    renormalized to sum exactly 1. Rows are max-subtracted before exp;
    the first row normalization absorbs that rescaling, so the result
    is unchanged.
    """
    if epsilon <= 0:
        raise ParameterError(f"sinkhorn epsilon must be > 0, got {epsilon}")
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise UsageError(f"sinkhorn needs a non-empty (M, K) matrix, got {scores.shape}")
    m, k = scores.shape
    z = scores.astype(np.float64) / epsilon
    q = np.exp(z - z.max(axis=1, keepdims=True))
    for _ in range(n_iters):
        q /= q.sum(axis=1, keepdims=True) * m
        q /= q.sum(axis=0, keepdims=True) * k
    q /= q.sum(axis=1, keepdims=True)
    return q


@dataclass
class SwavState:
    """Prototype bank plus the training-time queue and monitors."""

    prototypes: Tensor                # (K, d_e) learnable, unit-norm rows
    cfg: SwavConfig
    queue_capacity: int               # per global-view slot
    queues: list[np.ndarray] = field(default_factory=list)
    _epoch_code_sum: np.ndarray | None = None
    _epoch_code_rows: int = 0

    def __post_init__(self) -> None:
        if not self.queues:
            d_e = self.prototypes.shape[1]
            self.queues = [
                np.zeros((0, d_e), dtype=np.float64) for _ in range(self.cfg.global_views)
            ]

    @property
    def n_prototypes(self) -> int:
        return self.prototypes.shape[0]

    def renormalize_prototypes(self) -> None:
        """Unit L2 rows; call after every optimizer step."""
        c = self.prototypes.data
        self.prototypes.data = c / np.linalg.norm(c, axis=1, keepdims=True)

    def codes_for_slot(self, slot: int, embeddings: np.ndarray) -> np.ndarray:
        """Sinkhorn codes for the current batch of one global-view slot.

        The queue rows of the slot join the Sinkhorn batch (marginal
        computation only); only the current batch rows are returned.
        """
        stacked = np.concatenate([embeddings, self.queues[slot]], axis=0)
        scores = prototype_scores(stacked, self.prototypes.data.astype(np.float64))
        q = sinkhorn_codes(scores, self.cfg.sinkhorn_epsilon, self.cfg.sinkhorn_iterations)
        return q[: embeddings.shape[0]]

    def push_queue(self, slot: int, embeddings: np.ndarray) -> None:
        """FIFO append at the end of a step; oldest rows evicted first."""
        merged = np.concatenate([self.queues[slot], embeddings.astype(np.float64)], axis=0)
        if merged.shape[0] > self.queue_capacity:
            merged = merged[-self.queue_capacity:]
        self.queues[slot] = merged

    # collapse monitoring -----------------------------------------------

    def record_codes(self, codes: np.ndarray) -> None:
        if self._epoch_code_sum is None:
            self._epoch_code_sum = codes.sum(axis=0)
        else:
            self._epoch_code_sum += codes.sum(axis=0)
        self._epoch_code_rows += codes.shape[0]

    def collapse_monitor(self) -> dict[str, float]:
        """Entropy (nats) and peak mass of the epoch's mean code usage."""
        if self._epoch_code_rows == 0:
            raise UsageError("collapse monitor requires at least one recorded batch")
        usage = self._epoch_code_sum / self._epoch_code_rows
        return {
            "usage_entropy": usage_entropy(usage),
            "max_fraction": float(usage.max()),
        }

    def reset_epoch(self) -> None:
        self._epoch_code_sum = None
        self._epoch_code_rows = 0


def usage_entropy(distribution: np.ndarray) -> float:
    p = np.asarray(distribution, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def swav_loss(embeddings: Tensor, codes: list[np.ndarray], prototypes: Tensor,
              temperature: float, batch: int, n_global: int, n_views: int) -> Tensor:
    """Swapped-prediction loss over all (global code, other view) pairs.

    ``embeddings`` is (n_views * batch, d_e) view-major; ``codes[i]`` is
    the (batch, K) Sinkhorn code of global slot i (a constant: the code
    path carries no gradient). Every pair couples code q_i with the
    softmax prediction of a different view j != i; the sum is averaged
    over samples and contributing pairs.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    if len(codes) != n_global:
        raise UsageError(f"expected {n_global} code blocks, got {len(codes)}")
    if embeddings.shape[0] != n_views * batch:
        raise UsageError(
            f"embedding rows {embeddings.shape[0]} != n_views*batch = {n_views * batch}"
        )
    k = prototypes.shape[0]
    scores = ad.matmul(embeddings, ad.transpose(prototypes, (1, 0)))
    logp = ad.log_softmax(scores, axis=-1, temperature=temperature)
    logp3 = ad.reshape(logp, (n_views, batch, k))
    logp_total = ad.tsum(logp3, axis=0)                      # sum over all views
    n_pairs = n_global * (n_views - 1)
    acc = None
    for i in range(n_global):
        others = ad.sub(logp_total, ad.slice_axis0(logp3, i))
        term = ad.neg(ad.tsum(ad.mul(Tensor(codes[i].astype(embeddings.dtype)), others)))
        acc = term if acc is None else ad.add(acc, term)
    scale = Tensor(np.asarray(1.0 / (batch * n_pairs), dtype=embeddings.dtype))
    return ad.mul(acc, scale)
