"""Auxiliary objectives: the scene-graph contrastive loss with timestep
subsampling, plus the action-conditioned predictive-coding and
visibility-prediction baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import CPCAHead, PolicyNet, VisibilityHead

SGC_SAMPLE_RATE = 0.2
CPCA_HORIZON = 16


class DegenerateBatchError(ValueError):
    pass


class ProvenanceError(ValueError):
    pass


@dataclass
class ContrastiveBatch:
    """Aligned projected beliefs and graph codes, one column per sample.

    ``h_b`` and ``h_g`` are (D, H) Tensors; ``provenance`` holds one
    (worker_id, episode_id, step) triple per column, identical across the
    two sides by construction.
    """

    h_b: Tensor
    h_g: Tensor
    provenance: list[tuple[int, int, int]]

    def validate(self) -> None:
        if self.h_b.shape[1] != self.h_g.shape[1]:
            raise ProvenanceError(
                f"column mismatch: {self.h_b.shape[1]} beliefs vs "
                f"{self.h_g.shape[1]} graphs")
        if self.h_b.shape[1] != len(self.provenance):
            raise ProvenanceError("provenance length does not match columns")
        if len(set(self.provenance)) != len(self.provenance):
            raise ProvenanceError("duplicate (worker, episode, step) columns")


def sample_graph_steps(horizon: int, rate: float,
                       rng: np.random.Generator) -> list[int]:
    """Independent Bernoulli(rate) per step; at least one step always kept."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    keep = [t for t in range(horizon) if rng.random() < rate]
    if not keep:
        keep = [int(rng.integers(horizon))]
    return keep


def sgc_loss(batch: ContrastiveBatch) -> Tensor:
    """Mean row-wise cross-entropy of P = H_b^T H_g against the diagonal."""
    batch.validate()
    h = batch.h_b.shape[1]
    if h < 2:
        raise DegenerateBatchError(
            f"contrastive batch needs at least 2 columns, got {h}")
    p = ad.matmul(ad.transpose(batch.h_b), batch.h_g)  # (H, H)
    return _diagonal_cross_entropy(p)


def _diagonal_cross_entropy(p: Tensor) -> Tensor:
    h = p.shape[0]
    log_probs = ad.log(ad.row_softmax(p))
    diag = ad.mul(log_probs, Tensor(np.eye(h)))
    return ad.mul(ad.tsum(diag), Tensor(np.array(-1.0 / h)))


def prediction_matrix(batch: ContrastiveBatch) -> np.ndarray:
    return batch.h_b.data.T @ batch.h_g.data


def _bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, computed stably from raw scores."""
    # log(1 + e^x) = max(x, 0) + log(1 + e^-|x|); build it from primitives.
    y = Tensor(labels)
    pos = ad.relu(logits)
    neg_abs = ad.mul(_tabs(logits), Tensor(np.array(-1.0)))
    softplus = ad.add(pos, ad.log(ad.add(Tensor(np.ones(1)),
                                         ad.exp(neg_abs))))
    loss = ad.sub(softplus, ad.mul(logits, y))
    return ad.tmean(loss)


def _tabs(x: Tensor) -> Tensor:
    return ad.add(ad.relu(x), ad.relu(ad.mul(x, Tensor(np.array(-1.0)))))


def cpca_loss(head: CPCAHead, policy: PolicyNet, beliefs: np.ndarray,
              actions: np.ndarray, obs_flat: np.ndarray,
              goal_ids: np.ndarray, dones: np.ndarray,
              rng: np.random.Generator, k: int = CPCA_HORIZON) -> Tensor:
    """Contrastive predictive coding over up to k future steps.

    ``beliefs`` (T, B_dim) are pre-update beliefs, ``actions`` (T,),
    ``obs_flat``/``goal_ids`` the aligned observations; rolling stops at
    episode boundaries (``dones``). Positives are the true future
    observation encodings; negatives are a shuffled pairing.
    """
    t_len = len(actions)
    if t_len < 2:
        raise DegenerateBatchError(
            f"cpca needs trajectories of >= 2 steps, got {t_len}")
    k = min(k, t_len - 1)
    enc = policy.encode_obs(Tensor(obs_flat), goal_ids)  # (T, enc_dim)

    starts = np.arange(t_len - 1)
    # valid[i-1][t]: target t+i exists and no episode boundary inside [t, t+i).
    boundary = np.asarray(dones, dtype=bool)
    valid = np.zeros((k, t_len - 1), dtype=bool)
    for i in range(1, k + 1):
        for t in starts:
            if t + i < t_len and not boundary[t:t + i].any():
                valid[i - 1, t] = True

    h = Tensor(beliefs[starts])
    losses = []
    for i in range(1, k + 1):
        if not valid[i - 1].any():
            break
        act = np.minimum(starts + i - 1, t_len - 1)
        a_emb = ad.gather_rows(head.action_embed, actions[act])
        h = head.gru(a_emb, h)
        pred = head.score(h)  # (T-1, enc_dim)
        rows = np.flatnonzero(valid[i - 1])
        pos_idx = rows + i
        neg_idx = rng.permutation(pos_idx)
        pred_v = ad.gather_rows(pred, rows)
        pos_scores = ad.tsum(ad.mul(pred_v, ad.gather_rows(enc, pos_idx)),
                             axis=1)
        neg_scores = ad.tsum(ad.mul(pred_v, ad.gather_rows(enc, neg_idx)),
                             axis=1)
        losses.append(_bce_with_logits(pos_scores, np.ones(len(rows))))
        losses.append(_bce_with_logits(neg_scores, np.zeros(len(rows))))
    total = losses[0]
    for item in losses[1:]:
        total = ad.add(total, item)
    return ad.mul(total, Tensor(np.array(1.0 / len(losses))))


def visibility_loss(head: VisibilityHead, beliefs: Tensor,
                    labels: np.ndarray) -> Tensor:
    """Mean per-category binary cross-entropy from a linear head on b_t."""
    logits = head.head(beliefs)
    return _bce_with_logits(logits, labels.astype(float))
