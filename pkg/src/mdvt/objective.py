"""Pair-wise losses on real and virtual triplets, analytic gradients, and
Adam updates.

Virtual-triplet selection indices are frozen for the epoch, so gradients
flow only through the representations: the loss path
tables -> propagation -> readout -> fusion -> dot products -> softplus
is smooth, and every stage except the dot products is linear. The
propagation matrix is symmetric for both supported normalizations, so the
backward pass pushes final-representation gradients through the same
operator used forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .backbone import Propagator, Representations
from .dataset import TripletBatch
from .errors import ConfigError, MdvtError
from .triplet_forge import VirtualTripletSet

COMBINE_MODES = ("default", "wo_scale")


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow; -log(sigmoid(g)) == softplus(-g)."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass
class LossReport:
    """Loss components of one batch or one epoch."""

    l_bpr: float
    l_vbpr: float | None
    l_total: float
    epoch: int


def bpr_loss(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Mean of -log(sigmoid(score gap)) over the batch."""
    gaps = np.asarray(pos_scores, dtype=float) - np.asarray(neg_scores,
                                                            dtype=float)
    return float(np.mean(softplus(-gaps)))


def aggregate_virtual(user: int, virtual: VirtualTripletSet,
                      fused_items: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Mean fused vectors of the user's similar and dissimilar item groups."""
    if user not in virtual.positives:
        raise KeyError(f"user {user} has no virtual triplets")
    pos = virtual.positives[user]
    neg = virtual.negatives[user]
    return fused_items[pos].mean(axis=0), fused_items[neg].mean(axis=0)


def virtual_bpr_loss(users: np.ndarray, virtual: VirtualTripletSet,
                     fused_users: np.ndarray, fused_items: np.ndarray,
                     wo_aggr: bool = False) -> float:
    """Mean virtual-triplet loss over the contributing batch entries.

    One term per entry: the gap between the user's affinity to the mean of
    its similar group and to the mean of its dissimilar group. With
    ``wo_aggr`` the group means are removed and the entry's term is the
    mean over its rank-matched (positive_k, negative_k) pairs, which is
    identical to the default when the groups hold a single item.
    """
    terms = []
    for u in users:
        u = int(u)
        if u not in virtual.positives or len(virtual.positives[u]) == 0:
            continue
        if wo_aggr:
            pos = virtual.positives[u]
            neg = virtual.negatives[u]
            gaps = (fused_items[pos] - fused_items[neg]) @ fused_users[u]
            terms.append(float(np.mean(softplus(-gaps))))
        else:
            plus, minus = aggregate_virtual(u, virtual, fused_items)
            gap = float(fused_users[u] @ (plus - minus))
            terms.append(float(softplus(-np.array([gap]))[0]))
    if not terms:
        raise KeyError("no batch user has virtual triplets")
    return float(np.mean(terms))


def combined_loss(l_bpr: float, l_vbpr: float | None, lam: float,
                  mode: str = "default") -> float:
    """Joint loss: (1-lambda)*bpr + lambda*vbpr, or bpr + lambda*vbpr when
    the align-scale is ablated. A warm-up batch (no virtual loss) is the
    plain bpr loss."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if mode not in COMBINE_MODES:
        raise ConfigError(f"unknown loss combination mode {mode!r}")
    if l_vbpr is None:
        return l_bpr
    if mode == "wo_scale":
        return l_bpr + lam * l_vbpr
    return (1.0 - lam) * l_bpr + lam * l_vbpr


def _loss_weights(lam: float, joint: bool, wo_scale: bool
                  ) -> tuple[float, float]:
    if not joint:
        return 1.0, 0.0
    if wo_scale:
        return 1.0, lam
    return 1.0 - lam, lam


def _virtual_entries(users: np.ndarray, virtual: VirtualTripletSet,
                     per_distinct_user: bool) -> tuple[list[int], np.ndarray]:
    """Distinct contributing users and their per-entry multiplicities."""
    counts: dict[int, int] = {}
    for u in users:
        u = int(u)
        if u in virtual.positives and len(virtual.positives[u]) > 0:
            counts[u] = counts.get(u, 0) + 1
    uniq = sorted(counts)
    mult = np.ones(len(uniq)) if per_distinct_user else np.array(
        [counts[u] for u in uniq], dtype=float)
    return uniq, mult


def backward(batch: TripletBatch, virtual: VirtualTripletSet | None,
             reps: Representations, prop: Propagator, *,
             lam: float, joint: bool, num_layers: int,
             wo_aggr: bool = False, wo_scale: bool = False,
             score_mode: str = "per_modality", readout_mode: str = "sum",
             per_distinct_user: bool = False, with_grads: bool = True):
    """Batch losses and gradients w.r.t. every embedding table.

    Returns ``(LossReport, grads)`` where ``grads[modality]`` holds
    ``{"user": array, "item": array}``; grads is None when ``with_grads``
    is false. Only tables reachable from the batch vertices (and the
    virtual groups) through the propagation neighborhoods receive nonzero
    gradient. d(-log sigmoid(g))/dg = -(1 - sigmoid(g)).
    """
    w_bpr, w_v = _loss_weights(lam, joint, wo_scale)
    num_users = reps.num_users
    batch_size = len(batch)
    users = batch.users
    pos = batch.pos_items + num_users
    neg = batch.neg_items + num_users

    grads_final = ({m: np.zeros_like(f) for m, f in reps.finals.items()}
                   if with_grads else None)
    grad_fused = np.zeros_like(reps.fused) if with_grads else None

    # Real-triplet branch.
    if score_mode == "per_modality":
        gaps = np.zeros(batch_size)
        for m, f in reps.finals.items():
            gaps += np.einsum("bd,bd->b", f[users], f[pos] - f[neg])
    else:
        z = reps.fused
        gaps = np.einsum("bd,bd->b", z[users], z[pos] - z[neg])
    l_bpr = float(np.mean(softplus(-gaps)))
    if with_grads and w_bpr != 0.0:
        coef = (w_bpr / batch_size) * (expit(gaps) - 1.0)
        if score_mode == "per_modality":
            for m, f in reps.finals.items():
                g = grads_final[m]
                np.add.at(g, users, coef[:, None] * (f[pos] - f[neg]))
                np.add.at(g, pos, coef[:, None] * f[users])
                np.add.at(g, neg, -coef[:, None] * f[users])
        else:
            z = reps.fused
            np.add.at(grad_fused, users, coef[:, None] * (z[pos] - z[neg]))
            np.add.at(grad_fused, pos, coef[:, None] * z[users])
            np.add.at(grad_fused, neg, -coef[:, None] * z[users])

    # Virtual-triplet branch.
    l_vbpr = None
    if joint and virtual is not None:
        uniq, mult = _virtual_entries(users, virtual, per_distinct_user)
        total = float(mult.sum())
        if total > 0.0:
            z = reps.fused
            acc = 0.0
            for u, weight in zip(uniq, mult):
                p_idx = virtual.positives[u] + num_users
                n_idx = virtual.negatives[u] + num_users
                n_group = len(p_idx)
                if wo_aggr:
                    pair_gaps = (z[p_idx] - z[n_idx]) @ z[u]
                    acc += weight * float(np.mean(softplus(-pair_gaps)))
                    if with_grads and w_v != 0.0:
                        coef = (w_v * weight / (total * n_group)) * (
                            expit(pair_gaps) - 1.0)
                        grad_fused[u] += coef @ (z[p_idx] - z[n_idx])
                        np.add.at(grad_fused, p_idx, coef[:, None] * z[u])
                        np.add.at(grad_fused, n_idx, -coef[:, None] * z[u])
                else:
                    plus = z[p_idx].mean(axis=0)
                    minus = z[n_idx].mean(axis=0)
                    gap = float(z[u] @ (plus - minus))
                    acc += weight * float(softplus(-np.array([gap]))[0])
                    if with_grads and w_v != 0.0:
                        coef = (w_v * weight / total) * (expit(gap) - 1.0)
                        grad_fused[u] += coef * (plus - minus)
                        np.add.at(grad_fused, p_idx,
                                  np.full((n_group, 1), coef / n_group) * z[u])
                        np.add.at(grad_fused, n_idx,
                                  np.full((n_group, 1), -coef / n_group) * z[u])
            l_vbpr = acc / total

    if not joint:
        l_total = l_bpr
    elif l_vbpr is not None:
        l_total = combined_loss(l_bpr, l_vbpr,
                                lam, "wo_scale" if wo_scale else "default")
    else:
        # Joint batch without any virtual entry: the bpr weight still applies.
        l_total = w_bpr * l_bpr
    report = LossReport(l_bpr=l_bpr, l_vbpr=l_vbpr if joint else None,
                        l_total=l_total, epoch=-1)
    if not with_grads:
        return report, None

    # Fusion backward, then the shared propagation/readout transpose.
    if np.any(grad_fused):
        share = grad_fused / len(reps.mask)
        for m in reps.mask:
            grads_final[m] += share
    grads: dict[str, dict[str, np.ndarray]] = {}
    for m, g in grads_final.items():
        acc = g.copy()
        cur = g
        for _ in range(num_layers):
            cur = prop.apply(cur)
            acc += cur
        if readout_mode == "mean":
            acc /= num_layers + 1
        grads[m] = {"user": acc[:num_users], "item": acc[num_users:]}
    return report, grads


def batch_losses(batch: TripletBatch, virtual: VirtualTripletSet | None,
                 reps: Representations, *, lam: float, joint: bool,
                 wo_aggr: bool = False, wo_scale: bool = False,
                 score_mode: str = "per_modality",
                 per_distinct_user: bool = False) -> LossReport:
    """Loss values only, sharing the backward code path."""
    report, _ = backward(batch, virtual, reps, prop=None, lam=lam,
                         joint=joint, num_layers=0, wo_aggr=wo_aggr,
                         wo_scale=wo_scale, score_mode=score_mode,
                         per_distinct_user=per_distinct_user,
                         with_grads=False)
    return report


@dataclass
class OptimizerState:
    """Adam moments mirroring the embedding tables."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_state(cls, state, learning_rate: float,
                  weight_decay: float = 0.0) -> "OptimizerState":
        m = {key: np.zeros_like(t) for key, t in state.param_items()}
        v = {key: np.zeros_like(t) for key, t in state.param_items()}
        return cls(m=m, v=v, step=0, learning_rate=learning_rate,
                   weight_decay=weight_decay)


def adam_step(state, opt: OptimizerState,
              grads: dict[str, dict[str, np.ndarray]]) -> None:
    """One in-place Adam update with bias correction."""
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for key, param in state.param_items():
        role, modality = key.split(".", 1)
        g = grads[modality][role]
        if not np.all(np.isfinite(g)):
            raise MdvtError(f"non-finite gradient for table {key} "
                            f"at optimizer step {t}")
        if opt.weight_decay:
            g = g + opt.weight_decay * param
        m = opt.m[key]
        v = opt.v[key]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        param -= opt.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
