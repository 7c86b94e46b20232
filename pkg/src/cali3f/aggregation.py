"""Server-side update rules.

Embedding rules (delegate overwrite, discounted subordinate broadcast,
magnitude-weighted item averaging), the calibrated cluster update, FedAvg,
and the Ditto local objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from cali3f.clustering import SamplingPlan
from cali3f.data import ClientShard
from cali3f.models import (
    Block,
    GradientBlocks,
    ModelParams,
    RoundDelta,
    _apply_inplace,
    flatten,
    loss_and_grad,
    minibatches,
    unflatten,
)
from cali3f.rng import as_rng

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    pass


@dataclass
class CaliConfig:
    phi: float = 0.1
    lambda0: float = 0.5
    decay: float = 1.0
    server_lr: float = 1.0
    epsilon_norm: float = 1e-12
    item_weighting: str = "component"

    def __post_init__(self):
        if self.phi < 0:
            raise ValueError("phi must be >= 0")
        if not 0 <= self.lambda0 <= 1:
            raise ValueError("lambda0 must lie in [0, 1]")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.server_lr <= 0:
            raise ValueError("server_lr must be positive")
        if self.item_weighting not in ("component", "row"):
            raise ValueError("item_weighting must be 'component' or 'row'")


@dataclass
class DittoConfig:
    reg: float = 0.1
    lr: float | None = None  # None: reuse the client learning rate
    local_steps: int | None = None  # None: same epochs as the global update

    def __post_init__(self):
        if self.reg < 0:
            raise ValueError("reg must be >= 0")


def _sorted(deltas: Iterable[RoundDelta]) -> list[RoundDelta]:
    return sorted(deltas, key=lambda d: d.user_id)


def discount_schedule(lambda0: float, decay: float, t: int) -> float:
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    return lambda0 * decay ** (t - 1)


def update_delegate_embeddings(user_block: Block, deltas: Sequence[RoundDelta]) -> Block:
    """Delegates' user rows take the values they trained locally."""
    out = {k: v.copy() for k, v in user_block.items()}
    claimed: set[int] = set()
    for d in _sorted(deltas):
        rows = set()
        for k in out:
            if d.new_user_rows:
                trained = d.new_user_rows[k]
                out[k][trained.rows] = trained.values
                rows.update(trained.rows.tolist())
            else:
                change = d.delta.user[k]
                out[k][change.rows] = user_block[k][change.rows] - change.values
                rows.update(change.rows.tolist())
        clash = rows & claimed
        if clash:
            raise ProtocolError(f"user rows {sorted(clash)} reported by more than one delegate")
        claimed |= rows
    return out


def user_row_changes(deltas: Sequence[RoundDelta], user_block: Block) -> dict[int, Block]:
    """Map delegate id -> (new - old) change of its own user row, per table."""
    out = {}
    for d in deltas:
        out[d.user_id] = {k: -d.delta.user[k].values[d.delta.user[k].rows == d.user_id][0]
                          for k in user_block}
    return out


def update_subordinate_embeddings(user_block: Block, plan: SamplingPlan,
                                  changes_by_cluster: dict[int, list[Block]], discount: float) -> Block:
    """Shift each subordinate row by ``discount`` times its cluster's mean delegate change."""
    if discount < 0:
        raise ValueError("discount must be >= 0")
    out = {k: v.copy() for k, v in user_block.items()}
    for p, subs in plan.subordinates.items():
        if len(subs) == 0:
            continue
        changes = changes_by_cluster.get(p, [])
        if not changes:
            log.warning("cluster %d has no delegate updates; subordinates left unchanged", p)
            continue
        for k in out:
            mean = np.mean([c[k] for c in changes], axis=0)
            out[k][subs] += discount * mean
    return out


def aggregate_item_embeddings(item_block: Block, deltas: Sequence[RoundDelta],
                              weighting: str = "component") -> Block:
    """Average delegates' trained item rows, each weighted by how far it moved.

    Components nobody moved keep their previous value.
    """
    out = {}
    for k, table in item_block.items():
        num = np.zeros_like(table)
        den = np.zeros_like(table)
        # components with a single contributor take its value exactly (no x*w/w rounding)
        contributors = np.zeros(table.shape, dtype=np.int64)
        last = np.zeros_like(table)
        for d in _sorted(deltas):
            change = d.delta.item.get(k)
            if change is None or len(change.rows) == 0:
                continue
            trained = d.new_item_rows[k].values if d.new_item_rows else table[change.rows] - change.values
            theta = np.abs(change.values)
            if weighting == "row":
                theta = np.repeat(np.linalg.norm(change.values, axis=1, keepdims=True), table.shape[1], axis=1)
            np.add.at(num, change.rows, theta * trained)
            np.add.at(den, change.rows, theta)
            np.add.at(contributors, change.rows, (theta > 0).astype(np.int64))
            last[change.rows] = np.where(theta > 0, trained, last[change.rows])
        moved = den > 0
        new = table.copy()
        new[moved] = num[moved] / den[moved]
        single = moved & (contributors == 1)
        new[single] = last[single]
        out[k] = new
    return out


def weighted_dense_mean(deltas: Sequence[RoundDelta]) -> Block:
    """Instance-weighted mean of the dense-block deltas, summed in user-id order."""
    deltas = _sorted(deltas)
    if not deltas:
        raise ValueError("no deltas to average")
    total = float(sum(d.num_instances for d in deltas))
    out = None
    for d in deltas:
        w = d.num_instances / total
        if out is None:
            out = {k: w * v for k, v in d.delta.dense.items()}
        else:
            for k, v in d.delta.dense.items():
                out[k] = out[k] + w * v
    return out


def cali_up(v_p: Block, w: Block, grad_p: Block, phi: float, lr: float,
            epsilon_norm: float = 1e-12) -> Block:
    """Cluster step with a pull toward the global block.

    The pull has norm ``phi * |grad_p|`` and points from ``w`` to ``v_p``'s
    opposite; it is dropped when the two blocks (nearly) coincide.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if phi < 0:
        raise ValueError("phi must be >= 0")
    gflat = flatten(grad_p)
    gnorm = float(np.linalg.norm(gflat))
    if not np.isfinite(gnorm):
        raise FloatingPointError("non-finite cluster gradient")
    gap = flatten(v_p) - flatten(w)
    gap_norm = float(np.linalg.norm(gap))
    if phi == 0 or gap_norm < epsilon_norm:
        return {k: v_p[k] - lr * grad_p[k] for k in v_p}
    pull = unflatten(phi * gnorm * gap / gap_norm, v_p)
    return {k: v_p[k] - lr * (grad_p[k] + pull[k]) for k in v_p}


def global_nonembedding_update(w_dense: Block, deltas: Sequence[RoundDelta], server_lr: float) -> Block:
    step = weighted_dense_mean(deltas)
    return {k: w_dense[k] - server_lr * step[k] for k in w_dense}


def _weighted_sparse(block: Block, deltas: list[RoundDelta], attr: str, total: float) -> Block:
    acc = {k: np.zeros_like(v) for k, v in block.items()}
    for d in deltas:
        w = d.num_instances / total
        for k, rows in getattr(d.delta, attr).items():
            np.add.at(acc[k], rows.rows, w * rows.values)
    return acc


def fedavg_aggregate(w: ModelParams, deltas: Sequence[RoundDelta], server_lr: float) -> ModelParams:
    """``w - server_lr * sum_k (n_k / n) * delta_k`` on every block."""
    deltas = _sorted(deltas)
    if not deltas:
        raise ValueError("no deltas to aggregate")
    total = float(sum(d.num_instances for d in deltas))
    user_step = _weighted_sparse(w.user, deltas, "user", total)
    item_step = _weighted_sparse(w.item, deltas, "item", total)
    return ModelParams(
        w.variant, w.dim, w.mlp_widths,
        {k: w.user[k] - server_lr * user_step[k] for k in w.user},
        {k: w.item[k] - server_lr * item_step[k] for k in w.item},
        global_nonembedding_update(w.dense, deltas, server_lr),
    )


def ditto_step(v: ModelParams, w_star: ModelParams, grads: GradientBlocks, lr: float, reg: float) -> ModelParams:
    """One step on ``F_k(v) + reg/2 * |v - w*|^2`` given the data gradient at ``v``."""
    out = v.copy()
    _ditto_inplace(out, w_star, grads, lr, reg)
    return out


def _ditto_inplace(v: ModelParams, w_star: ModelParams, grads: GradientBlocks, lr: float, reg: float) -> None:
    if reg:
        pull = [(blk, k, reg * (blk[k] - star[k]))
                for blk, star in ((v.user, w_star.user), (v.item, w_star.item), (v.dense, w_star.dense))
                for k in blk]
    _apply_inplace(v, grads, lr)
    if reg:
        for blk, k, p in pull:
            blk[k] -= lr * p


def ditto_local_step(v_k: ModelParams, w_star: ModelParams, shard: ClientShard, config: DittoConfig,
                     rng_seed, *, lr: float, local_epochs: int, batch_size: int, neg_ratio: int) -> ModelParams:
    """Run the personalised objective on one client's data and return the new ``v_k``."""
    rng = as_rng(rng_seed)
    step_lr = lr if config.lr is None else config.lr
    v = v_k.copy()
    u = shard.user_id
    batches = minibatches(shard, v.num_items, neg_ratio, batch_size, rng)
    if config.local_steps is None:
        steps = local_epochs * batches.per_epoch
    else:
        steps = config.local_steps
    for _ in range(steps):
        items, labels = next(batches)
        _, grads = loss_and_grad(v, np.full(len(items), u), items, labels)
        _ditto_inplace(v, w_star, grads, step_lr, config.reg)
    return v
