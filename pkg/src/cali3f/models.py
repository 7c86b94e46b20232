"""GMF, MLP and NeuMF scorers in plain numpy with hand-written backprop.

Parameters are kept in three blocks:

* ``user`` - user-embedding tables (one for GMF/MLP, two for NeuMF)
* ``item`` - item-embedding tables, keyed like ``user``
* ``dense`` - every non-embedding weight: MLP tower and output layer

Gradients for the embedding blocks are sparse (only rows a batch touches).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cali3f.data import ClientShard, sample_train_negatives
from cali3f.rng import as_rng

VARIANTS = ("gmf", "mlp", "neumf")
EMBED_INIT_HALF_WIDTH = 0.01
PROB_CLAMP = 1e-7
CHECKPOINT_VERSION = 1

Block = dict  # name -> ndarray


class StructureError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.05
    local_epochs: int = 2
    batch_size: int = 64
    embedding_dim: int = 8
    mlp_widths: tuple[int, ...] = (32, 16, 8)
    init_seed: int | None = None  # None: derived from the experiment seed
    neg_ratio: int = 4

    def __post_init__(self):
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")


def _embedding_names(variant: str) -> tuple[str, ...]:
    return {"gmf": ("gmf",), "mlp": ("mlp",), "neumf": ("gmf", "mlp")}[variant]


@dataclass
class ModelParams:
    variant: str
    dim: int
    mlp_widths: tuple[int, ...]
    user: Block
    item: Block
    dense: Block

    @property
    def num_users(self) -> int:
        return next(iter(self.user.values())).shape[0]

    @property
    def num_items(self) -> int:
        return next(iter(self.item.values())).shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.mlp_widths)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.variant,
            self.dim,
            self.mlp_widths,
            {k: v.copy() for k, v in self.user.items()},
            {k: v.copy() for k, v in self.item.items()},
            {k: v.copy() for k, v in self.dense.items()},
        )

    def with_dense(self, dense: Block) -> "ModelParams":
        """Shallow view sharing embeddings but swapping the non-embedding block."""
        check_same_structure(self.dense, dense)
        return ModelParams(self.variant, self.dim, self.mlp_widths, self.user, self.item, dense)

    def num_parameters(self) -> dict[str, int]:
        return {
            "user": sum(v.size for v in self.user.values()),
            "item": sum(v.size for v in self.item.values()),
            "dense": sum(v.size for v in self.dense.values()),
        }

    def user_representation(self) -> np.ndarray:
        """Per-user feature rows (NeuMF concatenates both tables)."""
        return np.concatenate([self.user[k] for k in sorted(self.user)], axis=1)


@dataclass
class SparseRows:
    """Row-sparse slice of an embedding table: sorted unique ``rows`` and their ``values``."""

    rows: np.ndarray
    values: np.ndarray

    def to_dense(self, num_rows: int) -> np.ndarray:
        out = np.zeros((num_rows, self.values.shape[1]))
        out[self.rows] = self.values
        return out

    def nonzero_rows(self) -> np.ndarray:
        return self.rows[np.any(self.values != 0, axis=1)]

    def scaled(self, factor: float) -> "SparseRows":
        return SparseRows(self.rows.copy(), self.values * factor)


@dataclass
class GradientBlocks:
    user: dict[str, SparseRows]
    item: dict[str, SparseRows]
    dense: Block

    @property
    def touched_items(self) -> set[int]:
        touched: set[int] = set()
        for rows in self.item.values():
            touched.update(rows.nonzero_rows().tolist())
        return touched

    @property
    def touched_users(self) -> set[int]:
        touched: set[int] = set()
        for rows in self.user.values():
            touched.update(rows.nonzero_rows().tolist())
        return touched

    def to_dense(self, like: ModelParams) -> ModelParams:
        """Materialise as a full-size parameter structure (mostly zeros)."""
        return ModelParams(
            like.variant,
            like.dim,
            like.mlp_widths,
            {k: self.user[k].to_dense(like.num_users) for k in like.user},
            {k: self.item[k].to_dense(like.num_items) for k in like.item},
            {k: v.copy() for k, v in self.dense.items()},
        )


@dataclass
class RoundDelta:
    """What one client reports after local training: pseudo-gradient plus bookkeeping.

    ``delta`` is ``initial - final`` for every trained parameter.
    ``new_user_rows`` / ``new_item_rows`` hold the trained values of touched rows.
    """

    user_id: int
    delta: GradientBlocks
    num_instances: int
    new_user_rows: dict[str, SparseRows] = field(default_factory=dict)
    new_item_rows: dict[str, SparseRows] = field(default_factory=dict)

    @property
    def touched_items(self) -> set[int]:
        return self.delta.touched_items


def _uniform(rng: np.random.Generator, limit: float, shape) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape)


def init_model(variant: str, num_users: int, num_items: int, config: TrainConfig, rng=None) -> ModelParams:
    """Fresh parameters; ``rng`` overrides ``config.init_seed`` (which defaults to 0)."""
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if num_users < 1 or num_items < 1:
        raise ValueError("num_users and num_items must be positive")
    if rng is None:
        rng = config.init_seed if config.init_seed is not None else 0
    rng = as_rng(rng)
    d = config.embedding_dim
    names = _embedding_names(variant)
    user = {k: _uniform(rng, EMBED_INIT_HALF_WIDTH, (num_users, d)) for k in names}
    item = {k: _uniform(rng, EMBED_INIT_HALF_WIDTH, (num_items, d)) for k in names}
    dense: Block = {}
    widths = config.mlp_widths if "mlp" in names else ()
    fan_in = 2 * d
    for layer, width in enumerate(widths):
        dense[f"W{layer}"] = _uniform(rng, np.sqrt(6.0 / fan_in), (fan_in, width))
        dense[f"b{layer}"] = np.zeros(width)
        fan_in = width
    out_in = (d if "gmf" in names else 0) + (widths[-1] if widths else 0)
    dense["out_w"] = _uniform(rng, np.sqrt(3.0 / out_in), (out_in,))
    dense["out_b"] = np.zeros(1)
    return ModelParams(variant, d, tuple(widths), user, item, dense)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward_cache(params: ModelParams, users: np.ndarray, items: np.ndarray):
    parts = []
    cache: dict = {}
    if "gmf" in params.user:
        pu, qi = params.user["gmf"][users], params.item["gmf"][items]
        cache["gmf"] = (pu, qi)
        parts.append(pu * qi)
    if "mlp" in params.user:
        x = np.concatenate([params.user["mlp"][users], params.item["mlp"][items]], axis=1)
        acts = [x]
        for layer in range(params.num_layers):
            pre = x @ params.dense[f"W{layer}"] + params.dense[f"b{layer}"]
            x = np.maximum(pre, 0.0)
            acts.append(x)
        cache["mlp"] = acts
        parts.append(x)
    fused = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
    logits = fused @ params.dense["out_w"] + params.dense["out_b"][0]
    return sigmoid(logits), fused, cache


def predict(params: ModelParams, users, items) -> np.ndarray:
    """Vectorised scores in (0, 1) for aligned user/item index arrays."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    users, items = np.broadcast_arrays(users, items)
    scores, _, _ = _forward_cache(params, users.ravel(), items.ravel())
    return scores.reshape(users.shape)


def forward(params: ModelParams, user_id: int, item_id: int) -> float:
    if not 0 <= user_id < params.num_users:
        raise IndexError(f"user id {user_id} out of range [0, {params.num_users})")
    if not 0 <= item_id < params.num_items:
        raise IndexError(f"item id {item_id} out of range [0, {params.num_items})")
    return float(predict(params, [user_id], [item_id])[0])


class _RowIndex:
    """Unique rows of a batch index vector, computed once and reused per table."""

    def __init__(self, idx: np.ndarray):
        first = idx[0]
        if np.all(idx == first):
            self.rows = idx[:1].copy()
            self.inverse = None
        else:
            self.rows, self.inverse = np.unique(idx, return_inverse=True)

    def scatter(self, grads: np.ndarray) -> SparseRows:
        if self.inverse is None:
            return SparseRows(self.rows, grads.sum(axis=0, keepdims=True))
        values = np.zeros((len(self.rows), grads.shape[1]))
        np.add.at(values, self.inverse, grads)
        return SparseRows(self.rows, values)


def loss_and_grad(params: ModelParams, users, items, labels) -> tuple[float, GradientBlocks]:
    """Mean clamped binary cross-entropy over a batch and its exact gradient."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    labels = np.asarray(labels, dtype=float)
    n = len(labels)
    if n == 0:
        raise ValueError("empty batch")
    scores, fused, cache = _forward_cache(params, users, items)
    clamped = np.clip(scores, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(labels * np.log(clamped) + (1.0 - labels) * np.log1p(-clamped))
    # d loss / d logit; zero where the clamp is active
    active = (scores > PROB_CLAMP) & (scores < 1.0 - PROB_CLAMP)
    dlogit = np.where(active, scores - labels, 0.0) / n

    dense: Block = {"out_w": fused.T @ dlogit, "out_b": np.array([dlogit.sum()])}
    dfused = np.outer(dlogit, params.dense["out_w"])
    user_idx, item_idx = _RowIndex(users), _RowIndex(items)
    user_g: dict[str, SparseRows] = {}
    item_g: dict[str, SparseRows] = {}
    d = params.dim
    offset = 0
    if "gmf" in cache:
        pu, qi = cache["gmf"]
        dg = dfused[:, :d]
        offset = d
        user_g["gmf"] = user_idx.scatter(dg * qi)
        item_g["gmf"] = item_idx.scatter(dg * pu)
    if "mlp" in cache:
        acts = cache["mlp"]
        dx = dfused[:, offset:]
        for layer in reversed(range(params.num_layers)):
            dpre = dx * (acts[layer + 1] > 0)
            dense[f"W{layer}"] = acts[layer].T @ dpre
            dense[f"b{layer}"] = dpre.sum(axis=0)
            dx = dpre @ params.dense[f"W{layer}"].T
        user_g["mlp"] = user_idx.scatter(dx[:, :d])
        item_g["mlp"] = item_idx.scatter(dx[:, d:])
    dense = {k: dense[k] for k in params.dense}
    return float(loss), GradientBlocks(user_g, item_g, dense)


def check_same_structure(a: Block, b: Block) -> None:
    if a.keys() != b.keys():
        raise StructureError(f"block keys differ: {sorted(a)} vs {sorted(b)}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise StructureError(f"shape mismatch for {k}: {np.shape(a[k])} vs {np.shape(b[k])}")


def _apply_inplace(params: ModelParams, grads: GradientBlocks, lr: float) -> None:
    for k, g in grads.user.items():
        params.user[k][g.rows] -= lr * g.values
    for k, g in grads.item.items():
        params.item[k][g.rows] -= lr * g.values
    for k, g in grads.dense.items():
        params.dense[k] -= lr * g


def _check_grad_structure(params: ModelParams, grads: GradientBlocks) -> None:
    check_same_structure(params.dense, grads.dense)
    for block, gblock, size in ((params.user, grads.user, params.num_users),
                                (params.item, grads.item, params.num_items)):
        if block.keys() != gblock.keys():
            raise StructureError(f"embedding tables differ: {sorted(block)} vs {sorted(gblock)}")
        for k, g in gblock.items():
            if g.values.shape[1:] != block[k].shape[1:] or (len(g.rows) and g.rows.max() >= size):
                raise StructureError(f"gradient rows for {k} do not fit the table")


def sgd_step(params: ModelParams, grads: GradientBlocks, lr: float) -> ModelParams:
    """Return ``params - lr * grads``; the input is left untouched."""
    _check_grad_structure(params, grads)
    out = params.copy()
    _apply_inplace(out, grads, lr)
    return out


def split_blocks(x):
    """Views on the user, item and dense blocks of params or gradients."""
    return x.user, x.item, x.dense


def merge_blocks(like: ModelParams, user: Block, item: Block, dense: Block) -> ModelParams:
    return ModelParams(like.variant, like.dim, like.mlp_widths, user, item, dense)


def training_examples(shard: ClientShard, num_items: int, neg_ratio: int, rng) -> tuple[np.ndarray, np.ndarray]:
    negatives = sample_train_negatives(shard, num_items, neg_ratio, rng)
    items = np.concatenate([shard.train_items, negatives]).astype(np.int64)
    labels = np.concatenate([np.ones(len(shard.train_items)), np.zeros(len(negatives))])
    return items, labels


class minibatches:
    """Endless shuffled mini-batches; negatives are redrawn at each epoch start."""

    def __init__(self, shard: ClientShard, num_items: int, neg_ratio: int, batch_size: int, rng):
        self.shard = shard
        self.num_items = num_items
        self.neg_ratio = neg_ratio
        self.batch_size = batch_size
        self.rng = as_rng(rng)
        n = len(shard.train_items) * (1 + neg_ratio)
        self.per_epoch = -(-n // batch_size)
        self._queue: list = []
        self.seen_items: set[int] = set()

    def __iter__(self):
        return self

    def __next__(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._queue:
            items, labels = training_examples(self.shard, self.num_items, self.neg_ratio, self.rng)
            order = self.rng.permutation(len(items))
            items, labels = items[order], labels[order]
            self.seen_items.update(items.tolist())
            self._queue = [(items[s:s + self.batch_size], labels[s:s + self.batch_size])
                           for s in range(0, len(items), self.batch_size)][::-1]
        return self._queue.pop()


def local_train(shard: ClientShard, params: ModelParams, config: TrainConfig, rng_seed) -> RoundDelta:
    """E epochs of mini-batch SGD on one client; negatives are redrawn every epoch."""
    if len(shard.train_items) == 0:
        raise ValueError(f"user {shard.user_id} has no training items")
    work = params.copy()
    u = shard.user_id
    batches = minibatches(shard, params.num_items, config.neg_ratio, config.batch_size, rng_seed)
    for _ in range(config.local_epochs * batches.per_epoch):
        items, labels = next(batches)
        _, grads = loss_and_grad(work, np.full(len(items), u, dtype=np.int64), items, labels)
        _apply_inplace(work, grads, config.lr)
    visited = np.array(sorted(batches.seen_items), dtype=np.int64)
    return _diff(u, params, work, np.array([u]), visited, len(shard.train_items) * (1 + config.neg_ratio))


def _diff(user_id: int, start: ModelParams, end: ModelParams, user_rows: np.ndarray,
          item_rows: np.ndarray, num_instances: int) -> RoundDelta:
    user_delta, item_delta, new_user, new_item = {}, {}, {}, {}
    for k in start.user:
        user_delta[k] = SparseRows(user_rows, start.user[k][user_rows] - end.user[k][user_rows])
        new_user[k] = SparseRows(user_rows, end.user[k][user_rows].copy())
    for k in start.item:
        diff = start.item[k][item_rows] - end.item[k][item_rows]
        keep = np.any(diff != 0, axis=1)
        item_delta[k] = SparseRows(item_rows[keep], diff[keep])
        new_item[k] = SparseRows(item_rows[keep], end.item[k][item_rows[keep]].copy())
    dense = {k: start.dense[k] - end.dense[k] for k in start.dense}
    return RoundDelta(
        user_id=user_id,
        delta=GradientBlocks(user_delta, item_delta, dense),
        num_instances=num_instances,
        new_user_rows=new_user,
        new_item_rows=new_item,
    )


def flatten(block: Block) -> np.ndarray:
    return np.concatenate([np.ravel(block[k]) for k in block])


def unflatten(flat: np.ndarray, like: Block) -> Block:
    out, pos = {}, 0
    for k, v in like.items():
        size = np.size(v)
        out[k] = flat[pos:pos + size].reshape(np.shape(v)).copy()
        pos += size
    if pos != len(flat):
        raise StructureError(f"flat vector has {len(flat)} entries, block needs {pos}")
    return out


def _pack(params: ModelParams, prefix: str = "") -> dict[str, np.ndarray]:
    arrays = {}
    for block_name, block in (("user", params.user), ("item", params.item), ("dense", params.dense)):
        for k, v in block.items():
            arrays[f"{prefix}{block_name}/{k}"] = v
    return arrays


def params_meta(params: ModelParams) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "variant": params.variant,
        "dim": params.dim,
        "mlp_widths": list(params.mlp_widths),
        "user": list(params.user),
        "item": list(params.item),
        "dense": list(params.dense),
    }


def _unpack(arrays, meta: dict, prefix: str = "") -> ModelParams:
    if meta.get("version") != CHECKPOINT_VERSION:
        raise StructureError(f"unsupported checkpoint version {meta.get('version')}")

    def block(name):
        return {k: np.array(arrays[f"{prefix}{name}/{k}"]) for k in meta[name]}

    return ModelParams(meta["variant"], int(meta["dim"]), tuple(meta["mlp_widths"]),
                       block("user"), block("item"), block("dense"))


def save_params(path, params: ModelParams) -> None:
    """Checkpoint as ``.npz``: JSON header plus one array per parameter table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(params_meta(params))), **_pack(params))
    path.write_bytes(buf.getvalue())


def load_params(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        return _unpack(z, meta)
