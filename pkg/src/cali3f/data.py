"""MovieLens-style interaction ingest, leave-one-out splitting and negative sampling.

Every user becomes one simulated client.  Raw ratings are discarded: any
observed (user, item) pair is an implicit positive.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from cali3f.rng import as_rng, stream

NUM_EVAL_NEGATIVES = 100

SEPARATORS = {"tab": "\t", "double-colon": "::"}


class DataError(ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, path, lineno: int, line: str, reason: str):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}: {line!r}")


class InsufficientNegativesError(DataError):
    def __init__(self, user_id: int, available: int, needed: int):
        self.user_id = user_id
        super().__init__(
            f"user {user_id} has only {available} non-interacted items, need {needed}"
        )


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    timestamp: int


@dataclass(frozen=True)
class InteractionTable:
    """Deduplicated implicit interactions over dense user/item indices.

    ``user_ids[k]`` / ``item_ids[k]`` hold the original id of dense index ``k``.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_interactions(self) -> int:
        return len(self.users)

    def __len__(self) -> int:
        return self.num_interactions

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, t in zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist()):
            yield Interaction(u, i, t)

    @property
    def sparsity(self) -> float:
        if self.num_users == 0 or self.num_items == 0:
            return 0.0
        return 1.0 - self.num_interactions / (self.num_users * self.num_items)

    def original_pairs(self) -> list[tuple[str, str]]:
        return list(zip(self.user_ids[self.users].tolist(), self.item_ids[self.items].tolist()))

    def items_of(self, user: int) -> np.ndarray:
        return self.items[self.users == user]

    def stats(self) -> dict:
        return {
            "interactions": self.num_interactions,
            "users": self.num_users,
            "items": self.num_items,
            "sparsity": self.sparsity,
        }

    @classmethod
    def from_records(cls, records: Sequence[tuple]) -> "InteractionTable":
        """Build a table from (user, item, timestamp) records with raw ids.

        Duplicated pairs keep their latest timestamp; ids are densified in
        first-appearance order.
        """
        user_index: dict = {}
        item_index: dict = {}
        latest: dict[tuple[int, int], int] = {}
        for user, item, ts in records:
            u = user_index.setdefault(user, len(user_index))
            i = item_index.setdefault(item, len(item_index))
            key = (u, i)
            ts = int(ts)
            prev = latest.get(key)
            if prev is None or ts > prev:
                latest[key] = ts
        n = len(latest)
        users = np.fromiter((k[0] for k in latest), dtype=np.int64, count=n)
        items = np.fromiter((k[1] for k in latest), dtype=np.int64, count=n)
        stamps = np.fromiter(latest.values(), dtype=np.int64, count=n)
        return cls(
            users=users,
            items=items,
            timestamps=stamps,
            user_ids=np.array(list(user_index), dtype=object),
            item_ids=np.array(list(item_index), dtype=object),
        )


@dataclass
class ClientShard:
    """One client's private data: train positives, held-out item and eval negatives."""

    user_id: int
    train_items: np.ndarray
    test_item: int | None = None
    eval_negatives: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    num_instances: int = 0

    @property
    def evaluable(self) -> bool:
        return self.test_item is not None

    @property
    def interacted(self) -> np.ndarray:
        if self.test_item is None:
            return self.train_items
        return np.append(self.train_items, self.test_item)

    def candidates(self) -> np.ndarray:
        """Test item followed by its eval negatives."""
        if self.test_item is None:
            raise DataError(f"user {self.user_id} has no held-out item")
        return np.concatenate([[self.test_item], self.eval_negatives]).astype(np.int64)

    def to_record(self) -> dict:
        return {
            "user_id": int(self.user_id),
            "train_items": [int(i) for i in self.train_items],
            "test_item": None if self.test_item is None else int(self.test_item),
            "eval_negatives": [int(i) for i in self.eval_negatives],
            "num_instances": int(self.num_instances),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ClientShard":
        return cls(
            user_id=int(rec["user_id"]),
            train_items=np.asarray(rec["train_items"], dtype=np.int64),
            test_item=rec["test_item"],
            eval_negatives=np.asarray(rec["eval_negatives"], dtype=np.int64),
            num_instances=int(rec["num_instances"]),
        )


def parse_ratings(path, format: str = "tab") -> InteractionTable:
    """Read a ratings file (``user item rating timestamp`` per line).

    ``format`` is ``"tab"`` (ML-100K ``u.data``) or ``"double-colon"``
    (ML-1M ``ratings.dat``).
    """
    try:
        sep = SEPARATORS[format]
    except KeyError:
        raise DataError(f"unknown format {format!r}; expected one of {sorted(SEPARATORS)}") from None
    records = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(sep)
            if len(parts) < 4:
                raise ParseError(path, lineno, line, f"expected 4 fields, got {len(parts)}")
            user, item, _rating, ts = (p.strip() for p in parts[:4])
            try:
                records.append((int(user), int(item), int(float(ts))))
            except ValueError:
                raise ParseError(path, lineno, line, "non-numeric field") from None
    if not records:
        raise EmptyDatasetError(f"{path}: no interactions")
    return InteractionTable.from_records(records)


def _reindex(table: InteractionTable, keep: np.ndarray) -> InteractionTable:
    users, items, stamps = table.users[keep], table.items[keep], table.timestamps[keep]
    # np.unique sorts by old dense index, which preserves first-appearance order
    kept_users, new_users = np.unique(users, return_inverse=True)
    kept_items, new_items = np.unique(items, return_inverse=True)
    return InteractionTable(
        users=new_users.astype(np.int64),
        items=new_items.astype(np.int64),
        timestamps=stamps.copy(),
        user_ids=table.user_ids[kept_users],
        item_ids=table.item_ids[kept_items],
    )


def filter_min_interactions(table: InteractionTable, threshold: int) -> InteractionTable:
    if threshold < 0:
        raise DataError("threshold must be >= 0")
    if threshold == 0:
        return table
    counts = np.bincount(table.users, minlength=table.num_users)
    keep = counts[table.users] >= threshold
    return _reindex(table, keep)


def leave_one_out_split(table: InteractionTable, neg_ratio: int = 4) -> list[ClientShard]:
    """Hold out each user's latest interaction (ties: larger item id).

    Users with a single interaction keep it for training and get no test item.
    """
    if table.num_interactions == 0:
        raise EmptyDatasetError("cannot split an empty table")
    order = np.argsort(table.users, kind="stable")
    bounds = np.searchsorted(table.users[order], np.arange(table.num_users + 1))
    shards = []
    for u in range(table.num_users):
        idx = order[bounds[u]:bounds[u + 1]]
        items = table.items[idx]
        if len(idx) < 2:
            shards.append(ClientShard(u, items.copy(), None, num_instances=len(items) * (1 + neg_ratio)))
            continue
        stamps = table.timestamps[idx]
        last = np.lexsort((_tie_keys(table.item_ids[items]), stamps))[-1]
        train = np.delete(items, last)
        shards.append(
            ClientShard(u, train, int(items[last]), num_instances=len(train) * (1 + neg_ratio))
        )
    return shards


def _tie_keys(original_ids) -> np.ndarray:
    """Sort keys for timestamp ties: original ids if they are mutually comparable."""
    try:
        return np.argsort(np.argsort(np.asarray(original_ids.tolist()), kind="stable"), kind="stable")
    except TypeError:
        return np.argsort(np.argsort(original_ids.astype(str), kind="stable"), kind="stable")


def sample_eval_negatives(shard: ClientShard, table: InteractionTable, rng_seed) -> ClientShard:
    """Attach 100 distinct never-interacted items, drawn without replacement."""
    rng = as_rng(rng_seed)
    seen = np.zeros(table.num_items, dtype=bool)
    seen[table.items_of(shard.user_id)] = True
    seen[shard.interacted] = True
    eligible = np.flatnonzero(~seen)
    if len(eligible) < NUM_EVAL_NEGATIVES:
        raise InsufficientNegativesError(shard.user_id, len(eligible), NUM_EVAL_NEGATIVES)
    negatives = rng.choice(eligible, size=NUM_EVAL_NEGATIVES, replace=False)
    return ClientShard(
        user_id=shard.user_id,
        train_items=shard.train_items,
        test_item=shard.test_item,
        eval_negatives=np.asarray(negatives, dtype=np.int64),
        num_instances=shard.num_instances,
    )


def sample_train_negatives(shard: ClientShard, num_items: int, ratio: int, rng_seed) -> np.ndarray:
    """Draw ``ratio`` non-interacted items per train positive (label 0).

    Draws are independent, so an item may repeat across positives.
    """
    if ratio < 0:
        raise DataError("ratio must be >= 0")
    need = len(shard.train_items) * ratio
    if need == 0:
        return np.empty(0, dtype=np.int64)
    rng = as_rng(rng_seed)
    blocked = np.zeros(num_items, dtype=bool)
    blocked[shard.interacted] = True
    if blocked.all():
        raise InsufficientNegativesError(shard.user_id, 0, 1)
    out = np.empty(0, dtype=np.int64)
    while len(out) < need:
        draw = rng.integers(0, num_items, size=2 * (need - len(out)) + 8)
        out = np.concatenate([out, draw[~blocked[draw]]])
    return out[:need]


def build_shards(
    table: InteractionTable, seed: int, neg_ratio: int = 4
) -> list[ClientShard]:
    """Split and attach eval negatives, one independent stream per user."""
    shards = leave_one_out_split(table, neg_ratio=neg_ratio)
    out = []
    for shard in shards:
        if shard.evaluable:
            shard = sample_eval_negatives(shard, table, stream(seed, "eval_negatives", shard.user_id))
        out.append(shard)
    return out


def table_digest(table: InteractionTable) -> str:
    h = hashlib.sha256()
    for arr in (table.users, table.items, table.timestamps):
        h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def save_shards(path, shards: Sequence[ClientShard], meta: dict) -> None:
    """Write a JSON-lines cache: a header record then one record per shard."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "header", **meta}, sort_keys=True) + "\n")
        for shard in shards:
            fh.write(json.dumps({"kind": "shard", **shard.to_record()}, sort_keys=True) + "\n")


def load_shards(path) -> tuple[list[ClientShard], dict]:
    meta: dict = {}
    shards = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "header":
                meta = rec
            else:
                shards.append(ClientShard.from_record(rec))
    return shards, meta
