"""Leave-one-out ranking metrics, per-client fairness and convergence speed."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from cali3f.data import ClientShard
from cali3f.models import ModelParams, predict

TOP_K = 10
METRICS = ("mean_hr", "mean_ndcg", "std_ndcg", "std_hr")


def rank_of_first(scores, items) -> int:
    """1-based rank of ``items[0]`` when sorting by score, ties to the lower item id."""
    scores = np.asarray(scores)
    items = np.asarray(items)
    target, target_item = scores[0], items[0]
    ahead = (scores > target) | ((scores == target) & (items < target_item))
    return int(ahead.sum()) + 1


def rank_candidates(model: ModelParams, user: int, candidates) -> int:
    """Rank of ``candidates[0]`` (the held-out item) among all candidates."""
    candidates = np.asarray(candidates, dtype=np.int64)
    return rank_of_first(predict(model, user, candidates), candidates)


def hr_at_k(rank: int, k: int = TOP_K) -> int:
    return 1 if rank <= k else 0


def ndcg_at_k(rank: int, k: int = TOP_K) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def fairness_std(values) -> float:
    """Population standard deviation of per-client metric values."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("need at least one value")
    if np.all(values == values.flat[0]):
        return 0.0
    return float(np.std(values))


@dataclass
class Evaluation:
    mean_hr: float
    mean_ndcg: float
    std_ndcg: float
    std_hr: float
    users: np.ndarray = field(repr=False, default=None)
    ranks: np.ndarray = field(repr=False, default=None)

    @property
    def per_client_ndcg(self) -> np.ndarray:
        return np.array([ndcg_at_k(r) for r in self.ranks])

    def summary(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def _group_by_model(models: Mapping[int, ModelParams], users: Sequence[int]):
    groups: dict[int, tuple[ModelParams, list[int]]] = {}
    for u in users:
        m = models[u]
        groups.setdefault(id(m), (m, []))[1].append(u)
    return groups.values()


def client_ranks(models: Mapping[int, ModelParams], shards: Sequence[ClientShard]) -> tuple[np.ndarray, np.ndarray]:
    """Rank of the held-out item for every evaluable shard, in user order."""
    by_user = {s.user_id: s for s in shards if s.evaluable}
    users = sorted(by_user)
    ranks = {}
    for model, members in _group_by_model(models, users):
        cands = np.stack([by_user[u].candidates() for u in members])
        scores = predict(model, np.asarray(members)[:, None], cands)
        for row, u in enumerate(members):
            ranks[u] = rank_of_first(scores[row], cands[row])
    return np.array(users, dtype=np.int64), np.array([ranks[u] for u in users], dtype=np.int64)


def evaluate_all(models: Mapping[int, ModelParams], shards: Sequence[ClientShard]) -> Evaluation:
    users, ranks = client_ranks(models, shards)
    if len(users) == 0:
        raise ValueError("no evaluable clients")
    hr = np.array([hr_at_k(r) for r in ranks], dtype=float)
    ndcg = np.array([ndcg_at_k(r) for r in ranks])
    return Evaluation(
        mean_hr=float(hr.mean()),
        mean_ndcg=float(ndcg.mean()),
        std_ndcg=fairness_std(ndcg),
        std_hr=fairness_std(hr),
        users=users,
        ranks=ranks,
    )


@dataclass
class RoundRecord:
    round: int
    mean_hr: float
    mean_ndcg: float
    std_ndcg: float
    std_hr: float


@dataclass
class MetricHistory:
    strategy: str
    seed: int
    records: list[RoundRecord] = field(default_factory=list)
    initial: RoundRecord | None = None
    per_client_ndcg: list[float] | None = None
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def append(self, round_: int, ev: Evaluation) -> None:
        self.records.append(RoundRecord(round_, **ev.summary()))

    def series(self, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.records])

    def rounds(self) -> np.ndarray:
        return np.array([r.round for r in self.records])

    def best(self, metric: str) -> float:
        return float(self.series(metric).max())

    def final(self) -> RoundRecord:
        return self.records[-1]

    def record_line(self, r: RoundRecord) -> str:
        rec = {"round": r.round, "strategy": self.strategy, "seed": self.seed, **asdict(r),
               "config_hash": self.config_hash}
        return json.dumps(rec, sort_keys=True)

    def to_jsonl(self) -> str:
        """One record per evaluated round; the round-0 baseline comes first when known."""
        recs = ([self.initial] if self.initial is not None else []) + self.records
        return "".join(self.record_line(r) + "\n" for r in recs)

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricHistory":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not recs:
            raise ValueError("empty metric file")
        hist = cls(strategy=recs[0]["strategy"], seed=recs[0]["seed"], config_hash=recs[0].get("config_hash", ""))
        for r in recs:
            rec = RoundRecord(r["round"], r["mean_hr"], r["mean_ndcg"], r["std_ndcg"], r["std_hr"])
            if rec.round == 0:
                hist.initial = rec
            else:
                hist.records.append(rec)
        return hist


def rounds_to_threshold(history, metric: str = "mean_ndcg", frac: float = 0.05) -> int:
    """First round whose value is within ``frac`` of the run's own best.

    ``history`` is a MetricHistory or a plain sequence (rounds numbered from 1).
    """
    if isinstance(history, MetricHistory):
        values, rounds = history.series(metric), history.rounds()
    else:
        values = np.asarray(history, dtype=float)
        rounds = np.arange(1, len(values) + 1)
    if len(values) == 0:
        raise ValueError("empty history")
    threshold = (1.0 - frac) * values.max()
    return int(rounds[np.argmax(values >= threshold)])
