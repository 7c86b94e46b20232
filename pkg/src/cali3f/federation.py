"""Round-by-round simulation of the clustered, calibrated protocol and its baselines.

Client data lives only in :class:`Client` objects.  The server-side
:class:`FederationState` holds parameters, cluster bookkeeping and per-client
instance counts, nothing else.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from cali3f import aggregation as agg
from cali3f.clustering import ClusterAssignment, SamplingPlan, clus_avg, clus_samp, kmeans
from cali3f.data import ClientShard
from cali3f.evaluation import Evaluation, MetricHistory, RoundRecord, evaluate_all
from cali3f.models import Block, ModelParams, RoundDelta, TrainConfig, init_model, local_train
from cali3f.rng import stream

log = logging.getLogger(__name__)

STRATEGIES = ("cali3f", "fedavg", "ditto")


@dataclass
class ClusterConfig:
    n_clusters: int = 30
    delegates: int = 30
    recluster_every: int = 1
    personalize: bool = True
    clus_avg: bool = True

    def __post_init__(self):
        if self.n_clusters < 1 or self.delegates < 1:
            raise ValueError("n_clusters and delegates must be >= 1")
        if self.recluster_every < 1:
            raise ValueError("recluster_every must be >= 1")


class Client:
    """A simulated device; its shard never leaves this object."""

    def __init__(self, shard: ClientShard, num_items: int):
        self._shard = shard
        self.user_id = shard.user_id
        self.num_items = num_items

    def num_instances(self, neg_ratio: int) -> int:
        return len(self._shard.train_items) * (1 + neg_ratio)

    def can_train(self) -> bool:
        return len(self._shard.train_items) > 0

    def local_update(self, params: ModelParams, config: TrainConfig, seed) -> RoundDelta:
        return local_train(self._shard, params, config, seed)

    def ditto_update(self, v_k: ModelParams, w_star: ModelParams, ditto: agg.DittoConfig,
                     config: TrainConfig, seed) -> ModelParams:
        return agg.ditto_local_step(v_k, w_star, self._shard, ditto, seed, lr=config.lr,
                                    local_epochs=config.local_epochs, batch_size=config.batch_size,
                                    neg_ratio=config.neg_ratio)


@dataclass
class FederationState:
    round: int
    global_model: ModelParams
    cluster_models: dict[int, Block] = field(default_factory=dict)
    assignment: ClusterAssignment | None = None
    plan: SamplingPlan | None = None
    local_models: dict[int, ModelParams] = field(default_factory=dict)
    initial_model: ModelParams | None = None
    instance_counts: np.ndarray | None = None


class Federation:
    """Owns the clients and the configs; advances a :class:`FederationState`."""

    def __init__(self, shards: Sequence[ClientShard], num_items: int, *, variant: str = "neumf",
                 strategy: str = "cali3f", train: TrainConfig | None = None,
                 cali: agg.CaliConfig | None = None, cluster: ClusterConfig | None = None,
                 ditto: agg.DittoConfig | None = None, seed: int = 0):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        self.shards = list(shards)
        self.clients = [Client(s, num_items) for s in self.shards]
        if [c.user_id for c in self.clients] != list(range(len(self.clients))):
            raise ValueError("shards must cover users 0..K-1 in order")
        self.num_items = num_items
        self.variant = variant
        self.strategy = strategy
        self.train = train or TrainConfig()
        self.cali = cali or agg.CaliConfig()
        self.cluster = cluster or ClusterConfig()
        self.ditto = ditto or agg.DittoConfig()
        self.seed = seed
        k = len(self.clients)
        if self.cluster.delegates > k:
            raise ValueError(f"cannot sample {self.cluster.delegates} delegates from {k} clients")
        if strategy == "cali3f" and self.cluster.n_clusters > k:
            raise ValueError(f"cannot form {self.cluster.n_clusters} clusters from {k} clients")

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def init_state(self) -> FederationState:
        """Round-0 state; the initial model comes from ``train.init_seed`` or the seed's init stream."""
        init = self.train.init_seed
        if init is None:
            init = stream(self.seed, "init")
        w0 = init_model(self.variant, self.num_clients, self.num_items, self.train, rng=init)
        counts = np.array([c.num_instances(self.train.neg_ratio) for c in self.clients])
        state = FederationState(round=0, global_model=w0, initial_model=w0.copy(), instance_counts=counts)
        if self.strategy == "cali3f":
            assignment = kmeans(w0.user_representation(), self.cluster.n_clusters, stream(self.seed, "kmeans", 0))
            state.assignment = assignment
            state.plan = clus_samp(assignment, self.cluster.delegates, stream(self.seed, "sampling", 0))
            state.cluster_models = {p: _copy_block(w0.dense) for p in range(assignment.num_clusters)}
        return state

    def _train_seed(self, t: int, user: int):
        return stream(self.seed, "negatives", t, user)

    def _collect(self, params_for, users, t: int) -> list[RoundDelta]:
        out = []
        for u in sorted(int(x) for x in users):
            client = self.clients[u]
            if client.can_train():
                out.append(client.local_update(params_for(u), self.train, self._train_seed(t, u)))
        return out

    def run_round(self, state: FederationState) -> FederationState:
        try:
            if self.strategy == "cali3f":
                return self._cali3f_round(state)
            return self._fedavg_round(state)
        except Exception as exc:
            raise RuntimeError(f"round {state.round + 1} ({self.strategy}) failed: {exc}") from exc

    def _uniform_delegates(self, t: int) -> np.ndarray:
        rng = stream(self.seed, "sampling", t)
        return np.sort(rng.choice(self.num_clients, size=self.cluster.delegates, replace=False))

    def _fedavg_round(self, state: FederationState) -> FederationState:
        t = state.round + 1
        w = state.global_model
        delegates = self._uniform_delegates(t)
        deltas = self._collect(lambda u: w, delegates, t)
        local_models = dict(state.local_models)
        if self.strategy == "ditto":
            for u in sorted(int(x) for x in delegates):
                client = self.clients[u]
                if not client.can_train():
                    continue
                v_k = local_models.get(u, state.initial_model)
                local_models[u] = client.ditto_update(v_k, w, self.ditto, self.train,
                                                      stream(self.seed, "ditto", t, u))
        new_w = agg.fedavg_aggregate(w, deltas, self.cali.server_lr) if deltas else w
        return FederationState(t, new_w, local_models=local_models, initial_model=state.initial_model,
                               instance_counts=state.instance_counts)

    def _cali3f_round(self, state: FederationState) -> FederationState:
        t = state.round + 1
        w = state.global_model
        plan, assignment = state.plan, state.assignment
        labels = assignment.labels
        personalize = self.cluster.personalize
        delegates = plan.all_delegates()

        global_deltas = self._collect(lambda u: w, delegates, t)
        if personalize:
            # same client seed: both passes see identical batches and negatives
            cluster_deltas = self._collect(lambda u: w.with_dense(state.cluster_models[labels[u]]), delegates, t)
        else:
            cluster_deltas = global_deltas

        cluster_models = dict(state.cluster_models)
        if personalize:
            by_cluster: dict[int, list[RoundDelta]] = {}
            for d in cluster_deltas:
                by_cluster.setdefault(int(labels[d.user_id]), []).append(d)
            for p, ds in sorted(by_cluster.items()):
                grad = agg.weighted_dense_mean(ds)
                cluster_models[p] = agg.cali_up(cluster_models[p], w.dense, grad, self.cali.phi,
                                                self.cali.server_lr, self.cali.epsilon_norm)

        new_dense = agg.global_nonembedding_update(w.dense, global_deltas, self.cali.server_lr) \
            if global_deltas else _copy_block(w.dense)

        emb = cluster_deltas
        user = agg.update_delegate_embeddings(w.user, emb)
        changes = agg.user_row_changes(emb, w.user)
        changes_by_cluster: dict[int, list[Block]] = {}
        for u, c in sorted(changes.items()):
            changes_by_cluster.setdefault(int(labels[u]), []).append(c)
        discount = agg.discount_schedule(self.cali.lambda0, self.cali.decay, t)
        user = agg.update_subordinate_embeddings(user, plan, changes_by_cluster, discount)
        item = agg.aggregate_item_embeddings(w.item, emb, self.cali.item_weighting)
        new_w = ModelParams(w.variant, w.dim, w.mlp_widths, user, item, new_dense)

        if t % self.cluster.recluster_every == 0:
            new_assignment = kmeans(new_w.user_representation(), self.cluster.n_clusters,
                                    stream(self.seed, "kmeans", t))
            if personalize and self.cluster.clus_avg:
                cluster_models = clus_avg(cluster_models, assignment, new_assignment, state.instance_counts)
            elif personalize:
                cluster_models = _relabel(cluster_models, assignment, new_assignment, state.instance_counts)
        else:
            new_assignment = assignment
        new_plan = clus_samp(new_assignment, self.cluster.delegates, stream(self.seed, "sampling", t))
        return FederationState(t, new_w, cluster_models, new_assignment, new_plan,
                               initial_model=state.initial_model, instance_counts=state.instance_counts)

    def assemble_inference(self, state: FederationState) -> dict[int, ModelParams]:
        """Model serving each user: cluster-personalised, per-client (Ditto) or global."""
        w = state.global_model
        if self.strategy == "cali3f" and self.cluster.personalize:
            per_cluster = {p: w.with_dense(block) for p, block in state.cluster_models.items()}
            return {u: per_cluster[int(p)] for u, p in enumerate(state.assignment.labels)}
        if self.strategy == "ditto":
            return {u: state.local_models.get(u, state.initial_model) for u in range(self.num_clients)}
        return {u: w for u in range(self.num_clients)}

    def evaluate(self, state: FederationState) -> Evaluation:
        return evaluate_all(self.assemble_inference(state), self.shards)

    def run(self, rounds: int, eval_every: int = 1, state: FederationState | None = None,
            history: MetricHistory | None = None, on_round=None) -> tuple[FederationState, MetricHistory]:
        if rounds < 1:
            raise ValueError("rounds must be >= 1")
        if state is None:
            state = self.init_state()
        if history is None:
            history = MetricHistory(strategy=self.strategy, seed=self.seed)
            ev0 = self.evaluate(state)
            history.initial = RoundRecord(0, **ev0.summary())
        last = None
        while state.round < rounds:
            state = self.run_round(state)
            if state.round % eval_every == 0 or state.round == rounds:
                last = self.evaluate(state)
                history.append(state.round, last)
            if on_round is not None:
                on_round(state, history)
        if last is None:
            last = self.evaluate(state)
        history.per_client_ndcg = last.per_client_ndcg.tolist()
        return state, history


def _copy_block(block: Block) -> Block:
    return {k: v.copy() for k, v in block.items()}


def _relabel(cluster_models, old: ClusterAssignment, new: ClusterAssignment, counts) -> dict:
    """Without averaging, each new cluster inherits the model of its heaviest old cluster."""
    out = {}
    counts = np.asarray(counts, dtype=float)
    for p in range(new.num_clusters):
        members = new.members(p)
        weight = np.bincount(old.labels[members], weights=counts[members], minlength=old.num_clusters)
        out[p] = _copy_block(cluster_models[int(np.argmax(weight))])
    return out


def run_experiment(shards: Sequence[ClientShard], num_items: int, strategy: str, rounds: int,
                   eval_every: int = 1, **kwargs) -> MetricHistory:
    fed = Federation(shards, num_items, strategy=strategy, **kwargs)
    _, history = fed.run(rounds, eval_every=eval_every)
    return history
