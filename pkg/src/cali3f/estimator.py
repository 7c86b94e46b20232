"""scikit-learn style wrapper around one federated training run.

``fit`` takes an ``(n, 3)`` array of raw ``(user, item, timestamp)`` rows,
``predict`` scores ``(n, 2)`` raw ``(user, item)`` pairs and ``score`` returns
mean HR@10 on the held-out items.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from cali3f.aggregation import CaliConfig, DittoConfig
from cali3f.data import InteractionTable, build_shards
from cali3f.federation import ClusterConfig, Federation
from cali3f.models import TrainConfig, predict


class FederatedRecommender(BaseEstimator):
    def __init__(self, strategy="cali3f", model="neumf", rounds=100, clusters=30, delegates=30, phi=0.1,
                 lambda0=0.5, decay=1.0, lr=0.05, local_epochs=2, batch_size=64, embedding_dim=8,
                 mlp_widths=(32, 16, 8), neg_ratio=4, ditto_reg=0.1, eval_every=1, seed=0):
        self.strategy = strategy
        self.model = model
        self.rounds = rounds
        self.clusters = clusters
        self.delegates = delegates
        self.phi = phi
        self.lambda0 = lambda0
        self.decay = decay
        self.lr = lr
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.embedding_dim = embedding_dim
        self.mlp_widths = mlp_widths
        self.neg_ratio = neg_ratio
        self.ditto_reg = ditto_reg
        self.eval_every = eval_every
        self.seed = seed

    def _federation(self, shards, num_items) -> Federation:
        return Federation(
            shards, num_items, variant=self.model, strategy=self.strategy,
            train=TrainConfig(lr=self.lr, local_epochs=self.local_epochs, batch_size=self.batch_size,
                              embedding_dim=self.embedding_dim, mlp_widths=tuple(self.mlp_widths),
                              neg_ratio=self.neg_ratio),
            cali=CaliConfig(phi=self.phi, lambda0=self.lambda0, decay=self.decay),
            cluster=ClusterConfig(n_clusters=self.clusters, delegates=self.delegates),
            ditto=DittoConfig(reg=self.ditto_reg),
            seed=self.seed,
        )

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.int64, ensure_min_samples=1)
        if X.shape[1] != 3:
            raise ValueError(f"expected (user, item, timestamp) columns, got {X.shape[1]}")
        table = InteractionTable.from_records([tuple(row) for row in X.tolist()])
        shards = build_shards(table, seed=self.seed, neg_ratio=self.neg_ratio)
        self.federation_ = self._federation(shards, table.num_items)
        self.state_, self.history_ = self.federation_.run(self.rounds, eval_every=self.eval_every)
        self.user_index_ = {u: i for i, u in enumerate(table.user_ids.tolist())}
        self.item_index_ = {it: i for i, it in enumerate(table.item_ids.tolist())}
        return self

    def _dense_pairs(self, X):
        X = check_array(X, dtype=np.int64)
        if X.shape[1] != 2:
            raise ValueError(f"expected (user, item) columns, got {X.shape[1]}")
        try:
            users = np.array([self.user_index_[u] for u in X[:, 0].tolist()], dtype=np.int64)
            items = np.array([self.item_index_[i] for i in X[:, 1].tolist()], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"id {exc.args[0]} was not seen during fit") from None
        return users, items

    def predict(self, X) -> np.ndarray:
        """Scores in (0, 1) from each user's inference model."""
        check_is_fitted(self, "state_")
        users, items = self._dense_pairs(X)
        models = self.federation_.assemble_inference(self.state_)
        out = np.empty(len(users))
        for u in np.unique(users):
            mask = users == u
            out[mask] = predict(models[int(u)], u, items[mask])
        return out

    def score(self, X=None, y=None) -> float:
        """Mean HR@10 of the fitted models on the leave-one-out split."""
        check_is_fitted(self, "state_")
        return self.federation_.evaluate(self.state_).mean_hr
