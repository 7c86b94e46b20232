"""Whole-state checkpoints so an interrupted run can resume exactly.

All randomness is derived from ``(seed, concern, round, user)`` keys, so the
parameters and cluster bookkeeping are the only things to persist.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from cali3f.clustering import ClusterAssignment, SamplingPlan
from cali3f.federation import FederationState
from cali3f.models import _pack, _unpack, params_meta

STATE_VERSION = 1


def save_state(path, state: FederationState, extra: dict | None = None) -> None:
    """Write ``state`` to ``path`` (``.npz``); the file is replaced atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(_pack(state.global_model, "global/"))
    meta = {
        "version": STATE_VERSION,
        "round": state.round,
        "model": params_meta(state.global_model),
        "clusters": sorted(state.cluster_models),
        "cluster_keys": list(next(iter(state.cluster_models.values()))) if state.cluster_models else [],
        "local_users": sorted(state.local_models),
        "has_plan": state.plan is not None,
        "extra": extra or {},
    }
    if state.initial_model is not None:
        arrays.update(_pack(state.initial_model, "initial/"))
    if state.instance_counts is not None:
        arrays["counts"] = np.asarray(state.instance_counts)
    for p, block in state.cluster_models.items():
        for k, v in block.items():
            arrays[f"cluster/{p}/{k}"] = v
    for u, model in state.local_models.items():
        arrays.update(_pack(model, f"local/{u}/"))
    if state.assignment is not None:
        arrays["assign/labels"] = state.assignment.labels
        arrays["assign/centroids"] = state.assignment.centroids
        arrays["assign/distortions"] = np.asarray(state.assignment.distortions, dtype=float)
    if state.plan is not None:
        for p in state.plan.delegates:
            arrays[f"plan/del/{p}"] = state.plan.delegates[p]
            arrays[f"plan/sub/{p}"] = state.plan.subordinates[p]
        meta["plan_clusters"] = sorted(state.plan.delegates)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)


def load_state(path) -> tuple[FederationState, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != STATE_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        model_meta = meta["model"]
        state = FederationState(round=int(meta["round"]), global_model=_unpack(z, model_meta, "global/"))
        if "initial/" + f"dense/{model_meta['dense'][0]}" in z.files:
            state.initial_model = _unpack(z, model_meta, "initial/")
        if "counts" in z.files:
            state.instance_counts = np.array(z["counts"])
        state.cluster_models = {int(p): {k: np.array(z[f"cluster/{p}/{k}"]) for k in meta["cluster_keys"]}
                                for p in meta["clusters"]}
        state.local_models = {int(u): _unpack(z, model_meta, f"local/{u}/") for u in meta["local_users"]}
        if "assign/labels" in z.files:
            state.assignment = ClusterAssignment(np.array(z["assign/labels"]), np.array(z["assign/centroids"]),
                                                 z["assign/distortions"].tolist())
        if meta["has_plan"]:
            ps = meta["plan_clusters"]
            state.plan = SamplingPlan({p: np.array(z[f"plan/del/{p}"]) for p in ps},
                                      {p: np.array(z[f"plan/sub/{p}"]) for p in ps})
    return state, meta["extra"]
