"""Versioned JSON checkpoints for fitted calibrators and trained classifiers.

A checkpoint is one JSON object::

    {"magic": "GETSCAL-CHECKPOINT", "format_version": 1, "kind": "<kind>",
     "meta": {...constructor settings...}, "params": {"<name>": nested lists}}

Floats go through ``json`` which writes ``repr``-exact values, so a
save/load round trip reproduces parameters bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .calibrators.cagcn import CaGcnCalibrator
from .calibrators.gets import GetsCalibrator
from .calibrators.scaling import EtsWeights, TemperatureScaler, VectorScaler
from .models import GcnNetwork, MlpNetwork, TwoLayerNet

MAGIC = "GETSCAL-CHECKPOINT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(state: dict) -> dict:
    return {k: np.asarray(v, dtype=np.float64).tolist() for k, v in state.items()}


def _unarrays(params: dict) -> dict:
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def to_document(obj) -> dict:
    """Describe a fitted calibrator or classifier network as a plain dict."""
    if isinstance(obj, TemperatureScaler):
        kind, meta, params = "ts", {"t_min": obj.t_min, "t_max": obj.t_max}, {"temperature": obj.temperature}
    elif isinstance(obj, VectorScaler):
        kind, meta, params = "vs", {}, {"t": obj.t, "b": obj.b}
    elif isinstance(obj, EtsWeights):
        kind, meta, params = "ets", {}, {"temperature": obj.temperature, "weights": obj.weights}
    elif isinstance(obj, CaGcnCalibrator):
        net = obj.gcn
        kind = "cagcn"
        meta = {"num_classes": net.in_dim, "hidden_dim": net.hidden_dim, "dropout": net.dropout_p}
        params = obj.state()
    elif isinstance(obj, GetsCalibrator):
        kind = "gets"
        meta = {"num_classes": obj.num_classes, "num_features": obj.num_features,
                "max_degree": obj.max_degree, "ensembles": list(obj.ensembles), "k": obj.k,
                "backbone": obj.backbone, "hidden_dim": obj.hidden_dim, "dropout": obj.dropout,
                "noise": obj.noise_enabled}
        params = obj.state()
    elif isinstance(obj, TwoLayerNet):
        kind = "classifier"
        meta = {"backbone": "gcn" if obj.use_graph else "mlp", "in_dim": obj.in_dim,
                "hidden_dim": obj.hidden_dim, "out_dim": obj.out_dim, "dropout": obj.dropout_p}
        params = obj.state()
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    return {"magic": MAGIC, "format_version": FORMAT_VERSION, "kind": kind, "meta": meta,
            "params": _arrays(params)}


def from_document(doc: dict):
    if not isinstance(doc, dict) or doc.get("magic") != MAGIC:
        raise CheckpointError("not a calibrator checkpoint (bad magic string)")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}; "
                              f"this build reads version {FORMAT_VERSION}")
    kind, meta = doc.get("kind"), doc.get("meta", {})
    params = _unarrays(doc.get("params", {}))
    try:
        if kind == "ts":
            return TemperatureScaler(float(params["temperature"]), meta["t_min"], meta["t_max"])
        if kind == "vs":
            return VectorScaler(params["t"], params["b"])
        if kind == "ets":
            return EtsWeights(float(params["temperature"]), params["weights"])
        if kind == "cagcn":
            obj = CaGcnCalibrator(meta["num_classes"], meta["hidden_dim"], meta["dropout"])
        elif kind == "gets":
            obj = GetsCalibrator(meta["num_classes"], meta["num_features"], meta["max_degree"],
                                 tuple(meta["ensembles"]), meta["k"], meta["backbone"],
                                 meta["hidden_dim"], meta["dropout"], meta["noise"])
        elif kind == "classifier":
            cls = GcnNetwork if meta["backbone"] == "gcn" else MlpNetwork
            obj = cls(meta["in_dim"], meta["hidden_dim"], meta["out_dim"], meta["dropout"])
        else:
            raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    except KeyError as exc:
        raise CheckpointError(f"{kind} checkpoint is missing field {exc}") from None
    obj.load_state(params)
    return obj


def save_checkpoint(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_document(obj), sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}:{exc.lineno}: {exc.msg}") from None
    return from_document(doc)
