"""Graph ensemble temperature scaling: input-ensemble experts behind a sparse gate.

Each expert is a two-layer network over one input ensemble (a column
concatenation of logits ``z``, features ``x`` and a learned degree embedding
``d``) that emits a positive temperature per node, so its calibrated output is
``z / T_m``. A noisy top-k gate over the concatenated expert outputs mixes the
selected experts per node. Every expert output is a positive rescaling of
``z``, hence so is any convex mix of them and the argmax never changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .. import rng as rngmod
from ..autodiff import Parameter, Tensor
from ..graph import NormalizedAdjacency
from ..models import GcnNetwork, MlpNetwork, TwoLayerNet, feature_block
from .cagcn import CalibratorFitConfig, early_stopping_fit, temperature_head

ENSEMBLES = ("z", "x", "d", "zx", "xd", "zd", "zxd")
DEGREE_EMBED_DIM = 16
MAX_DEGREE_BUCKETS = 1024


def ensembles_for(input_types: str) -> tuple[str, ...]:
    """Input ensembles built only from ``input_types`` (e.g. ``"xd"``), in canonical order."""
    types = set(input_types.lower())
    if not types or not types <= set("zxd"):
        raise ValueError(f"input types must be a nonempty subset of 'zxd', got {input_types!r}")
    return tuple(e for e in ENSEMBLES if set(e) <= types)


def ensemble_width(name: str, num_classes: int, num_features: int,
                   degree_dim: int = DEGREE_EMBED_DIM) -> int:
    widths = {"z": num_classes, "x": num_features, "d": degree_dim}
    return sum(widths[c] for c in name)


def build_input_ensembles(z, x, deg_emb, names=ENSEMBLES) -> list[Tensor]:
    """Column concatenations of ``z``, ``x`` and ``deg_emb`` in the order of ``names``."""
    parts = {"z": ad.as_tensor(z), "x": ad.as_tensor(x), "d": ad.as_tensor(deg_emb)}
    rows = {t.shape[0] for t in parts.values()}
    if len(rows) != 1:
        raise ad.ShapeError(f"inputs disagree on node count: {[t.shape for t in parts.values()]}")
    out = []
    for name in names:
        cols = [parts[c] for c in name]
        out.append(cols[0] if len(cols) == 1 else ad.concat_columns(cols))
    return out


class DegreeEmbedding:
    def __init__(self, max_degree: int, dim: int = DEGREE_EMBED_DIM,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        buckets = min(int(max_degree) + 1, MAX_DEGREE_BUCKETS)
        self.table = Parameter(rng.standard_normal((buckets, dim)), "degree_embedding")

    @property
    def num_buckets(self) -> int:
        return self.table.shape[0]

    def indices(self, degrees) -> np.ndarray:
        return np.minimum(np.asarray(degrees, dtype=np.int64), self.num_buckets - 1)

    def __call__(self, degrees) -> Tensor:
        return ad.embedding_lookup(self.table, self.indices(degrees))


def expert_temperatures(expert: TwoLayerNet, adj: NormalizedAdjacency | None, inputs,
                        training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    return temperature_head(expert, adj, inputs, training, rng)


def gating_scores(h: Tensor, w_gate: Tensor, w_noise: Tensor, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """``h W_g + eps * softplus(h W_n)`` with fresh standard-normal ``eps`` in training, 0 otherwise."""
    clean = ad.matmul(h, w_gate)
    if not training:
        return clean
    if rng is None:
        raise ValueError("noisy gating in training mode needs a random generator")
    noise_scale = ad.softplus(ad.matmul(h, w_noise))
    eps = Tensor(rng.standard_normal(clean.shape))
    return ad.add(clean, ad.multiply(eps, noise_scale))


def topk_weights(q, k: int) -> Tensor:
    return ad.topk_softmax(q, k)


@dataclass
class GetsConfig:
    input_types: str = "zxd"
    ensembles: tuple[str, ...] | None = None
    k: int = 2
    backbone: str = "gcn"
    hidden_dim: int = 16
    dropout: float = 0.5
    learning_rate: float = 0.1
    weight_decay: float = 0.0
    max_epochs: int = 1000
    patience: int = 50
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        m = len(self.resolved_ensembles())
        if not 1 <= self.k <= m:
            raise ValueError(f"k must be in [1, {m}] for {m} input ensembles, got {self.k}")
        if self.backbone not in ("gcn", "mlp"):
            raise ValueError(f"backbone must be 'gcn' or 'mlp', got {self.backbone!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def resolved_ensembles(self) -> tuple[str, ...]:
        names = tuple(self.ensembles) if self.ensembles else ensembles_for(self.input_types)
        unknown = [n for n in names if n not in ENSEMBLES]
        if unknown or not names:
            raise ValueError(f"unknown input ensembles {unknown}; choose from {ENSEMBLES}")
        return names

    def fit_config(self) -> CalibratorFitConfig:
        return CalibratorFitConfig(self.hidden_dim, self.dropout, self.learning_rate,
                                   self.weight_decay, self.max_epochs, self.patience, self.seed)


@dataclass
class GetsOutput:
    logits: Tensor
    weights: Tensor
    temperatures: list[Tensor] = field(default_factory=list)


class GetsCalibrator:
    def __init__(self, num_classes: int, num_features: int, max_degree: int,
                 ensembles=ENSEMBLES, k: int = 2, backbone: str = "gcn", hidden_dim: int = 16,
                 dropout: float = 0.5, noise: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.ensembles = tuple(ensembles)
        m = len(self.ensembles)
        if not 1 <= k <= m:
            raise ValueError(f"k must be in [1, {m}], got {k}")
        if backbone not in ("gcn", "mlp"):
            raise ValueError(f"backbone must be 'gcn' or 'mlp', got {backbone!r}")
        self.num_classes, self.num_features, self.max_degree = num_classes, num_features, max_degree
        self.k, self.backbone, self.noise_enabled = k, backbone, noise
        self.hidden_dim, self.dropout = hidden_dim, dropout
        net_cls = GcnNetwork if backbone == "gcn" else MlpNetwork
        self.degree_embedding = (DegreeEmbedding(max_degree, rng=rng)
                                 if any("d" in e for e in self.ensembles) else None)
        self.experts = [
            net_cls(ensemble_width(e, num_classes, num_features), hidden_dim, 1, dropout, rng=rng,
                    prefix=f"expert[{e}].")
            for e in self.ensembles
        ]
        # zero-initialized gate: every expert starts equally likely
        self.w_gate = Parameter(np.zeros((m * num_classes, m)), "w_gate")
        self.w_noise = Parameter(np.zeros((m * num_classes, m)), "w_noise")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> list[Parameter]:
        params = [p for e in self.experts for p in e.parameters()]
        if self.degree_embedding is not None:
            params.append(self.degree_embedding.table)
        return params + [self.w_gate, self.w_noise]

    def state(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data.copy() for p in self.parameters()}
        if len(out) != len(self.parameters()):
            raise RuntimeError("parameter names are not unique")
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        params = {p.name: p for p in self.parameters()}
        if set(state) != set(params):
            raise KeyError(f"state keys {sorted(set(state) ^ set(params))} do not match the calibrator")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != params[name].shape:
                raise ad.ShapeError(f"{name}: expected {params[name].shape}, got {value.shape}")
            params[name].data[...] = value

    def inputs(self, z, x, degrees) -> list[Tensor]:
        """The concatenated input ensembles, one dense tensor per expert."""
        n = ad.as_tensor(z).shape[0]
        d = self.degree_embedding(degrees) if self.degree_embedding is not None else np.zeros((n, 0))
        return build_input_ensembles(z, x, d, self.ensembles)

    def input_blocks(self, z, x, degrees) -> list[list]:
        """Per expert, the column blocks of its input ensemble without concatenating them."""
        z = ad.as_tensor(z)
        parts = {"z": z, "x": feature_block(x)}
        if self.degree_embedding is not None:
            parts["d"] = self.degree_embedding(degrees)
        if parts["x"].shape[0] != z.shape[0]:
            raise ad.ShapeError(f"inputs disagree on node count: {z.shape} vs {parts['x'].shape}")
        return [[parts[c] for c in name] for name in self.ensembles]

    def forward(self, adj, z, x, degrees, training: bool = False,
                dropout_rng: np.random.Generator | None = None,
                noise_rng: np.random.Generator | None = None) -> GetsOutput:
        z = ad.as_tensor(z)
        temps, calibrated = [], []
        for expert, inp in zip(self.experts, self.input_blocks(z, x, degrees)):
            t = expert_temperatures(expert, adj, inp, training, dropout_rng)
            temps.append(t)
            calibrated.append(ad.rowwise_divide(z, t))
        h = calibrated[0] if len(calibrated) == 1 else ad.concat_columns(calibrated)
        q = gating_scores(h, self.w_gate, self.w_noise, training and self.noise_enabled, noise_rng)
        w = topk_weights(q, self.k)
        out = None
        for m, c in enumerate(calibrated):
            term = ad.rowwise_scale(c, ad.column(w, m))
            out = term if out is None else ad.add(out, term)
        return GetsOutput(out, w, temps)

    __call__ = forward

    def calibrate(self, adj, z, x, degrees) -> np.ndarray:
        return self.forward(adj, z, x, degrees).logits.data.copy()

    def predict_proba(self, adj, z, x, degrees) -> np.ndarray:
        return ad.softmax(self.calibrate(adj, z, x, degrees))


def gets_forward(cal: GetsCalibrator, adj, z, x, degrees, training: bool = False,
                 dropout_rng=None, noise_rng=None) -> tuple[Tensor, Tensor]:
    out = cal.forward(adj, z, x, degrees, training, dropout_rng, noise_rng)
    return out.logits, out.weights


def fit_gets(adj: NormalizedAdjacency, z, x, degrees, labels, val_mask,
             cfg: GetsConfig | None = None) -> GetsCalibrator:
    """Jointly train experts, degree embedding and gate by validation NLL."""
    cfg = cfg or GetsConfig()
    z = Tensor(np.asarray(z, dtype=np.float64))
    x = feature_block(x)
    degrees = np.asarray(degrees, dtype=np.int64)
    val_idx = np.flatnonzero(val_mask) if np.asarray(val_mask).dtype == bool else np.asarray(val_mask)
    y_val = np.asarray(labels)[val_idx]
    cal = GetsCalibrator(z.shape[1], x.shape[1], int(degrees.max(initial=0)), cfg.resolved_ensembles(),
                         cfg.k, cfg.backbone, cfg.hidden_dim, cfg.dropout, cfg.noise,
                         rng=rngmod.stream(cfg.seed, "calibrator_init"))
    drop_rng = rngmod.stream(cfg.seed, "calibrator_dropout")
    noise_rng = rngmod.stream(cfg.seed, "gating_noise")

    def loss_fn():
        out = cal.forward(adj, z, x, degrees, True, drop_rng, noise_rng)
        return ad.log_softmax_nll(out.logits, y_val, val_idx)

    def val_loss_fn():
        return ad.log_softmax_nll(cal.forward(adj, z, x, degrees).logits, y_val, val_idx).item()

    early_stopping_fit(cal.parameters(), loss_fn, val_loss_fn, cal.state, cal.load_state,
                       cfg.fit_config(), "GETS")
    return cal
