"""Two-layer GCN and MLP networks, classifier training and accuracy."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .graph import CsrMatrix, GraphDataset, NormalizedAdjacency
from . import rng as rngmod

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite at epoch {epoch}")
        self.epoch = epoch


# features at most this dense are handled as a sparse block
SPARSE_FEATURE_DENSITY = 0.25


def feature_block(x):
    """Node features as a constant block: a :class:`CsrMatrix` when mostly zero."""
    if isinstance(x, CsrMatrix):
        return x
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 2 and x.size and np.count_nonzero(x) <= SPARSE_FEATURE_DENSITY * x.size:
        m = sp.csr_matrix(x)
        m.sort_indices()
        return CsrMatrix(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)
    return Tensor(x)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class TwoLayerNet:
    """``in -> hidden -> out`` with ReLU, dropout before each linear map.

    With ``use_graph`` each linear map is followed by multiplication with the
    normalized adjacency (a GCN layer); without it the network is an MLP.
    """

    use_graph = True

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, dropout: float = 0.5,
                 rng: np.random.Generator | None = None, prefix: str = ""):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        self.dropout_p = dropout
        self.w1 = Parameter(glorot(rng, in_dim, hidden_dim), f"{prefix}w1")
        self.b1 = Parameter(np.zeros(hidden_dim), f"{prefix}b1")
        self.w2 = Parameter(glorot(rng, hidden_dim, out_dim), f"{prefix}w2")
        self.b2 = Parameter(np.zeros(out_dim), f"{prefix}b2")

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def state(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).data.copy() for k in ("w1", "b1", "w2", "b2")}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            p = getattr(self, k)
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.shape:
                raise ad.ShapeError(f"{k}: expected shape {p.shape}, got {v.shape}")
            p.data[...] = v

    def _propagate(self, adj: NormalizedAdjacency | None, h: Tensor) -> Tensor:
        if self.use_graph:
            if adj is None:
                raise ValueError("a GCN forward pass needs the normalized adjacency")
            return ad.spmm(adj.matrix, h)
        return h

    def _input_layer(self, x, training: bool, rng) -> Tensor:
        """``dropout(x) @ w1`` where ``x`` may be given as a list of column blocks.

        Each block meets only its own rows of ``w1``, so constant blocks never
        receive an input gradient and a :class:`CsrMatrix` block is multiplied
        sparsely. Dropout is elementwise, so per-block dropout has the same
        distribution as dropout of the concatenation.
        """
        blocks = list(x) if isinstance(x, (list, tuple)) else [x]
        blocks = [b if isinstance(b, CsrMatrix) else ad.as_tensor(b) for b in blocks]
        widths = [b.shape[1] if len(b.shape) == 2 else -1 for b in blocks]
        if -1 in widths or sum(widths) != self.in_dim:
            raise ad.ShapeError(f"expected input with {self.in_dim} columns, got blocks "
                                f"{[b.shape for b in blocks]}")
        out, lo = None, 0
        for b, width in zip(blocks, widths):
            w = self.w1 if len(blocks) == 1 else ad.row_block(self.w1, lo, lo + width)
            lo += width
            if isinstance(b, CsrMatrix):
                term = ad.spmm(ad.sparse_dropout(b, self.dropout_p, training, rng), w)
            else:
                term = ad.matmul(ad.dropout(b, self.dropout_p, training, rng), w)
            out = term if out is None else ad.add(out, term)
        return out

    def forward(self, adj: NormalizedAdjacency | None, x, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        h = self._input_layer(x, training, rng)
        h = ad.relu(ad.add_row_bias(self._propagate(adj, h), self.b1))
        h = ad.dropout(h, self.dropout_p, training, rng)
        return ad.add_row_bias(self._propagate(adj, ad.matmul(h, self.w2)), self.b2)

    __call__ = forward


class GcnNetwork(TwoLayerNet):
    use_graph = True


class MlpNetwork(TwoLayerNet):
    use_graph = False


def gcn_forward(net: GcnNetwork, adj: NormalizedAdjacency, x, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    return net.forward(adj, x, training, rng)


def mlp_forward(net: MlpNetwork, x, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    return net.forward(None, x, training, rng)


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-2
    weight_decay: float = 5e-4
    dropout: float = 0.5
    hidden_dim: int = 16
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.patience is not None and not 1 <= self.patience <= self.epochs:
            raise ValueError("patience must lie in [1, epochs]")


@dataclass
class TrainResult:
    net: TwoLayerNet
    logits: np.ndarray
    best_epoch: int
    best_val_nll: float
    epochs_run: int


def train_classifier(g: GraphDataset, adj: NormalizedAdjacency, cfg: TrainConfig,
                     train_mask, val_mask, backbone: str = "gcn") -> TrainResult:
    """Fit a two-layer classifier on ``train_mask``.

    Parameters of the epoch with the lowest validation NLL are restored before
    the full-graph logits are computed in inference mode.
    """
    train_idx = np.flatnonzero(train_mask) if np.asarray(train_mask).dtype == bool else np.asarray(train_mask)
    if len(train_idx) == 0:
        raise ValueError("train mask selects no nodes")
    cls = {"gcn": GcnNetwork, "mlp": MlpNetwork}[backbone]
    net = cls(g.num_features, cfg.hidden_dim, g.num_classes, cfg.dropout,
              rng=rngmod.stream(cfg.seed, "classifier_init"))
    drop_rng = rngmod.stream(cfg.seed, "classifier_dropout")
    opt = ad.Adam(net.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    x = feature_block(g.features)

    best = (np.inf, 0, net.state())
    stale = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        opt.zero_grad()
        loss = ad.log_softmax_nll(net(adj, x, True, drop_rng), g.labels, train_idx)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(epoch)
        ad.backward(loss)
        opt.step()

        val_nll = ad.log_softmax_nll(net(adj, x, False), g.labels, val_mask).item()
        if not np.isfinite(val_nll):
            raise TrainingDiverged(epoch, "validation loss")
        if val_nll < best[0]:
            best = (val_nll, epoch, net.state())
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    net.load_state(best[2])
    logits = net(adj, x, False).data.copy()
    log.debug("classifier: best epoch %d of %d, val nll %.4f", best[1], epoch, best[0])
    return TrainResult(net, logits, best[1], best[0], epoch)


def evaluate_classifier(logits, labels, mask=None) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    idx = np.arange(len(labels)) if mask is None else (
        np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask))
    if len(idx) == 0:
        raise ValueError("mask selects no nodes")
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))
