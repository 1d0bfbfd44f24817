"""Node-wise temperatures from a GCN run over the frozen logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .. import rng as rngmod
from ..autodiff import Tensor
from ..graph import NormalizedAdjacency
from ..models import GcnNetwork, TrainingDiverged, TwoLayerNet
from .scaling import scale_logits_by_temperature

T_FLOOR = 1e-3


def temperature_head(net: TwoLayerNet, adj: NormalizedAdjacency | None, inputs, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """``softplus(net(inputs)) + T_FLOOR`` as an (N, 1) column."""
    return ad.shift(ad.softplus(net.forward(adj, inputs, training, rng)), T_FLOOR)


@dataclass
class CalibratorFitConfig:
    hidden_dim: int = 16
    dropout: float = 0.5
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    max_epochs: int = 1000
    patience: int = 50
    seed: int = 0


def early_stopping_fit(params, loss_fn, val_loss_fn, get_state, set_state, cfg: CalibratorFitConfig,
                       what: str):
    """Adam on ``loss_fn`` with patience on ``val_loss_fn``; restores the best state.

    Returns ``(best_epoch, best_val_loss, epochs_run)``.
    """
    opt = ad.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    best_loss, best_epoch, best_state = val_loss_fn(), 0, get_state()
    if not np.isfinite(best_loss):
        raise TrainingDiverged(0, f"{what} validation loss")
    stale = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        opt.zero_grad()
        loss = loss_fn()
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(epoch, f"{what} loss")
        ad.backward(loss)
        opt.step()
        val = val_loss_fn()
        if not np.isfinite(val):
            raise TrainingDiverged(epoch, f"{what} validation loss")
        if val < best_loss:
            best_loss, best_epoch, best_state = val, epoch, get_state()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    set_state(best_state)
    return best_epoch, best_loss, epoch


class CaGcnCalibrator:
    def __init__(self, num_classes: int, hidden_dim: int = 16, dropout: float = 0.5,
                 rng: np.random.Generator | None = None):
        self.gcn = GcnNetwork(num_classes, hidden_dim, 1, dropout, rng=rng, prefix="cagcn.")

    def parameters(self):
        return self.gcn.parameters()

    def state(self) -> dict[str, np.ndarray]:
        return self.gcn.state()

    def load_state(self, state):
        self.gcn.load_state(state)

    def temperatures(self, adj, logits, training: bool = False, rng=None) -> Tensor:
        return temperature_head(self.gcn, adj, logits, training, rng)

    def calibrate(self, adj, logits) -> np.ndarray:
        return scale_logits_by_temperature(logits, cagcn_temperatures(self, adj, logits))

    def predict_proba(self, adj, logits) -> np.ndarray:
        return ad.softmax(self.calibrate(adj, logits))


def cagcn_temperatures(cal: CaGcnCalibrator, adj: NormalizedAdjacency, logits) -> np.ndarray:
    return cal.temperatures(adj, np.asarray(logits, dtype=np.float64)).data.reshape(-1).copy()


def fit_cagcn(adj: NormalizedAdjacency, logits, labels, val_mask,
              cfg: CalibratorFitConfig | None = None) -> CaGcnCalibrator:
    """Train the temperature GCN by NLL of ``z / T`` on the validation nodes."""
    cfg = cfg or CalibratorFitConfig()
    z = Tensor(np.asarray(logits, dtype=np.float64))
    val_idx = np.flatnonzero(val_mask) if np.asarray(val_mask).dtype == bool else np.asarray(val_mask)
    y_val = np.asarray(labels)[val_idx]
    cal = CaGcnCalibrator(z.shape[1], cfg.hidden_dim, cfg.dropout, rngmod.stream(cfg.seed, "calibrator_init"))
    drop_rng = rngmod.stream(cfg.seed, "calibrator_dropout")

    def loss_fn():
        return ad.log_softmax_nll(ad.rowwise_divide(z, cal.temperatures(adj, z, True, drop_rng)), y_val, val_idx)

    def val_loss_fn():
        return ad.log_softmax_nll(ad.rowwise_divide(z, cal.temperatures(adj, z)), y_val, val_idx).item()

    early_stopping_fit(cal.parameters(), loss_fn, val_loss_fn, cal.state, cal.load_state, cfg, "CaGCN")
    return cal
