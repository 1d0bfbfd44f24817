"""Classic logit-scaling calibrators: temperature, vector and ensemble TS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Parameter, softmax

T_MIN = 0.05
T_MAX = 100.0

FIT_ITERS = 1000
FIT_LR = 0.01


def scale_logits_by_temperature(z, temperature) -> np.ndarray:
    """Divide each logit row by its temperature (scalar or one per row)."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(temperature, dtype=np.float64)
    if np.any(t <= 0) or not np.all(np.isfinite(t)):
        raise ValueError("temperatures must be positive and finite")
    if t.ndim == 0:
        return z / t
    t = t.reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ValueError(f"{t.shape[0]} temperatures for {z.shape[0]} logit rows")
    return z / t[:, None]


@dataclass(frozen=True)
class TemperatureScaler:
    temperature: float
    t_min: float = T_MIN
    t_max: float = T_MAX

    def __post_init__(self):
        if not self.t_min <= self.temperature <= self.t_max:
            raise ValueError(f"temperature {self.temperature} outside [{self.t_min}, {self.t_max}]")

    def calibrate(self, z) -> np.ndarray:
        return scale_logits_by_temperature(z, self.temperature)

    def predict_proba(self, z) -> np.ndarray:
        return softmax(self.calibrate(z))


def temperature_nll(z, labels, temperature: float) -> float:
    return ad.log_softmax_nll(ad.Tensor(scale_logits_by_temperature(z, temperature)), labels).item()


def _log_t_gradient(z: ad.Tensor, labels, log_t: float) -> float:
    p = Parameter(np.full((1, 1), log_t))
    ad.backward(ad.log_softmax_nll(ad.rowwise_divide(z, ad.exp(p)), labels))
    return p.grad.item()


def fit_temperature_scaling(logits_val, labels_val, t_min: float = T_MIN, t_max: float = T_MAX,
                            method: str = "bisect", iters: int = FIT_ITERS, lr: float = FIT_LR,
                            tol: float = 1e-7) -> TemperatureScaler:
    """Minimize validation NLL over ``log T`` within ``[t_min, t_max]``.

    NLL is convex in ``1/T``, so its ``log T`` derivative changes sign at most
    once. ``method="bisect"`` brackets that sign change using tape gradients
    and is exact up to float resolution, including optima at either bound.
    ``method="adam"`` runs a fixed Adam schedule from ``T = 1`` instead and
    stops early once an update moves ``log T`` by less than ``tol``.
    """
    z = ad.Tensor(np.asarray(logits_val, dtype=np.float64))
    if z.shape[0] == 0:
        raise ValueError("empty validation set")
    lo, hi = np.log(t_min), np.log(t_max)
    if method == "bisect":
        if _log_t_gradient(z, labels_val, lo) >= 0:
            return TemperatureScaler(t_min, t_min, t_max)
        if _log_t_gradient(z, labels_val, hi) <= 0:
            return TemperatureScaler(t_max, t_min, t_max)
        a, b = lo, hi
        for _ in range(200):
            mid = 0.5 * (a + b)
            if mid in (a, b):
                break
            if _log_t_gradient(z, labels_val, mid) > 0:
                b = mid
            else:
                a = mid
        return TemperatureScaler(float(np.clip(np.exp(0.5 * (a + b)), t_min, t_max)), t_min, t_max)
    if method != "adam":
        raise ValueError(f"unknown fitting method {method!r}")

    log_t = Parameter(np.zeros((1, 1)), "log_temperature")
    opt = ad.Adam([log_t], lr=lr)
    for _ in range(iters):
        opt.zero_grad()
        loss = ad.log_softmax_nll(ad.rowwise_divide(z, ad.exp(log_t)), labels_val)
        ad.backward(loss)
        before = log_t.data.item()
        opt.step()
        np.clip(log_t.data, lo, hi, out=log_t.data)
        if abs(log_t.data.item() - before) < tol:
            break
    t = float(np.clip(np.exp(log_t.data.item()), t_min, t_max))
    return TemperatureScaler(t, t_min, t_max)


@dataclass(frozen=True)
class VectorScaler:
    t: np.ndarray
    b: np.ndarray

    def calibrate(self, z) -> np.ndarray:
        return vector_scale(z, self)

    def predict_proba(self, z) -> np.ndarray:
        return softmax(self.calibrate(z))


def vector_scale(z, vs: VectorScaler) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] != len(vs.t) or len(vs.t) != len(vs.b):
        raise ValueError(f"vector scaler of size {len(vs.t)} does not fit logits {z.shape}")
    return z * vs.t[None, :] + vs.b[None, :]


def fit_vector_scaling(logits_val, labels_val, iters: int = FIT_ITERS,
                       lr: float = FIT_LR) -> VectorScaler:
    z = ad.Tensor(np.asarray(logits_val, dtype=np.float64))
    k = z.shape[1]
    t = Parameter(np.ones((1, k)), "vs_t")
    b = Parameter(np.zeros((1, k)), "vs_b")
    opt = ad.Adam([t, b], lr=lr)
    for _ in range(iters):
        opt.zero_grad()
        ad.backward(ad.log_softmax_nll(ad.elementwise_mul_add(z, t, b), labels_val))
        opt.step()
    return VectorScaler(t.data.reshape(-1).copy(), b.data.reshape(-1).copy())


@dataclass(frozen=True)
class EtsWeights:
    temperature: float
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"ETS weights must be a point on the 3-simplex, got {w}")
        if self.temperature <= 0:
            raise ValueError("ETS temperature must be positive")

    def predict_proba(self, z) -> np.ndarray:
        return ets_mix(z, self)


def _ets_components(z: np.ndarray, temperature: float) -> tuple[np.ndarray, ...]:
    k = z.shape[1]
    return softmax(z / temperature), softmax(z), np.full(z.shape, 1.0 / k)


def ets_mix(z, ets: EtsWeights) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    w = ets.weights
    tempered, raw, uniform = _ets_components(z, ets.temperature)
    return w[0] * tempered + w[1] * raw + w[2] * uniform


def fit_ets_weights(logits_val, labels_val, temperature: float, iters: int = FIT_ITERS,
                    lr: float = FIT_LR) -> EtsWeights:
    """Fit simplex weights ``softmax(a)`` of the three-way mixture by NLL."""
    z = np.asarray(logits_val, dtype=np.float64)
    comps = [ad.Tensor(c) for c in _ets_components(z, temperature)]
    a = Parameter(np.zeros((1, 3)), "ets_logits")
    opt = ad.Adam([a], lr=lr)
    for _ in range(iters):
        opt.zero_grad()
        w = ad.softmax_rows(a)
        mix = ad.rowwise_scale(comps[0], ad.column(w, 0))
        mix = ad.add(mix, ad.rowwise_scale(comps[1], ad.column(w, 1)))
        mix = ad.add(mix, ad.rowwise_scale(comps[2], ad.column(w, 2)))
        ad.backward(ad.nll_of_probs(mix, labels_val))
        opt.step()
    w = softmax(a.data).reshape(-1)
    return EtsWeights(temperature, w / w.sum())
