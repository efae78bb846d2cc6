"""Training objectives: pinball (quantile) loss, MSE and MAE.

All three reduce to a scalar by summing over lead times and pixels and
dividing by the batch size only. Per-pixel averages are for humans and live
in the logging code, not here, so gradient magnitudes stay comparable
across grid sizes.

Subgradient conventions at the kink, fixed once and tested:

* pinball at e = 0 uses the right-derivative q (the tie in
  ``max(q*e, (q-1)*e)`` routes to the first branch),
* |e| at e = 0 uses 0.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ContractError
from .model import QuantileSpec, extract_quantile
from .tensor import Tensor


@dataclass(frozen=True)
class LossKind:
    """Tagged choice of training objective."""

    tag: str
    quantiles: QuantileSpec | None = None

    _TAGS = ("mse", "mae", "quantile")

    def __post_init__(self):
        if self.tag not in self._TAGS:
            raise ContractError(f"unknown loss tag {self.tag!r}; expected one of {self._TAGS}")
        if self.tag == "quantile" and self.quantiles is None:
            raise ContractError("quantile loss needs a QuantileSpec")
        if self.tag != "quantile" and self.quantiles is not None:
            raise ContractError(f"{self.tag} loss takes no QuantileSpec")

    @classmethod
    def mse(cls) -> "LossKind":
        return cls("mse")

    @classmethod
    def mae(cls) -> "LossKind":
        return cls("mae")

    @classmethod
    def multi_quantile(cls, quantiles: QuantileSpec) -> "LossKind":
        return cls("quantile", quantiles)


def _check_pair(y: Tensor, y_hat: Tensor, name: str) -> None:
    if y.shape != y_hat.shape:
        raise ContractError(f"{name}: target shape {y.shape} != prediction shape {y_hat.shape}")
    if y.values.size == 0:
        raise ContractError(f"{name}: empty tensors")


def pinball(y: Tensor, y_hat: Tensor, q: float) -> Tensor:
    """Elementwise sum of max(q*e, (q-1)*e) with e = y - y_hat.

    Over-prediction of a q-quantile costs (1-q)|e|, under-prediction q|e|,
    so minimising drives y_hat toward the conditional q-quantile. No batch
    division here; callers that want one apply it themselves.
    """
    if not 0.0 < q < 1.0:
        raise ContractError(f"quantile level must lie in (0, 1), got {q}")
    _check_pair(y, y_hat, "pinball")
    e = T.sub(y, y_hat)
    return T.sum_all(T.maximum(T.scale(e, q), T.scale(e, q - 1.0)))


def multi_quantile_loss(y: Tensor, y_hat: Tensor, quantiles: QuantileSpec) -> Tensor:
    """Weighted sum of pinball losses over all levels, divided by batch size.

    ``y`` is (B, L, H, W); ``y_hat`` is (B, L*|Q|, H, W) with channels in
    lead-time-major order. Every level sees the same targets.
    """
    if y.values.ndim != 4 or y_hat.values.ndim != 4:
        raise ContractError("multi_quantile_loss needs NCHW tensors")
    nq = len(quantiles)
    if y_hat.shape[1] != y.shape[1] * nq:
        raise ContractError(
            f"prediction has {y_hat.shape[1]} channels; expected "
            f"{y.shape[1]} lead times x {nq} levels = {y.shape[1] * nq}")
    if y.shape[0] != y_hat.shape[0] or y.shape[2:] != y_hat.shape[2:]:
        raise ContractError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    batch = y.shape[0]
    if batch < 1:
        raise ContractError("multi_quantile_loss needs at least one sample")

    total: Tensor | None = None
    for q_index, (q, weight) in enumerate(zip(quantiles.levels, quantiles.weights)):
        head = extract_quantile(y_hat, q_index, quantiles)
        term = T.scale(pinball(y, head, q), weight)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / batch)


def mse_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    """Sum of squared errors divided by batch size."""
    _check_pair(y, y_hat, "mse_loss")
    if y.shape[0] < 1:
        raise ContractError("mse_loss needs at least one sample")
    e = T.sub(y, y_hat)
    return T.scale(T.sum_all(T.mul(e, e)), 1.0 / y.shape[0])


def mae_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    """Sum of absolute errors divided by batch size."""
    _check_pair(y, y_hat, "mae_loss")
    if y.shape[0] < 1:
        raise ContractError("mae_loss needs at least one sample")
    e = T.sub(y, y_hat)
    return T.scale(T.sum_all(T.absolute(e)), 1.0 / y.shape[0])


def compute_loss(kind: LossKind, y: Tensor, y_hat: Tensor) -> Tensor:
    """Dispatch on the tagged loss kind."""
    if kind.tag == "mse":
        return mse_loss(y, y_hat)
    if kind.tag == "mae":
        return mae_loss(y, y_hat)
    return multi_quantile_loss(y, y_hat, kind.quantiles)
