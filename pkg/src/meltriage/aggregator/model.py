"""Public aggregator operations: forward prediction, loss with exact
analytic gradients, attention extraction, and ensemble averaging.

Probabilities and attention renormalization are always computed in 64-bit
from the kernel outputs, whatever precision the parameters use.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from ..errors import NumericError, ValidationError
from ..records import FeatureBag, Label
from .config import AggregatorConfig
from .kernels import forward_kernel, loss_grad_kernel
from .params import LN_EPS, ParamLayout

_GELU_C1 = math.sqrt(2.0 / math.pi)
_GELU_C2 = 0.044715


@dataclass
class Prediction:
    logits: np.ndarray      # (2,) float64: [low, high]
    prob_high: float
    attention: np.ndarray   # (n_tiles,) float64, non-negative, sums to 1


@functools.lru_cache(maxsize=None)
def _layout(config: AggregatorConfig) -> ParamLayout:
    return ParamLayout(config)


@functools.lru_cache(maxsize=None)
def _offsets(config: AggregatorConfig) -> np.ndarray:
    return _layout(config).offsets_array()


def _consts(config: AggregatorConfig, dtype) -> np.ndarray:
    p = config.attention_dropout_p
    inv_keep = 1.0 / (1.0 - p) if p > 0.0 else 1.0
    return np.array(
        [
            LN_EPS,
            1.0 / math.sqrt(config.head_dim),
            inv_keep,
            1.0,
            0.5,
            _GELU_C1,
            _GELU_C2,
            1.0 / config.model_dim,
            3.0 * _GELU_C2,
            1.0 / config.n_heads,
        ],
        dtype=dtype,
    )


def _as_features(config: AggregatorConfig, bag_or_feats, dtype) -> np.ndarray:
    feats = (
        bag_or_feats.vectors
        if isinstance(bag_or_feats, FeatureBag)
        else np.asarray(bag_or_feats)
    )
    if feats.ndim != 2:
        raise ValidationError(f"features must be 2-D, got {feats.ndim}-D")
    if feats.shape[0] < 1:
        raise ValidationError("a bag needs at least one tile")
    if feats.shape[1] != config.feature_dim:
        raise ValidationError(
            f"feature dimension {feats.shape[1]} does not match "
            f"configured {config.feature_dim}"
        )
    return np.ascontiguousarray(feats, dtype=dtype)


def _check_params(config: AggregatorConfig, params: np.ndarray) -> None:
    size = _layout(config).size
    if params.ndim != 1 or params.shape[0] != size:
        raise ValidationError(
            f"parameter vector has shape {params.shape}, layout needs ({size},)"
        )


def _dropout_state(
    config: AggregatorConfig, n_tiles: int, rng, dtype
) -> tuple[np.ndarray, bool]:
    p = config.attention_dropout_p
    if rng is None or p == 0.0:
        return np.zeros((0, 0, 0, 0), dtype=dtype), False
    S = n_tiles + 1
    keep = rng.random((config.n_layers, config.n_heads, S, S)) >= p
    return keep.astype(dtype), True


def _raise_numeric(flags: np.ndarray, n_layers: int, what: str) -> None:
    bad = np.flatnonzero(flags == 0)
    if bad.size == 0:
        return
    stage = int(bad[0])
    if stage == 0:
        raise NumericError(f"{what}: non-finite values after embedding", -1)
    if stage == n_layers + 1:
        raise NumericError(
            f"{what}: non-finite values in final norm or head", n_layers
        )
    raise NumericError(
        f"{what}: non-finite values after transformer block {stage - 1}", stage - 1
    )


def forward(
    params: np.ndarray,
    config: AggregatorConfig,
    bag_or_feats,
    rng: np.random.Generator | None = None,
) -> Prediction:
    """Run the classifier on one bag.

    Without ``rng`` the pass is deterministic evaluation mode. With ``rng``
    (and a nonzero configured rate) attention dropout is sampled from it.
    """
    _check_params(config, params)
    feats = _as_features(config, bag_or_feats, params.dtype)
    mask, use_dropout = _dropout_state(config, feats.shape[0], rng, params.dtype)
    logits, attn, _, flags = forward_kernel(
        params,
        _offsets(config),
        feats,
        config.n_layers,
        config.n_heads,
        config.model_dim,
        config.hidden_dim,
        config.n_classes,
        _consts(config, params.dtype),
        mask,
        use_dropout,
    )
    _raise_numeric(flags, config.n_layers, "forward")
    logits64 = logits.astype(np.float64)
    shifted = logits64 - logits64.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    attn64 = attn.astype(np.float64)
    attn64 /= attn64.sum()
    return Prediction(
        logits=logits64, prob_high=float(probs[1]), attention=attn64
    )


def _label_index(label) -> int:
    if isinstance(label, Label):
        return 1 if label is Label.HIGH else 0
    if label in (0, 1):
        return int(label)
    raise ValidationError(f"label must be Label or 0/1, got {label!r}")


def loss_and_grad(
    params: np.ndarray,
    config: AggregatorConfig,
    bag_or_feats,
    label,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """Cross-entropy of the true class and its exact gradient.

    With ``rng``, one attention-dropout mask is sampled and shared by the
    forward and backward passes, so the gradient is exact for the sampled
    network.
    """
    _check_params(config, params)
    feats = _as_features(config, bag_or_feats, params.dtype)
    mask, use_dropout = _dropout_state(config, feats.shape[0], rng, params.dtype)
    grad = np.zeros_like(params)
    loss, flags = loss_grad_kernel(
        params,
        _offsets(config),
        feats,
        _label_index(label),
        config.n_layers,
        config.n_heads,
        config.model_dim,
        config.hidden_dim,
        config.n_classes,
        _consts(config, params.dtype),
        mask,
        use_dropout,
        grad,
    )
    _raise_numeric(flags, config.n_layers, "loss_and_grad")
    if not (np.isfinite(loss) and np.isfinite(grad).all()):
        raise NumericError("loss_and_grad: non-finite loss or gradient", -1)
    return float(loss), grad


def eval_loss(params: np.ndarray, config: AggregatorConfig, bag_or_feats, label) -> float:
    """Deterministic cross-entropy under evaluation mode, computed from the
    logits in 64-bit (stable for magnitudes up to at least 1e4)."""
    pred = forward(params, config, bag_or_feats)
    z = pred.logits
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    return float(lse - z[_label_index(label)])


def attention_weights(
    params: np.ndarray, config: AggregatorConfig, bag_or_feats
) -> np.ndarray:
    """Final-layer class-token attention, head-averaged and renormalized."""
    return forward(params, config, bag_or_feats).attention


def ensemble_predict(
    params_list: list[np.ndarray], config: AggregatorConfig, bag_or_feats
) -> float:
    """Arithmetic mean of member probabilities."""
    if not params_list:
        raise ValidationError("ensemble needs at least one member")
    probs = [forward(p, config, bag_or_feats).prob_high for p in params_list]
    return float(np.mean(probs))
