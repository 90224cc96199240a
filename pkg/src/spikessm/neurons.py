"""Spiking neurons: binary, integer, and signed ternary-integer variants.

Training mode quantizes activations to integers with a rectangular
surrogate gradient; inference mode expands each integer into a binary
micro-step spike train whose column sum reconstructs it exactly.
Everything here is a pure function, safe to call in parallel across
channels and sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor, apply_unary

LIF = "lif"
ILIF = "ilif"
TILIF = "tilif"
KINDS = (LIF, ILIF, TILIF)


@dataclass(frozen=True)
class NeuronConfig:
    """Neuron kind plus its amplitude bound, threshold, decay and surrogate scale.

    ``passthrough`` is a test hook: the neuron becomes the identity with
    unit gradient, which makes a spiking model arithmetically equal to
    its dense counterpart.
    """

    kind: str = TILIF
    d_max: int = 4
    v_th: float = 1.0
    beta: float = 1.0
    alpha: float = 1.0
    passthrough: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown neuron kind {self.kind!r}")
        if self.d_max < 1:
            raise ContractError("d_max must be >= 1")
        if self.kind == LIF and self.d_max != 1:
            raise ContractError("LIF implies d_max == 1")
        if self.v_th <= 0:
            raise ContractError("v_th must be positive")
        if not 0.0 < self.beta <= 1.0:
            raise ContractError("beta must be in (0, 1]")


@dataclass
class SpikeTrain:
    """Binary spikes per micro-step plus a one-bit sign flag per channel."""

    spikes: np.ndarray  # (d_max, channels) of {0, 1}
    sign: np.ndarray    # (channels,) of {+1, -1}
    meta: NeuronConfig = field(repr=False, default=NeuronConfig())

    @property
    def channels(self) -> int:
        return self.spikes.shape[1]

    @property
    def spike_count(self) -> int:
        return int(self.spikes.sum())


def quantize(cfg: NeuronConfig, x: np.ndarray) -> np.ndarray:
    """Plain-array neuron forward. Ties round half to even."""
    if cfg.passthrough:
        return x
    if cfg.kind == LIF:
        return (x - cfg.v_th >= 0.0).astype(x.dtype)
    r = np.round(x)
    lo = 0.0 if cfg.kind == ILIF else -float(cfg.d_max)
    return np.clip(r, lo, float(cfg.d_max))


def surrogate_window(cfg: NeuronConfig, x: np.ndarray) -> np.ndarray:
    """Rectangular surrogate: alpha inside the (inclusive) active range, else 0."""
    if cfg.passthrough:
        return np.ones_like(x)
    d = float(cfg.d_max)
    lo = 0.0 if cfg.kind == ILIF else -d
    return np.where((x >= lo) & (x <= d), cfg.alpha, 0.0).astype(x.dtype)


def neuron_forward(cfg: NeuronConfig, x: Tensor) -> Tensor:
    """Integer-valued spike activation with the rectangular surrogate backward."""
    return apply_unary(
        x,
        lambda d: quantize(cfg, d),
        lambda d: surrogate_window(cfg, d),
        f"neuron_{cfg.kind}",
    )


def expand_spike_train(cfg: NeuronConfig, s_int: np.ndarray) -> SpikeTrain:
    """Expand integer activations into d_max binary micro-steps.

    Runs the discrete leaky integrate-and-fire recurrence with beta=1 and
    v_th=1, injecting |s_int| once at the first micro-step. The per-channel
    spike count then equals |s_int| exactly; the sign is carried separately
    (sign of zero is +1).
    """
    s = np.asarray(s_int, dtype=np.float64).reshape(-1)
    if not np.all(s == np.round(s)):
        raise ContractError("spike-train expansion requires integer activations")
    if np.any(np.abs(s) > cfg.d_max):
        raise ContractError(
            f"activation magnitude exceeds d_max={cfg.d_max}: max |s| = {np.abs(s).max()}"
        )
    sign = np.where(s < 0, -1.0, 1.0)
    mag = np.abs(s)

    spikes = np.zeros((cfg.d_max, s.size), dtype=np.uint8)
    v = np.zeros_like(mag)
    prev = np.zeros_like(mag)
    v_th = 1.0
    for i in range(cfg.d_max):
        inject = mag if i == 0 else 0.0
        v = 1.0 * (v - v_th * prev) + inject  # beta = 1: exact reconstruction
        fired = v - v_th >= 0.0
        spikes[i] = fired
        prev = fired.astype(mag.dtype)
    return SpikeTrain(spikes=spikes, sign=sign, meta=cfg)


def collapse_spike_train(train: SpikeTrain) -> np.ndarray:
    """Inverse of expansion: signed column sums recover the integer activations."""
    return train.sign * train.spikes.sum(axis=0)
