"""Fake-quantization sites: range observers, STE variants, integer codecs.

A QuantModule owns the running range of one tensor site and derives the
affine (scale, zero_point) mapping onto the integer grid.  Rounding is
half-to-even everywhere so results are reproducible across languages.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, TrainDiverged

Array = np.ndarray

OBSERVERS = ("minmax", "momentum", "percentile")
STE_MODES = ("vanilla", "grad_clip")


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 8
    signed: bool = False
    symmetric: bool = False          # weights: symmetric signed, z = 0
    ste: str = "vanilla"
    observer: str = "minmax"
    momentum: float = 0.01
    percentile: float = 0.001

    def __post_init__(self):
        if self.observer not in OBSERVERS:
            raise ConfigError(f"unknown observer {self.observer!r}")
        if self.ste not in STE_MODES:
            raise ConfigError(f"unknown ste mode {self.ste!r}")
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigError("momentum must lie in (0, 1]")
        if not 0.0 < self.percentile < 0.5:
            raise ConfigError("percentile fraction must lie in (0, 0.5)")
        if self.symmetric and not self.signed:
            raise ConfigError("symmetric quantization requires a signed grid")

    @property
    def q_range(self) -> tuple[int, int]:
        if self.signed:
            return -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        return 0, 2 ** self.bits - 1

    @property
    def bypass(self) -> bool:
        # "32-bit" sites are identity pass-throughs
        return self.bits >= 32


def weight_config(bits: int, ste: str = "vanilla", observer: str = "minmax",
                  **kw) -> QuantConfig:
    return QuantConfig(bits=bits, signed=True, symmetric=True, ste=ste,
                       observer=observer, **kw)


def activation_config(bits: int, ste: str = "vanilla", observer: str = "minmax",
                      **kw) -> QuantConfig:
    return QuantConfig(bits=bits, signed=False, symmetric=False, ste=ste,
                       observer=observer, **kw)


class QuantModule:
    """Observer state plus derived quantization parameters for one site."""

    def __init__(self, config: QuantConfig, name: str = ""):
        self.config = config
        self.name = name
        self.x_min = 0.0
        self.x_max = 0.0
        self.initialized = False

    # -- range tracking ------------------------------------------------

    def observe(self, values: Array):
        """Update the running range from one training-time tensor."""
        if self.config.bypass:
            return
        values = np.asarray(values)
        if values.size == 0:
            return
        if self.config.observer == "percentile":
            frac = self.config.percentile
            lo, hi = np.quantile(values, [frac, 1.0 - frac])
        else:
            lo, hi = values.min(), values.max()
        lo, hi = float(lo), float(hi)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise TrainDiverged(-1, self.name or "quant site")
        if not self.initialized:
            self.x_min, self.x_max = lo, hi
            self.initialized = True
        elif self.config.observer == "momentum":
            c = self.config.momentum
            self.x_min = (1.0 - c) * self.x_min + c * lo
            self.x_max = (1.0 - c) * self.x_max + c * hi
        else:
            # minmax rule; percentile feeds its batch percentiles through it
            self.x_min = min(self.x_min, lo)
            self.x_max = max(self.x_max, hi)

    # -- derived parameters ---------------------------------------------

    def qparams(self) -> tuple[float, int, int, int]:
        """(scale, zero_point, q_min, q_max) for the current range."""
        if self.config.bypass:
            return 1.0, 0, -(2**31), 2**31 - 1
        if not self.initialized:
            raise ContractError(f"quant site {self.name!r} used before any observation")
        q_min, q_max = self.config.q_range
        if self.config.symmetric:
            bound = max(abs(self.x_min), abs(self.x_max))
            if bound == 0.0:
                return 1.0, 0, q_min, q_max
            return bound / q_max, 0, q_min, q_max
        if self.x_max <= self.x_min:
            return 1.0, 0, q_min, q_max
        scale = (self.x_max - self.x_min) / (q_max - q_min)
        zp = int(np.clip(np.rint(q_min - self.x_min / scale), q_min, q_max))
        return scale, zp, q_min, q_max

    # -- codecs ----------------------------------------------------------

    def quantize_array(self, values: Array) -> Array:
        """Real values -> clamped integer grid (the forward rounding)."""
        s, z, q_min, q_max = self.qparams()
        q = np.clip(np.rint(values / np.float32(s) + np.float32(z)), q_min, q_max)
        return q

    def fake_quantize_array(self, values: Array) -> Array:
        s, z, _, _ = self.qparams()
        return ((self.quantize_array(values) - np.float32(z)) * np.float32(s)).astype(np.float32)

    def integer_quantize(self, values: Array) -> Array:
        q = self.quantize_array(values)
        dtype = np.int8 if self.config.signed else np.uint8
        if self.config.bits > 8:
            dtype = np.int32
        return q.astype(dtype)

    def dequantize(self, q: Array) -> Array:
        s, z, _, _ = self.qparams()
        return ((q.astype(np.float32) - np.float32(z)) * np.float32(s)).astype(np.float32)

    # -- checkpoint support ----------------------------------------------

    def state(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "initialized": self.initialized}

    def load_state(self, state: dict):
        self.x_min = float(state["x_min"])
        self.x_max = float(state["x_max"])
        self.initialized = bool(state["initialized"])


def fake_quantize(x: T.Tensor, qm: QuantModule, observe: bool = False) -> T.Tensor:
    """Tape-aware fake quantization with the configured STE backward.

    observe=True updates the running range from x first (training mode);
    eval paths leave the observer frozen.
    """
    if qm.config.bypass:
        return x
    if observe:
        qm.observe(x.data)
    s, z, q_min, q_max = qm.qparams()
    grid = x.data / np.float32(s) + np.float32(z)
    clamped = np.clip(np.rint(grid), q_min, q_max)
    out = T.Tensor((clamped - np.float32(z)) * np.float32(s))
    if T.Tape._active is not None and x.requires_grad:
        if qm.config.ste == "grad_clip":
            inside = (grid >= q_min) & (grid <= q_max)
            def bw(g: Array):
                x.accumulate(g * inside)
        else:
            def bw(g: Array):
                x.accumulate(g)
        T.Tape._active.record(out, bw)
    return out
