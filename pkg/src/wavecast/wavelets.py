"""Mother wavelets, sampled convolution kernels and a truncated-support CWT."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ArgumentError, ConfigError

MORLET = "morlet"
MEXICAN_HAT = "mexican_hat"
KINDS = (MORLET, MEXICAN_HAT)

_MEXHAT_NORM = 2.0 / (math.sqrt(3.0) * math.pi ** 0.25)
_MORLET_NORM = math.pi ** -0.25


@dataclass(frozen=True)
class MotherWavelet:
    kind: str = MORLET
    omega0: float = 6.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown wavelet {self.kind!r}; choose from {KINDS}")

    def __call__(self, t):
        return evaluate(self, t)

    def spec(self) -> dict:
        return {"kind": self.kind, "omega0": self.omega0}


def evaluate(wavelet: MotherWavelet, t):
    """Real-valued wavelet value at ``t`` (scalar or array).

    The Morlet is the real part without the admissibility correction term,
    which is below 1e-7 at omega0 = 6.
    """
    t = np.asarray(t, dtype=np.float64)
    envelope = np.exp(-0.5 * t * t)
    if wavelet.kind == MEXICAN_HAT:
        out = _MEXHAT_NORM * (1.0 - t * t) * envelope
    else:
        out = _MORLET_NORM * np.cos(wavelet.omega0 * t) * envelope
    return float(out) if out.ndim == 0 else out


def sample_kernel(wavelet: MotherWavelet, k: int, support: float = 2.0) -> np.ndarray:
    """``k`` samples spanning [-support, support], scaled to unit L2 norm."""
    if k < 2:
        raise ArgumentError(f"kernel length must be >= 2, got {k}")
    if not support > 0:
        raise ArgumentError(f"support must be positive, got {support}")
    values = evaluate(wavelet, np.linspace(-support, support, k))
    norm = np.linalg.norm(values)
    if norm < 1e-12:
        raise ArgumentError(f"{wavelet.kind} sampled at k={k}, support={support} is identically zero")
    return values / norm


def filter_supports(count: int, support: float) -> np.ndarray:
    """Geometrically spaced sampling supports centred (in log space) on ``support``.

    Cell midpoints of [support/2, 2*support] are used so the grid never lands
    on support=1, where a 2-tap Mexican hat would vanish.
    """
    exponents = (np.arange(count) + 0.5) / count * 2.0 - 1.0
    return support * 2.0 ** exponents


@dataclass
class WaveletKernelBank:
    """Frozen wavelet filters per (wavelet index, kernel length).

    ``kernels[(m, k)]`` has shape ``(n_vars * filters_per_length, k)``; rows
    ``v*Z .. v*Z+Z-1`` belong to input variable ``v`` (depthwise layout).
    """

    wavelets: tuple
    max_length: int
    n_vars: int
    filters_per_length: int
    support: float = 2.0
    kernels: dict = field(default_factory=dict, repr=False)

    @property
    def lengths(self):
        return list(range(2, self.max_length + 1))

    def spec(self) -> dict:
        return {
            "wavelets": [w.spec() for w in self.wavelets],
            "max_length": self.max_length,
            "n_vars": self.n_vars,
            "filters_per_length": self.filters_per_length,
            "support": self.support,
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "WaveletKernelBank":
        return build_bank([MotherWavelet(**w) for w in spec["wavelets"]], spec["max_length"],
                          spec["n_vars"], spec["filters_per_length"], spec["support"])

    def conv_weights(self, m: int, k: int) -> np.ndarray:
        """Kernel for a grouped conv1d with ``groups = n_vars``: shape (N*Z, 1, k)."""
        try:
            rows = self.kernels[(m, k)]
        except KeyError:
            raise ConfigError(f"wavelet bank has no kernel for wavelet {m}, length {k}") from None
        return rows[:, None, :]


def build_bank(wavelets, max_length: int, n_vars: int, filters_per_length: int,
               support: float = 2.0) -> WaveletKernelBank:
    wavelets = tuple(wavelets)
    if max_length < 2:
        raise ConfigError("max kernel length d must be >= 2")
    if filters_per_length < 1 or not wavelets:
        raise ConfigError("need at least one wavelet and one filter per length")
    bank = WaveletKernelBank(wavelets, max_length, n_vars, filters_per_length, support)
    supports = filter_supports(filters_per_length, support)
    for m, wavelet in enumerate(wavelets):
        for k in bank.lengths:
            rows = np.stack([sample_kernel(wavelet, k, s) for s in supports])
            bank.kernels[(m, k)] = np.tile(rows, (n_vars, 1))
    return bank


def default_scales(count: int = 8) -> list[float]:
    return [2.0 ** (j / 2.0) for j in range(1, count + 1)]


@lru_cache(maxsize=64)
def _cwt_operator(length, scales, kind, omega0, support):
    wavelet = MotherWavelet(kind, omega0)
    offsets = np.arange(length)[None, :] - np.arange(length)[:, None]  # [t, u] = u - t
    ops = np.zeros((len(scales), length, length))
    for j, a in enumerate(scales):
        x = offsets / a
        inside = np.abs(x) <= support
        psi = np.where(inside, evaluate(wavelet, x), 0.0)
        # re-centre each column's truncated taps to zero sum so constants map to 0
        count = inside.sum(axis=1, keepdims=True)
        psi = np.where(inside, psi - psi.sum(axis=1, keepdims=True) / count, 0.0)
        ops[j] = psi / math.sqrt(a)
    ops.setflags(write=False)
    return ops


def cwt(series, scales, wavelet: MotherWavelet = MotherWavelet(), support: float = 4.0) -> np.ndarray:
    """Continuous wavelet transform of ``series[..., T]`` -> ``[..., J, T]``.

    W[j, t] = a_j^{-1/2} * sum_u x[u] * psi((u - t) / a_j), summed over taps with
    |u - t| / a_j <= support.  Taps that fall outside the series are dropped (no
    padding), and each column's remaining taps are shifted to zero sum.
    """
    series = np.asarray(series, dtype=np.float64)
    scales = tuple(float(a) for a in scales)
    if any(not a > 0 for a in scales):
        raise ArgumentError(f"scales must be positive, got {scales}")
    if any(a < 1 for a in scales):
        raise ArgumentError(f"scales must be >= 1, got {scales}")
    if series.shape[-1] < 4:
        raise ArgumentError("cwt needs at least 4 samples")
    ops = _cwt_operator(series.shape[-1], scales, wavelet.kind, wavelet.omega0, float(support))
    # [..., T] x [J, t, u] -> [..., J, t]
    return np.einsum("...u,jtu->...jt", series, ops, optimize=True)


@dataclass
class CwtScalogram:
    coefficients: np.ndarray  # (N, J, T)
    scales: list


def scalogram(x_tr, scales, wavelet: MotherWavelet = MotherWavelet(), support: float = 4.0) -> CwtScalogram:
    """CWT of every row of an ``(N, T)`` matrix."""
    x_tr = np.asarray(x_tr, dtype=np.float64)
    return CwtScalogram(cwt(x_tr, scales, wavelet, support), list(scales))
