"""Local-temporal branch: multi-wavelet kernel convolution and its conv blocks.

Each input variable is convolved (stride 1, no padding) with frozen wavelet
filters of every length k in 2..d.  The per-wavelet responses are mixed with
learnable scalars alpha, then passed through a grouped conv block that keeps
each output channel tied to a single input variable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ShapeError
from .wavelets import WaveletKernelBank


@dataclass(frozen=True)
class MwkcConfig:
    max_length: int = 6          # d
    filters_per_length: int = 8  # Z_k
    block_kernel: int = 3
    block_channels: int = 4      # output channels per input variable
    time_bins: int = 4           # 1 gives global average pooling
    alpha_per_length: bool = False

    def validate(self, T: int, n_wavelets: int):
        if self.max_length < 2:
            raise ConfigError("max kernel length d must be >= 2")
        if self.max_length > T:
            raise ConfigError(f"max kernel length d={self.max_length} exceeds window length T={T}")
        if self.filters_per_length % n_wavelets:
            raise ConfigError(f"Z_k={self.filters_per_length} is not divisible by M={n_wavelets}")
        width = T - self.max_length + 1
        if self.block_kernel > width:
            raise ConfigError(f"block kernel {self.block_kernel} longer than narrowest branch ({width})")
        if not 1 <= self.time_bins <= width - self.block_kernel + 1:
            raise ConfigError(f"time_bins={self.time_bins} out of range for T={T}")

    @property
    def lengths(self):
        return list(range(2, self.max_length + 1))

    def feature_length(self, n_vars: int) -> int:
        return len(self.lengths) * n_vars * self.block_channels * self.time_bins


def init_params(config: MwkcConfig, n_vars: int, n_wavelets: int, rng) -> dict[str, np.ndarray]:
    """Fresh LT parameters; alpha starts at 1/M."""
    params = {}
    if config.alpha_per_length:
        for k in config.lengths:
            params[f"lt.alpha.k{k}"] = np.full(n_wavelets, 1.0 / n_wavelets)
    else:
        params["lt.alpha"] = np.full(n_wavelets, 1.0 / n_wavelets)
    fan_in = config.filters_per_length * config.block_kernel
    for k in config.lengths:
        shape = (n_vars * config.block_channels, config.filters_per_length, config.block_kernel)
        params[f"lt.kernel.k{k}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        params[f"lt.bias.k{k}"] = np.zeros(n_vars * config.block_channels)
    return params


def wavelet_responses(x_tr: np.ndarray, bank: WaveletKernelBank, k: int) -> np.ndarray:
    """Frozen-bank responses for length ``k``: (M, ..., N*Z, T-k+1).

    The bank never trains, so these are plain arrays; only alpha and the conv
    blocks downstream carry gradients.
    """
    x_tr = np.asarray(x_tr, dtype=np.float64)
    if x_tr.shape[-2] != bank.n_vars:
        raise ShapeError(f"input has {x_tr.shape[-2]} variables, bank built for {bank.n_vars}")
    return np.stack([tc._Conv1d.forward(x_tr, bank.conv_weights(m, k), 1, bank.n_vars)
                     for m in range(len(bank.wavelets))])


def mwkc_forward(graph: tc.Graph, x_tr: np.ndarray, bank: WaveletKernelBank, alphas,
                 lengths=None) -> dict[int, tc.Node]:
    """Fused multi-wavelet maps ``{k: sum_m alpha_m * (Psi_m^(k) * X)}``.

    ``alphas`` is a single parameter node shared by every k, or a dict k -> node.
    """
    lengths = bank.lengths if lengths is None else list(lengths)
    if lengths and max(lengths) > np.shape(x_tr)[-1]:
        raise ShapeError(f"kernel length {max(lengths)} exceeds input length {np.shape(x_tr)[-1]}")
    fused = {}
    for k in lengths:
        alpha = alphas[k] if isinstance(alphas, dict) else alphas
        branches = graph.const(wavelet_responses(x_tr, bank, k))
        fused[k] = tc.weighted_sum(alpha, branches, name=f"lt.fused.k{k}")
    return fused


def lt_feature_extract(fused: dict[int, tc.Node], kernels: dict, biases: dict, n_vars: int,
                       bins: int = 1) -> tc.Node:
    """Grouped conv block + relu per branch, time-bin pooling, concatenation over k.

    Output shape is (..., sum_k C_out * bins), independent of T.  The post-relu
    activation of branch k is recorded as ``lt.block.k{k}``.
    """
    if not fused:
        raise ShapeError("no fused maps supplied")
    feats = []
    for k, f in sorted(fused.items()):
        w = kernels[k]
        if w.shape[-1] > f.shape[-1]:
            raise ShapeError(f"block kernel {w.shape[-1]} longer than branch k={k} width {f.shape[-1]}")
        a = tc.conv1d(f, w, groups=n_vars)
        a = tc.relu(tc.channel_bias(a, biases[k]), name=f"lt.block.k{k}")
        pooled = tc.bin_pool(a, bins)
        feats.append(tc.reshape(pooled, pooled.shape[:-2] + (-1,)))
    return feats[0] if len(feats) == 1 else tc.concat(feats, axis=-1)
