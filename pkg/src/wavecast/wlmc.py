"""Cross-variable dynamic wavelet correlation (CV-DWCC).

For every subset of at least two input variables, the wavelet local multiple
correlation (WLMC) measures, per CWT scale and time step, how well the
best-explained member is predicted by the remaining members under a
Gaussian time window.  The coefficient map ``C`` and the dominant-member map
``D`` form a two-channel image per subset, which a shared 2D conv block turns
into features.

The WLMC stage is deterministic preprocessing: no gradients flow through it.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as tc
from .errors import ArgumentError, ShapeError
from .wavelets import MotherWavelet, cwt

RIDGE = 1e-8
TIE_TOL = 1e-10
_DEGENERATE_REL = 1e-14


def local_weight_window(s: int, h: float, T: int) -> np.ndarray:
    """Gaussian weights centred on (0-based) step ``s``, summing to one over 0..T-1."""
    if not h > 0:
        raise ArgumentError(f"bandwidth must be positive, got {h}")
    if not 0 <= s < T:
        raise ArgumentError(f"centre {s} outside 0..{T - 1}")
    t = np.arange(T)
    w = np.exp(-((t - s) ** 2) / (2.0 * h * h))
    return w / w.sum()


def weight_matrix(T: int, h: float) -> np.ndarray:
    """Row ``s`` is ``local_weight_window(s, h, T)``."""
    return np.stack([local_weight_window(s, h, T) for s in range(T)])


class LocalFit(NamedTuple):
    fitted: np.ndarray
    r2: float
    degenerate: bool = False
    ridge: bool = False


def local_multiple_regression(target, regressors, weights) -> LocalFit:
    """Weighted linear regression with intercept of ``target`` on ``regressors``.

    ``regressors`` has shape (p, T).  Returns the fitted values and the local
    coefficient of determination clamped to [0, 1].  A target with zero
    weighted variance yields r2 = 0 and ``degenerate=True``; rank-deficient
    designs are solved with a small ridge and flagged.
    """
    y = np.asarray(target, dtype=np.float64)
    R = np.atleast_2d(np.asarray(regressors, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if R.shape[0] < 1 or R.shape[1] != y.shape[0] or w.shape != y.shape:
        raise ShapeError(f"target {y.shape}, regressors {R.shape}, weights {w.shape}")
    A = np.column_stack([np.ones_like(y), R.T])
    ybar = np.dot(w, y) / w.sum()
    sst = np.dot(w, (y - ybar) ** 2)
    sqw = np.sqrt(w)
    rank = np.linalg.matrix_rank(A * sqw[:, None])
    ridge = rank < A.shape[1]
    if ridge:
        normal = A.T @ (w[:, None] * A) + RIDGE * np.eye(A.shape[1])
        beta = np.linalg.solve(normal, A.T @ (w * y))
    else:
        beta = np.linalg.lstsq(A * sqw[:, None], y * sqw, rcond=None)[0]
    fitted = A @ beta
    if sst <= _DEGENERATE_REL * np.dot(w, y * y) or sst == 0.0:
        return LocalFit(fitted, 0.0, True, ridge)
    r2 = 1.0 - np.dot(w, (fitted - y) ** 2) / sst
    return LocalFit(fitted, float(min(max(r2, 0.0), 1.0)), False, ridge)


def _pick_dominant(r2):
    """Index of the maximal entry along the last axis; near-ties go to the lowest index."""
    r2 = np.asarray(r2)
    best = r2.max(axis=-1, keepdims=True)
    return np.argmax(r2 >= best - TIE_TOL, axis=-1)


def wlmc(coeffs, s: int, j: int, h: float, members=None) -> tuple[float, int]:
    """WLMC coefficient and dominant member at scale ``j`` and step ``s``.

    ``coeffs`` holds the CWT coefficients of the combination's members with
    shape (q, J, T).  ``members`` maps rows to variable indices (defaults to
    0..q-1) and determines the returned dominant index.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    q, _, T = coeffs.shape
    if q < 2:
        raise ArgumentError("a combination needs at least two members")
    members = list(range(q)) if members is None else list(members)
    weights = local_weight_window(s, h, T)
    series = coeffs[:, j, :]
    r2 = np.array([
        local_multiple_regression(series[i], np.delete(series, i, axis=0), weights).r2
        for i in range(q)
    ])
    i_star = int(_pick_dominant(r2))
    return float(np.sqrt(r2[i_star])), members[i_star]


def combinations(n_vars: int) -> list[tuple[int, ...]]:
    """All subsets of size >= 2, in lexicographic order of their sorted members."""
    if n_vars < 2:
        raise ArgumentError(f"need at least two variables, got {n_vars}")
    subsets = [c for r in range(2, n_vars + 1) for c in itertools.combinations(range(n_vars), r)]
    return sorted(subsets)


@dataclass
class WlmcTensor:
    C: np.ndarray  # (..., P, J, T) WLMC coefficients in [0, 1]
    D: np.ndarray  # (..., P, J, T) dominant index scaled to [0, 1]
    combos: list
    n_vars: int

    @property
    def n_combinations(self):
        return len(self.combos)

    def dominant_index(self):
        """Integer (0-based) dominant variable per entry."""
        return np.rint(self.D * (self.n_vars - 1)).astype(int)


def _weighted_cov(coeffs, theta):
    """Local weighted covariance, coeffs (B, N, J, T) -> (B, J, T_s, N, N)."""
    mean = np.einsum("st,bnjt->bnjs", theta, coeffs)
    dev = coeffs[:, :, :, None, :] - mean[..., None]  # (B, N, J, s, t)
    weighted = dev * theta
    return np.einsum("bnjst,bmjst->bjsnm", weighted, dev, optimize=True), np.einsum(
        "st,bnjt->bjsn", theta, coeffs * coeffs)


def _explained_fraction(cov, regressors, target, dep_tol=1e-10):
    """Share of the target's local variance explained by linear regression on ``regressors``.

    Gaussian elimination on the covariance (a Schur-complement sweep),
    vectorised over all leading axes.  A regressor whose remaining variance
    falls below ``dep_tol`` of its own variance is linearly dependent on the
    ones before it and is skipped, which yields the minimum-norm projection
    just like a pseudo-inverse would.
    """
    order = list(regressors) + [target]
    q = len(order)
    S = [[cov[..., a, b] for b in order] for a in order]
    for k in range(q - 1):
        piv = S[k][k]
        ok = piv > dep_tol * cov[..., order[k], order[k]]
        inv = np.where(ok, 1.0 / np.where(ok, piv, 1.0), 0.0)
        for a in range(k + 1, q):
            f = S[a][k] * inv
            for b in range(a, q):
                S[a][b] = S[a][b] - f * S[k][b]
                S[b][a] = S[a][b]
    var = cov[..., target, target]
    return 1.0 - S[q - 1][q - 1] / np.where(var > 0, var, 1.0)


def _r2_tables(cov, raw2, n_vars):
    """r2[(target, regressor-subset)] over every batch/scale/time entry."""
    var = np.diagonal(cov, axis1=-2, axis2=-1)
    degenerate = var <= _DEGENERATE_REL * raw2
    out = {}
    for r in range(1, n_vars):
        for subset in itertools.combinations(range(n_vars), r):
            for target in range(n_vars):
                if target in subset:
                    continue
                r2 = np.clip(_explained_fraction(cov, subset, target), 0.0, 1.0)
                out[(target, subset)] = np.where(degenerate[..., target], 0.0, r2)
    return out


def build_wlmc_tensor(x_tr, scales, h: float = 8.0, wavelet: MotherWavelet = MotherWavelet(),
                      support: float = 4.0, chunk: int = 128) -> WlmcTensor:
    """WLMC tensor for one window ``(N, T)`` or a batch ``(B, N, T)``.

    Each variable's CWT is computed exactly once (batched over windows).
    """
    x = np.asarray(x_tr, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    B, N, T = x.shape
    combos = combinations(N)
    coeffs = np.stack([cwt(x[:, n, :], scales, wavelet, support) for n in range(N)], axis=1)
    theta = weight_matrix(T, h)
    J = len(scales)
    C = np.empty((B, len(combos), J, T))
    D = np.empty((B, len(combos), J, T))
    for lo in range(0, B, chunk):
        cov, raw2 = _weighted_cov(coeffs[lo:lo + chunk], theta)
        table = _r2_tables(cov, raw2, N)
        for p, combo in enumerate(combos):
            r2 = np.stack([table[(i, tuple(m for m in combo if m != i))] for i in combo], axis=-1)
            pick = _pick_dominant(r2)
            best = np.take_along_axis(r2, pick[..., None], axis=-1)[..., 0]
            C[lo:lo + chunk, p] = np.sqrt(best)
            D[lo:lo + chunk, p] = np.asarray(combo)[pick] / (N - 1)
    if single:
        C, D = C[0], D[0]
    return WlmcTensor(C, D, combos, N)


class WlmcCache:
    """Per-window WLMC results keyed by a content hash of the window and settings."""

    def __init__(self):
        self._store: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(window, settings) -> str:
        digest = hashlib.sha1(np.ascontiguousarray(window, dtype=np.float64).tobytes())
        digest.update(repr(settings).encode())
        return digest.hexdigest()

    def get(self, key):
        return self._store.get(key)

    def put(self, key, value):
        with self._lock:
            self._store[key] = value

    def __len__(self):
        return len(self._store)


def build_wlmc_batch(windows, scales, h: float = 8.0, wavelet: MotherWavelet = MotherWavelet(),
                     support: float = 4.0, cache: WlmcCache | None = None) -> WlmcTensor:
    """Batched ``build_wlmc_tensor`` over ``(B, N, T)`` windows, reusing cached windows."""
    windows = np.asarray(windows, dtype=np.float64)
    if cache is None:
        return build_wlmc_tensor(windows, scales, h, wavelet, support)
    settings = (tuple(scales), h, wavelet.kind, wavelet.omega0, support)
    keys = [WlmcCache.key(w, settings) for w in windows]
    missing = [i for i, k in enumerate(keys) if cache.get(k) is None]
    cache.hits += len(keys) - len(missing)
    cache.misses += len(missing)
    if missing:
        fresh = build_wlmc_tensor(windows[missing], scales, h, wavelet, support)
        for row, i in enumerate(missing):
            cache.put(keys[i], (fresh.C[row], fresh.D[row]))
    C = np.stack([cache.get(k)[0] for k in keys])
    D = np.stack([cache.get(k)[1] for k in keys])
    return WlmcTensor(C, D, combinations(windows.shape[1]), windows.shape[1])


def cv_input(tensors: WlmcTensor, onehot: bool = False) -> np.ndarray:
    """Stack ``[C || D]`` into conv2d channels: (..., P, 2, J, T), or (..., P, 1+N, J, T) one-hot."""
    if not onehot:
        return np.stack([tensors.C, tensors.D], axis=-3)
    idx = tensors.dominant_index()
    planes = [(idx == n).astype(np.float64) for n in range(tensors.n_vars)]
    return np.stack([tensors.C] + planes, axis=-3)


def cv_dwcc_forward(graph: tc.Graph, images: tc.Node, kernel: tc.Node, bias: tc.Node,
                    bins: int = 1, name: str = "cv.block") -> tc.Node:
    """Shared 2D conv + relu over every combination image, pooled and flattened.

    ``images`` has shape (B, P, channels, J, T); the result has shape
    (B, P * C_out * bins).  The post-relu activation is recorded under ``name``.
    """
    B, P, ch, J, T = images.shape
    if kernel.shape[2] > J or kernel.shape[3] > T:
        raise ShapeError(f"CV kernel {kernel.shape[2:]} exceeds WLMC map {(J, T)}")
    x = tc.reshape(images, (B * P, ch, J, T))
    a = tc.relu(tc.channel_bias(tc.conv2d(x, kernel), bias, spatial=2), name=name)
    pooled = tc.mean(tc.bin_pool(a, bins), axis=2)  # (B*P, C_out, bins)
    return tc.reshape(pooled, (B, P * kernel.shape[0] * bins))


def dump_wlmc_csv(tensors: WlmcTensor, out_dir, names=None):
    """Write each combination's C and D maps as J x T CSV matrices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = names or [f"v{i}" for i in range(tensors.n_vars)]
    if tensors.C.ndim != 3:
        raise ShapeError("dump expects a single-window tensor (P, J, T)")
    paths = []
    for p, combo in enumerate(tensors.combos):
        tag = "-".join(names[i] for i in combo)
        for label, arr in (("C", tensors.C[p]), ("D", tensors.D[p])):
            path = out_dir / f"wlmc_{label}_{tag}.csv"
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in arr])
            paths.append(path)
    return paths
