"""Grad-CAM saliency over the convolutional activations of a trained model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .data import VARIABLES
from .errors import ArgumentError, StateError
from .model import WavecastModel
from .wlmc import combinations


@dataclass
class SaliencyMap:
    values: np.ndarray  # (rows, T), non-negative, max 1 unless all zero
    layer: str
    target: str
    labels: list = field(default_factory=list)

    def to_csv(self, path, comment: str | None = None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(f"# layer={self.layer}\n# target={self.target}\n")
            if comment:
                for line in comment.splitlines():
                    fh.write(f"# {line}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["variable"] + [f"t{t + 1}" for t in range(self.values.shape[1])])
            for label, row in zip(self.labels, self.values):
                writer.writerow([label] + [repr(float(v)) for v in row])
        return path

    @classmethod
    def from_csv(cls, path) -> "SaliencyMap":
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        meta = dict(line[2:].split("=", 1) for line in lines[:2] if line.startswith("# ") and "=" in line)
        rows = list(csv.reader(line for line in lines if not line.startswith("#")))[1:]
        values = np.array([[float(v) for v in r[1:]] for r in rows])
        return cls(values, meta.get("layer", ""), meta.get("target", ""), [r[0] for r in rows])


def _resample(profile, centers, T, mode):
    """Map a (rows, W) profile sampled at input positions ``centers`` onto 0..T-1."""
    grid = np.arange(T, dtype=np.float64)
    if mode == "nearest":
        pick = np.abs(grid[:, None] - centers[None, :]).argmin(axis=1)
        return profile[:, pick]
    return np.stack([np.interp(grid, centers, row) for row in profile])


def _target_node(graph, pred, target):
    if target == "sum":
        return tc.total(pred, name="gradcam.target"), "sum of forecast steps"
    step = int(target)
    S = pred.shape[-1]
    if not 1 <= step <= S:
        raise ArgumentError(f"target step {step} outside 1..{S}")
    mask = np.zeros(pred.shape)
    mask[..., step - 1] = 1.0
    return tc.total(tc.mul(pred, graph.const(mask)), name="gradcam.target"), f"forecast step {step}"


def _lt_layers(model, layer):
    lengths = model.config.mwkc.lengths
    if layer == "lt":
        return lengths
    if layer.startswith("lt.k"):
        try:
            k = int(layer[4:])
        except ValueError:
            k = None
        if k in lengths:
            return [k]
    return None


def gradcam_map(model, window, layer: str = "lt", target="sum", upsample: str = "linear",
                normalized: bool = False) -> SaliencyMap:
    """Saliency for one window (T, N) of raw values.

    ``layer`` is ``"lt"`` (every LT conv block, summed), ``"lt.k<k>"`` for one
    kernel-length branch, or ``"cv"`` for the correlation conv block (rows are
    variable combinations rather than variables).  ``target`` is ``"sum"`` or a
    1-based forecast step.
    """
    if not isinstance(model, WavecastModel):
        model = WavecastModel.load(model)
    if upsample not in ("linear", "nearest"):
        raise ArgumentError(f"unknown upsampling {upsample!r}")
    cfg = model.config
    lt_lengths = _lt_layers(model, layer) if cfg.uses_lt else None
    if lt_lengths is None and not (layer == "cv" and cfg.uses_cv):
        raise ArgumentError(f"unknown or absent layer {layer!r} for variant {cfg.variant}")
    if normalized:
        x = np.asarray(window, dtype=np.float64)
    else:
        if model.norm is None:
            raise StateError("model has no normalisation statistics")
        x = model.norm.apply(window)
    x_tr = model.transposed(x)[None]
    g, pred, _ = model.forward(x_tr)
    out, desc = _target_node(g, pred, target)
    tc.backward(g, out)
    T, N = cfg.T, cfg.n_vars
    if lt_lengths is not None:
        total = np.zeros((N, T))
        reach = cfg.lt_block_kernel - 1
        for k in lt_lengths:
            node = g[f"lt.block.k{k}"]
            A, G = node.value[0], node.grad[0]  # (N*C, W)
            weights = G.mean(axis=-1, keepdims=True)
            per_var = (weights * A).reshape(N, -1, A.shape[-1]).sum(axis=1)
            cam = np.maximum(per_var, 0.0)
            centers = np.arange(A.shape[-1]) + (k - 1 + reach) / 2.0
            total += _resample(cam, centers, T, upsample)
        labels = list(VARIABLES) if N == len(VARIABLES) else [f"v{i}" for i in range(N)]
    else:
        node = g["cv.block"]
        A, G = node.value, node.grad  # (P, C, J', W)
        weights = G.mean(axis=(-2, -1), keepdims=True)
        cam = np.maximum((weights * A).sum(axis=1), 0.0).sum(axis=1)  # (P, W)
        centers = np.arange(cam.shape[-1]) + (cfg.cv_kernel_w - 1) / 2.0
        total = _resample(cam, centers, T, upsample)
        names = list(VARIABLES) if N == len(VARIABLES) else [f"v{i}" for i in range(N)]
        labels = ["+".join(names[i] for i in c) for c in combinations(N)]
    peak = total.max()
    values = total / peak if peak > 0 else total
    return SaliencyMap(values, layer, desc, labels)


def aggregate_variable_importance(saliency: SaliencyMap):
    """(per-row mean over time, per-time mean over rows)."""
    v = np.asarray(saliency.values, dtype=np.float64)
    return v.mean(axis=1), v.mean(axis=0)
