"""The two-branch forecaster, its training loop and checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as tc
from .data import NormStats, WindowedDataset, fit_normalization
from .errors import ArgumentError, ConfigError, NumericError, ShapeError, StateError
from .mwkc import MwkcConfig, init_params as init_lt_params, lt_feature_extract, mwkc_forward
from .wavelets import MotherWavelet, WaveletKernelBank, build_bank, default_scales
from .wlmc import WlmcCache, build_wlmc_batch, combinations, cv_dwcc_forward

COMPLETE = "complete"
WITHOUT_LT = "without-lt-mwkc"
WITHOUT_CV = "without-cv-dwcc"
VARIANTS = (COMPLETE, WITHOUT_LT, WITHOUT_CV)

MAGIC = b"WVC1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    T: int = 24
    S: int = 24
    n_vars: int = 5
    variant: str = COMPLETE
    # wavelet bank
    wavelets: tuple = ("morlet", "mexican_hat")
    omega0: float = 6.0
    kernel_support: float = 2.0
    max_length: int = 6
    filters_per_length: int = 8
    alpha_per_length: bool = False
    lt_block_kernel: int = 3
    lt_block_channels: int = 4
    lt_time_bins: int = 4
    # correlation branch
    n_scales: int = 8
    bandwidth: float = 8.0
    cwt_support: float = 4.0
    cv_channels: int = 4
    cv_kernel_h: int = 3
    cv_kernel_w: int = 3
    cv_time_bins: int = 4
    cv_onehot: bool = False
    cv_per_combination: bool = False
    # heads
    head_width: int = 64
    fusion: str = "branch"       # "branch" (two scalars) or "feature" (one pair per head unit)
    head_order: str = "per-branch"  # or "concat-first"

    def __post_init__(self):
        object.__setattr__(self, "wavelets", tuple(self.wavelets))

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if min(self.T, self.S) < 1 or self.n_vars < 2:
            raise ConfigError("need T, S >= 1 and at least two variables")
        if self.fusion not in ("branch", "feature"):
            raise ConfigError(f"fusion must be 'branch' or 'feature', got {self.fusion!r}")
        if self.head_order not in ("per-branch", "concat-first"):
            raise ConfigError(f"head_order must be 'per-branch' or 'concat-first', got {self.head_order!r}")
        for name in self.wavelets:
            MotherWavelet(name, self.omega0)
        self.mwkc.validate(self.T, len(self.wavelets))
        if self.cv_kernel_h > self.n_scales or self.cv_kernel_w > self.T:
            raise ConfigError("CV kernel exceeds the WLMC map")
        if not 1 <= self.cv_time_bins <= self.T - self.cv_kernel_w + 1:
            raise ConfigError(f"cv_time_bins={self.cv_time_bins} out of range")
        return self

    @property
    def mwkc(self) -> MwkcConfig:
        return MwkcConfig(self.max_length, self.filters_per_length, self.lt_block_kernel,
                          self.lt_block_channels, self.lt_time_bins, self.alpha_per_length)

    @property
    def uses_lt(self):
        return self.variant != WITHOUT_LT

    @property
    def uses_cv(self):
        return self.variant != WITHOUT_CV

    @property
    def scales(self):
        return default_scales(self.n_scales)

    @property
    def mother_wavelets(self):
        return [MotherWavelet(name, self.omega0) for name in self.wavelets]

    @property
    def cv_in_channels(self):
        return 1 + self.n_vars if self.cv_onehot else 2

    def cv_feature_length(self):
        return len(combinations(self.n_vars)) * self.cv_channels * self.cv_time_bins

    def to_dict(self):
        d = asdict(self)
        d["wavelets"] = list(self.wavelets)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    val_fraction: float = 0.1
    loss: str = "mse"

    def validate(self):
        if not self.lr >= 0:
            raise ConfigError("learning rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.loss != "mse":
            raise ConfigError("only the squared-error loss is supported")
        return self


@dataclass
class ForecastResult:
    prediction: np.ndarray  # (S,) in g CO2-e/kWh when denormalized
    window_id: int | None = None
    denormalized: bool = True


@dataclass
class TrainingCurve:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


def _glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in))


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameters for ``config``; ablated branches get no parameters at all."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    H = config.head_width
    widths = {}
    if config.uses_lt:
        params.update(init_lt_params(config.mwkc, config.n_vars, len(config.wavelets), rng))
        widths["lt"] = config.mwkc.feature_length(config.n_vars)
    if config.uses_cv:
        kshape = (config.cv_channels, config.cv_in_channels, config.cv_kernel_h, config.cv_kernel_w)
        fan_in = config.cv_in_channels * config.cv_kernel_h * config.cv_kernel_w
        n_kernels = len(combinations(config.n_vars)) if config.cv_per_combination else 1
        for p in range(n_kernels):
            suffix = f".p{p}" if config.cv_per_combination else ""
            params["cv.kernel" + suffix] = rng.normal(0.0, np.sqrt(2.0 / fan_in), kshape)
            params["cv.bias" + suffix] = np.zeros(config.cv_channels)
        widths["cv"] = config.cv_feature_length()
    if config.head_order == "concat-first":
        total_w = sum(widths.values())
        params["head.w"] = _glorot(rng, H, total_w)
        params["head.b"] = np.zeros(H)
    else:
        for branch, width in widths.items():
            params[f"head.{branch}.w"] = _glorot(rng, H, width)
            params[f"head.{branch}.b"] = np.zeros(H)
    if len(widths) == 2:
        params["fusion.scores"] = np.zeros((H, 2)) if config.fusion == "feature" else np.zeros(2)
    params["out.w"] = _glorot(rng, config.S, H)
    params["out.b"] = np.zeros(config.S)
    return params


class WavecastModel:
    """Configuration, parameters, normalisation statistics and the frozen wavelet bank."""

    def __init__(self, config: ModelConfig, params=None, norm: NormStats | None = None, seed: int = 0):
        self.config = config.validate()
        self.params = init_params(config, seed) if params is None else {k: np.array(v, dtype=np.float64)
                                                                       for k, v in params.items()}
        self.norm = norm
        self.bank = build_bank(config.mother_wavelets, config.max_length, config.n_vars,
                               config.filters_per_length, config.kernel_support)
        self.cache = WlmcCache()

    # -- features ------------------------------------------------------------

    def transposed(self, X_norm):
        """(..., T, N) normalized windows -> (..., N, T) rows per variable."""
        X_norm = np.asarray(X_norm, dtype=np.float64)
        cfg = self.config
        if X_norm.shape[-2:] != (cfg.T, cfg.n_vars):
            raise ShapeError(f"expected windows of shape (T, N) = {(cfg.T, cfg.n_vars)}, got {X_norm.shape}")
        return np.swapaxes(X_norm, -1, -2)

    def wlmc_images(self, x_tr):
        """Conv2d input (B, P, channels, J, T) for a batch of (B, N, T) windows."""
        cfg = self.config
        t = build_wlmc_batch(x_tr, cfg.scales, cfg.bandwidth, cfg.mother_wavelets[0], cfg.cwt_support,
                             cache=self.cache)
        return images_from_tensor(t.C, t.dominant_index(), cfg)

    # -- forward ---------------------------------------------------------------

    def forward(self, x_tr, images=None, graph: tc.Graph | None = None):
        """Build the forward graph for a batch ``x_tr`` (B, N, T) of normalized windows.

        Returns ``(graph, prediction node (B, S), parameter nodes)``.
        """
        cfg = self.config
        g = tc.Graph() if graph is None else graph
        p = {name: g.param(value, name=name) for name, value in self.params.items()}
        x_tr = np.asarray(x_tr, dtype=np.float64)
        if x_tr.ndim == 2:
            x_tr = x_tr[None]
        feats = {}
        if cfg.uses_lt:
            mw = cfg.mwkc
            alphas = ({k: p[f"lt.alpha.k{k}"] for k in mw.lengths} if mw.alpha_per_length
                      else p["lt.alpha"])
            fused = mwkc_forward(g, x_tr, self.bank, alphas, mw.lengths)
            feats["lt"] = lt_feature_extract(fused, {k: p[f"lt.kernel.k{k}"] for k in mw.lengths},
                                             {k: p[f"lt.bias.k{k}"] for k in mw.lengths},
                                             cfg.n_vars, mw.time_bins)
        if cfg.uses_cv:
            if images is None:
                images = self.wlmc_images(x_tr)
            feats["cv"] = self._cv_features(g, p, np.asarray(images, dtype=np.float64))
        fused = self._fuse(g, p, feats)
        pred = tc.affine(fused, p["out.w"], p["out.b"], name="output")
        return g, pred, p

    def _cv_features(self, g, p, images):
        cfg = self.config
        if not cfg.cv_per_combination:
            return cv_dwcc_forward(g, g.const(images), p["cv.kernel"], p["cv.bias"], cfg.cv_time_bins)
        parts = [cv_dwcc_forward(g, g.const(images[:, i:i + 1]), p[f"cv.kernel.p{i}"], p[f"cv.bias.p{i}"],
                                 cfg.cv_time_bins, name=f"cv.block.p{i}")
                 for i in range(images.shape[1])]
        return tc.concat(parts, axis=-1)

    def _fuse(self, g, p, feats):
        cfg = self.config
        names = list(feats)
        if len(names) == 1:
            # an ablated model keeps fusion weight 1.0 on its remaining branch
            if cfg.head_order == "concat-first":
                return tc.relu(tc.affine(feats[names[0]], p["head.w"], p["head.b"]), name="head")
            return tc.relu(tc.affine(feats[names[0]], p[f"head.{names[0]}.w"], p[f"head.{names[0]}.b"]),
                           name=f"head.{names[0]}")
        if cfg.head_order == "concat-first":
            w = tc.softmax(p["fusion.scores"], name="fusion.weights")
            if cfg.fusion == "feature":
                raise ConfigError("per-feature fusion needs per-branch heads")
            scaled = [tc.mul(feats[b], tc.weighted_sum(w, g.const(np.eye(2)[i])))
                      for i, b in enumerate(names)]
            return tc.relu(tc.affine(tc.concat(scaled, axis=-1), p["head.w"], p["head.b"]), name="head")
        heads = [tc.relu(tc.affine(feats[b], p[f"head.{b}.w"], p[f"head.{b}.b"]), name=f"head.{b}")
                 for b in names]
        w = tc.softmax(p["fusion.scores"], name="fusion.weights")
        if cfg.fusion == "feature":
            stacked = tc.stack(heads, axis=-1)  # (B, H, 2)
            return tc.mul(tc.mean(tc.mul(stacked, w), axis=-1), g.const(2.0), name="fused")
        return tc.weighted_sum(w, tc.stack(heads, axis=0), name="fused")

    def fusion_weights(self):
        if "fusion.scores" not in self.params:
            return None
        s = self.params["fusion.scores"]
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    # -- inference -------------------------------------------------------------

    def predict_normalized(self, x_tr, images=None, batch: int = 256) -> np.ndarray:
        x_tr = np.asarray(x_tr, dtype=np.float64)
        out = []
        for lo in range(0, len(x_tr), batch):
            imgs = None if images is None else images[lo:lo + batch]
            g, pred, _ = self.forward(x_tr[lo:lo + batch], imgs)
            out.append(pred.value)
            g.release()
        return np.concatenate(out) if out else np.zeros((0, self.config.S))

    def predict(self, X_raw, window_id: int | None = None) -> ForecastResult:
        """Forecast one raw window (T, N) in target units."""
        if self.norm is None:
            raise StateError("model has no normalisation statistics; train or load a checkpoint first")
        x_tr = self.transposed(self.norm.apply(X_raw))
        z = self.predict_normalized(x_tr[None])[0]
        return ForecastResult(self.norm.invert_target(z), window_id, True)

    def predict_dataset(self, dataset: WindowedDataset, idx=None) -> np.ndarray:
        """Denormalized forecasts (n, S) for the selected windows."""
        if self.norm is None:
            raise StateError("model has no normalisation statistics")
        idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
        x_tr = self.transposed(self.norm.apply(dataset.X[idx]))
        return self.norm.invert_target(self.predict_normalized(x_tr))

    # -- persistence -------------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        save_checkpoint(path, self, extra)

    @classmethod
    def load(cls, path) -> "WavecastModel":
        return load_checkpoint(path)


def images_from_tensor(C, dominant, config: ModelConfig):
    """Assemble conv2d input from WLMC values and integer dominant indices."""
    C = np.asarray(C, dtype=np.float64)
    if config.cv_onehot:
        planes = [(dominant == n).astype(np.float64) for n in range(config.n_vars)]
        return np.stack([C] + planes, axis=-3)
    return np.stack([C, dominant / (config.n_vars - 1.0)], axis=-3)


class PreparedData:
    """Normalized windows plus compact WLMC features for a whole dataset.

    WLMC maps are stored as float32 values and int8 dominant indices, which
    keeps a year of hourly windows at a few hundred megabytes.
    """

    def __init__(self, model: WavecastModel, dataset: WindowedDataset, chunk: int = 512):
        cfg = model.config
        if model.norm is None:
            raise StateError("fit normalisation before preparing data")
        if dataset.T != cfg.T or dataset.S != cfg.S:
            raise ShapeError(f"dataset windows {dataset.T}/{dataset.S} do not match model {cfg.T}/{cfg.S}")
        self.config = cfg
        self.x_tr = model.transposed(model.norm.apply(dataset.X))
        self.target = model.norm.apply_target(dataset.e)
        self.C = self.dom = None
        self.wlmc_windows = 0
        if cfg.uses_cv:
            n = len(self.x_tr)
            P = len(combinations(cfg.n_vars))
            self.C = np.empty((n, P, cfg.n_scales, cfg.T), dtype=np.float32)
            self.dom = np.empty((n, P, cfg.n_scales, cfg.T), dtype=np.int8)
            for lo in range(0, n, chunk):
                t = build_wlmc_batch(self.x_tr[lo:lo + chunk], cfg.scales, cfg.bandwidth,
                                     cfg.mother_wavelets[0], cfg.cwt_support)
                self.C[lo:lo + chunk] = t.C
                self.dom[lo:lo + chunk] = t.dominant_index()
            self.wlmc_windows = n

    def __len__(self):
        return len(self.x_tr)

    def images(self, idx):
        if self.C is None:
            return None
        return images_from_tensor(self.C[idx], self.dom[idx], self.config)


# -- training ----------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def loss_and_grads(model: WavecastModel, x_tr, target, images=None):
    g, pred, nodes = model.forward(x_tr, images)
    loss = tc.mse_loss(pred, g.const(target), name="loss")
    tc.backward(g, loss)
    grads = {k: n.grad for k, n in nodes.items()}
    g.release()
    return float(loss.value), grads


def split_validation(train_idx, fraction: float, gap: int = 0):
    """Hold out the last ``fraction`` of (time-ordered) training windows, with a gap before it."""
    train_idx = np.asarray(train_idx)
    n_val = int(round(len(train_idx) * fraction))
    if n_val == 0:
        return train_idx, train_idx[:0]
    fit = train_idx[: len(train_idx) - n_val]
    val = train_idx[len(train_idx) - n_val:]
    fit = fit[fit < val[0] - gap] if gap else fit
    return fit, val


def _mean_loss(model, data: PreparedData, idx, batch=256):
    if len(idx) == 0:
        return float("nan")
    total = 0.0
    for lo in range(0, len(idx), batch):
        sel = idx[lo:lo + batch]
        pred = model.predict_normalized(data.x_tr[sel], data.images(sel))
        total += float(np.sum((pred - data.target[sel]) ** 2))
    return total / (len(idx) * data.target.shape[1])


def train(model: WavecastModel, dataset: WindowedDataset, train_idx=None, config: TrainConfig = TrainConfig(),
          data: PreparedData | None = None, log=None) -> TrainingCurve:
    """Fit ``model`` in place on the given training windows and return the loss curve.

    Normalisation statistics are fitted on the training windows only (unless the
    model already carries statistics and ``data`` was prepared with them).
    The last ``val_fraction`` of the training windows drives early stopping, and
    the best parameters seen are restored at the end.
    """
    config.validate()
    train_idx = np.arange(len(dataset)) if train_idx is None else np.asarray(train_idx)
    if len(train_idx) == 0:
        raise ArgumentError("empty training set")
    start = time.perf_counter()
    if data is None:
        model.norm = fit_normalization(dataset.X[train_idx])
        data = PreparedData(model, dataset)
    gap = model.config.T + model.config.S - 1
    fit_idx, val_idx = split_validation(train_idx, config.val_fraction, gap)
    if len(fit_idx) == 0:
        fit_idx, val_idx = train_idx, train_idx[:0]
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.eps)
    curve = TrainingCurve()
    best = (np.inf, {k: v.copy() for k, v in model.params.items()})
    stale = 0
    for epoch in range(config.epochs):
        order = rng.permutation(fit_idx)
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            sel = np.sort(order[lo:lo + config.batch_size])
            try:
                loss, grads = loss_and_grads(model, data.x_tr[sel], data.target[sel], data.images(sel))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}: {exc}; the learning rate may be too high") from None
            if not np.isfinite(loss):
                raise NumericError(f"epoch {epoch + 1}: loss is {loss}; the learning rate may be too high")
            opt.step(model.params, grads)
            bad = [k for k, v in model.params.items() if not np.all(np.isfinite(v))]
            if bad:
                raise NumericError(f"epoch {epoch + 1}: non-finite parameters {bad}; lower the learning rate")
            total += loss * len(sel)
            count += len(sel)
        curve.train_loss.append(total / count)
        if len(val_idx):
            val = _mean_loss(model, data, val_idx)
            curve.val_loss.append(val)
            if val < best[0]:
                best = (val, {k: v.copy() for k, v in model.params.items()})
                curve.best_epoch = epoch
                stale = 0
            else:
                stale += 1
        if log is not None:
            log(epoch, curve)
        if len(val_idx) and stale >= config.patience:
            break
    if len(val_idx):
        model.params = best[1]
    else:
        curve.best_epoch = len(curve.train_loss) - 1
    curve.seconds = time.perf_counter() - start
    return curve


# -- checkpoints ---------------------------------------------------------------

def config_hash(*dicts) -> str:
    blob = json.dumps(list(dicts), sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def save_checkpoint(path, model: WavecastModel, extra: dict | None = None):
    """Binary container: magic, version, JSON header, then raw little-endian float64 tensors."""
    names = sorted(model.params)
    header = {
        "config": model.config.to_dict(),
        "norm": None if model.norm is None else model.norm.to_dict(),
        "bank": model.bank.spec(),
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path):
    if fh.read(4) != MAGIC:
        raise StateError(f"{path} is not a wavecast checkpoint")
    version, size = struct.unpack("<II", fh.read(8))
    if version != FORMAT_VERSION:
        raise StateError(f"{path}: unsupported checkpoint version {version}")
    return json.loads(fh.read(size))


def load_checkpoint(path) -> WavecastModel:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint {path} does not exist")
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        params = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise StateError(f"{path}: truncated tensor {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    norm = None if header["norm"] is None else NormStats.from_dict(header["norm"])
    model = WavecastModel(config, params, norm)
    saved = WaveletKernelBank.from_spec(header["bank"])
    if saved.spec() != model.bank.spec():
        raise StateError(f"{path}: wavelet bank spec does not match the model config")
    model.extra = header.get("extra", {})
    return model


def with_variant(config: ModelConfig, variant: str) -> ModelConfig:
    return replace(config, variant=variant).validate()
