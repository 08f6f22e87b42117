"""Spatio-temporal convolutional sequence-to-sequence forecaster.

The network maps ``T`` days of incidence fields to the next ``T`` days. A
temporal block of causal ``t x 1 x 1`` convolutions is followed by a
spatial block of ``1 x d x d`` convolutions and a final ``1 x 1 x 1``
convolution to one channel. Before every convolution the input is
extended with learnable inputs (LI, per-location feature maps shared over
time) and local weights (LW, a locally connected layer over the input);
after every convolution a B03D normalisation-activation layer is applied.

The territory is split into three row bands, each with its own model.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor_engine as te
from .tensor_engine import Tensor


class TrainingError(RuntimeError):
    """Training produced a non-finite loss; parameters were restored."""


@dataclass(frozen=True)
class ModelConfig:
    layers_per_block: int = 3
    base_filters: int = 32
    spatial_kernel: int = 5
    temporal_kernel: int = 5
    li_count: int = 2
    lw_kernel: tuple[int, int, int] = (1, 1, 1)
    horizon: int = 7
    value_scale: float = 1000.0
    eps: float = 1e-5
    momentum: float = 0.9
    # last layer of each block returns to the block's input width ("input")
    # or to the base filter count ("base")
    reduce_to: str = "input"
    lr: float = 1e-3
    beta3: float = 0.9999
    batch_size: int = 5
    # "zero" starts the 1x1x1 output head at zero so the untrained network
    # predicts the bias; "random" draws it like the other kernels
    head_init: str = "zero"

    def __post_init__(self):
        if min(self.layers_per_block, self.base_filters, self.spatial_kernel,
               self.temporal_kernel, self.horizon) < 1:
            raise ValueError("counts, kernel sizes and horizon must be >= 1")
        if self.li_count < 0:
            raise ValueError("li_count must be >= 0")
        if self.reduce_to not in ("input", "base"):
            raise ValueError("reduce_to must be 'input' or 'base'")
        if self.head_init not in ("zero", "random"):
            raise ValueError("head_init must be 'zero' or 'random'")


# --- B03D -------------------------------------------------------------------

@dataclass(eq=False)
class B03dLayer:
    channels: int
    time_steps: int
    eps: float = 1e-5
    momentum: float = 0.9
    v1: Tensor = None
    theta: Tensor = None
    psi: Tensor = None
    running_var: np.ndarray = None

    def __post_init__(self):
        c = self.channels
        self.v1 = self.v1 or Tensor(np.ones(c), True, "v1")
        self.theta = self.theta or Tensor(np.ones(c), True, "theta")
        self.psi = self.psi or Tensor(np.zeros(c), True, "psi")
        if self.running_var is None:
            self.running_var = np.ones((c, self.time_steps))

    def params(self):
        return [self.v1, self.theta, self.psi]


def _per_channel(p: Tensor) -> Tensor:
    return te.reshape(p, (1, -1, 1, 1, 1))


def b03d(x: Tensor, layer: B03dLayer, mode: str = "train") -> Tensor:
    """``x / max(sqrt(s_batch + eps), v1 x + sqrt(s_inst + eps)) * theta + psi``.

    Variances are taken separately for every (channel, time step): the
    batch variance over (batch, height, width), the instance variance over
    (height, width) of each sample. In ``"train"`` mode the running batch
    variance is updated (``running = momentum running + (1 - momentum) s``);
    in ``"infer"`` mode it replaces the batch variance.
    """
    if x.shape[1] != layer.channels:
        raise ValueError(f"B03D expects {layer.channels} channels, got {x.shape[1]}")
    if mode == "train":
        s_batch = te.variance(x, axis=(0, 3, 4), keepdims=True)
        layer.running_var = (layer.momentum * layer.running_var
                             + (1 - layer.momentum) * s_batch.data[0, :, :, 0, 0])
    elif mode == "infer":
        s_batch = Tensor(layer.running_var[None, :, :, None, None])
    else:
        raise ValueError("mode must be 'train' or 'infer'")
    s_inst = te.variance(x, axis=(3, 4), keepdims=True)
    den = te.maximum(te.sqrt(s_batch + layer.eps),
                     x * _per_channel(layer.v1) + te.sqrt(s_inst + layer.eps))
    return x / den * _per_channel(layer.theta) + _per_channel(layer.psi)


# --- learnable inputs / local weights --------------------------------------

@dataclass(eq=False)
class LiLw:
    """Learnable inputs ``li (n, H, W)`` and local weights ``lw (n, Cin, T, H, W, k...)``."""
    li: Tensor | None
    lw: Tensor | None

    @property
    def n(self):
        return 0 if self.li is None else self.li.shape[0]

    def params(self):
        return [] if self.li is None else [self.li, self.lw]


def augment_li_lw(x: Tensor, aug: LiLw) -> Tensor:
    """Concatenate LI maps (broadcast over batch and time) and LW outputs to ``x``.

    Output channels are ``Cin + 2 n``; ``n = 0`` returns ``x`` unchanged.
    """
    if aug.n == 0:
        return x
    b_, _, t_, h_, w_ = x.shape
    if aug.li.shape[1:] != (h_, w_):
        raise ValueError(f"LI maps {aug.li.shape[1:]} do not match input space {(h_, w_)}")
    li = te.broadcast_to(te.reshape(aug.li, (1, aug.n, 1, h_, w_)), (b_, aug.n, t_, h_, w_))
    lw = te.locally_connected(x, aug.lw)
    return te.concat([x, li, lw], axis=1)


# --- model ------------------------------------------------------------------

@dataclass(eq=False)
class ConvLayer:
    aug: LiLw
    weight: Tensor
    bias: Tensor
    norm: B03dLayer
    causal: bool

    def params(self):
        return self.aug.params() + [self.weight, self.bias] + self.norm.params()


@dataclass(eq=False)
class STConvS2S:
    config: ModelConfig
    height: int
    width: int
    temporal: list[ConvLayer] = field(default_factory=list)
    spatial: list[ConvLayer] = field(default_factory=list)
    head_w: Tensor = None
    head_b: Tensor = None

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.temporal + self.spatial:
            out.extend(layer.params())
        return out + [self.head_w, self.head_b]

    def named_params(self) -> dict[str, Tensor]:
        named = {}
        for block, layers in (("temporal", self.temporal), ("spatial", self.spatial)):
            for i, layer in enumerate(layers):
                pre = f"{block}.{i}."
                if layer.aug.n:
                    named[pre + "li"] = layer.aug.li
                    named[pre + "lw"] = layer.aug.lw
                named[pre + "weight"] = layer.weight
                named[pre + "bias"] = layer.bias
                named[pre + "v1"] = layer.norm.v1
                named[pre + "theta"] = layer.norm.theta
                named[pre + "psi"] = layer.norm.psi
        named["head.weight"] = self.head_w
        named["head.bias"] = self.head_b
        return named

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus running variances, for checkpoints."""
        out = {k: v.data for k, v in self.named_params().items()}
        for block, layers in (("temporal", self.temporal), ("spatial", self.spatial)):
            for i, layer in enumerate(layers):
                out[f"{block}.{i}.running_var"] = layer.norm.running_var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        named = self.named_params()
        for k, t in named.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"checkpoint tensor {k} has shape {arrays[k].shape}, "
                                 f"expected {t.shape}")
            t.data = np.array(arrays[k], dtype=float)
        for block, layers in (("temporal", self.temporal), ("spatial", self.spatial)):
            for i, layer in enumerate(layers):
                layer.norm.running_var = np.array(arrays[f"{block}.{i}.running_var"], float)


def _channel_schedule(cfg: ModelConfig, block_in: int) -> list[int]:
    last = block_in if cfg.reduce_to == "input" else cfg.base_filters
    widths = [cfg.base_filters * 2 ** i for i in range(cfg.layers_per_block - 1)]
    return widths + [last]


def build_model(config: ModelConfig, height: int, width: int, seed: int = 0) -> STConvS2S:
    """Randomly initialised network for ``height x width`` fields."""
    rng = np.random.default_rng(seed)
    cfg = config
    t_ = cfg.horizon
    model = STConvS2S(cfg, height, width)

    def layer(cin, cout, kernel, causal):
        n = cfg.li_count
        if n:
            li = Tensor(0.1 * rng.standard_normal((n, height, width)), True, "li")
            lw = Tensor(1.0 / cin + 0.1 * rng.standard_normal(
                (n, cin, t_, height, width) + tuple(cfg.lw_kernel)), True, "lw")
            aug = LiLw(li, lw)
        else:
            aug = LiLw(None, None)
        c_eff = cin + 2 * n
        fan_in = c_eff * int(np.prod(kernel))
        w = Tensor(rng.standard_normal((cout, c_eff) + kernel) * np.sqrt(1.0 / fan_in), True,
                   "weight")
        b = Tensor(np.zeros(cout), True, "bias")
        return ConvLayer(aug, w, b, B03dLayer(cout, t_, cfg.eps, cfg.momentum), causal)

    cin = 1
    for cout in _channel_schedule(cfg, cin):
        model.temporal.append(layer(cin, cout, (cfg.temporal_kernel, 1, 1), True))
        cin = cout
    block_in = cin
    for cout in _channel_schedule(cfg, block_in):
        model.spatial.append(layer(cin, cout, (1, cfg.spatial_kernel, cfg.spatial_kernel), True))
        cin = cout
    head = rng.standard_normal((1, cin, 1, 1, 1)) * np.sqrt(1.0 / cin)
    if cfg.head_init == "zero":
        head[:] = 0.0
    model.head_w = Tensor(head, True, "head.weight")
    model.head_b = Tensor(np.zeros(1), True, "head.bias")
    return model


def _apply(layer: ConvLayer, x: Tensor, mode: str) -> Tensor:
    h = augment_li_lw(x, layer.aug)
    h = te.conv3d(h, layer.weight, layer.bias, causal=layer.causal)
    return b03d(h, layer.norm, mode)


def forward(model: STConvS2S, x, mode: str = "train", return_temporal: bool = False):
    """Run the network on scaled input ``x (B, 1, T, H, W)``.

    Returns the ``(B, 1, T, H, W)`` output, and the temporal block's output
    as well when ``return_temporal`` is set.
    """
    x = te.as_tensor(x)
    cfg = model.config
    expect = (1, cfg.horizon, model.height, model.width)
    if x.ndim != 5 or x.shape[1:] != expect:
        raise ValueError(f"input: expected (B, {expect[0]}, {expect[1]}, {expect[2]}, "
                         f"{expect[3]}), got {x.shape}")
    h = x
    for layer in model.temporal:
        h = _apply(layer, h, mode)
    temporal_out = h
    for layer in model.spatial:
        h = _apply(layer, h, mode)
    if h.shape[2:] != x.shape[2:]:
        raise ValueError(f"spatial block changed dims to {h.shape[2:]}")
    out = te.conv3d(h, model.head_w, model.head_b, causal=True)
    return (out, temporal_out) if return_temporal else out


# --- training ---------------------------------------------------------------

@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,loss\n")
            for i, v in enumerate(self.losses, start=1):
                fh.write(f"{i},{v:.6g}\n")


@dataclass(eq=False)
class Trainer:
    """A model with its optimizer state."""
    model: STConvS2S
    optimizer: te.AdaModState = None

    def __post_init__(self):
        if self.optimizer is None:
            cfg = self.model.config
            self.optimizer = te.AdaModState(lr=cfg.lr, beta3=cfg.beta3)


def _snapshot(model):
    return {k: v.copy() for k, v in model.state_arrays().items()}


def _train_step(trainer: Trainer, xb, yb) -> float:
    params = trainer.model.params()
    for p in params:
        p.zero_grad()
    loss = te.mse(forward(trainer.model, xb, "train"), yb)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    te.backward(loss)
    te.adamod_step(trainer.optimizer, params)
    return float(loss.data)


def train(trainer: Trainer, inputs, targets, epochs: int, batch_size: int | None = None,
          seed: int = 0) -> TrainLog:
    """Minimise the mean squared error over all output steps with AdaMod.

    ``inputs`` and ``targets`` are ``(S, 1, T, H, W)`` arrays, already
    divided by ``value_scale``. Sample order is shuffled per epoch by a
    generator seeded with ``seed``. The logged loss of an epoch is the mean
    of its batch losses.

    Raises
    ------
    TrainingError
        On a non-finite loss; parameters are reset to the last completed
        epoch first.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if len(x) == 0 or x.shape != y.shape:
        raise ValueError("need a non-empty dataset with matching input/target shapes")
    bs = batch_size or trainer.model.config.batch_size
    rng = np.random.default_rng(seed)
    log = TrainLog()
    for _ in range(epochs):
        good = _snapshot(trainer.model)
        order = rng.permutation(len(x))
        losses = []
        try:
            for start in range(0, len(x), bs):
                idx = np.sort(order[start:start + bs])
                losses.append(_train_step(trainer, x[idx], y[idx]))
        except FloatingPointError:
            trainer.model.load_arrays(good)
            raise TrainingError("non-finite loss; restored last good parameters") from None
        log.losses.append(float(np.mean(losses)))
    return log


def online_update(trainer: Trainer, x, y, epochs: int = 5) -> TrainLog:
    """Fine-tune on one new (input, target) pair for ``epochs`` steps."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 4:
        x, y = x[None], y[None]
    return train(trainer, x, y, epochs, batch_size=len(x))


def predict(model: STConvS2S, x) -> np.ndarray:
    """Inference-mode output for scaled input, ``(B, 1, T, H, W)``."""
    return forward(model, x, "infer").data


# --- region split -----------------------------------------------------------

def band_slices(n_rows: int, n_bands: int = 3) -> list[slice]:
    """Contiguous row bands of ``n_rows // n_bands`` rows; the last band takes the rest."""
    if n_rows < n_bands:
        raise ValueError(f"cannot split {n_rows} rows into {n_bands} bands")
    size = n_rows // n_bands
    edges = [i * size for i in range(n_bands)] + [n_rows]
    return [slice(edges[i], edges[i + 1]) for i in range(n_bands)]


def build_band_models(config: ModelConfig, n_rows: int, n_cols: int, seed: int = 0):
    return [Trainer(build_model(config, s.stop - s.start, n_cols, seed + k))
            for k, s in enumerate(band_slices(n_rows))]


def predict_region_split(trainers: Sequence[Trainer], sequence) -> np.ndarray:
    """Forecast the field ``T`` days after the last input day.

    ``sequence`` is ``(T, H, W)`` in rate units (NaN off land, treated as
    0). Each band is scaled, predicted by its own model, and the last
    output step is stitched back along rows, unscaled and clamped at 0.
    """
    seq = np.nan_to_num(np.asarray(sequence, dtype=float))
    bands = band_slices(seq.shape[1], len(trainers))
    for tr, s in zip(trainers, bands):
        if (tr.model.height, tr.model.width) != (s.stop - s.start, seq.shape[2]):
            raise ValueError("band/model size mismatch")
    scale = trainers[0].model.config.value_scale
    parts = []
    for tr, s in zip(trainers, bands):
        out = predict(tr.model, seq[None, None, :, s, :] / scale)
        parts.append(out[0, 0, -1])
    return np.maximum(np.concatenate(parts, axis=0) * scale, 0.0)
