"""Dimension-generic U-net mapping (lambda, mu) inputs to a mu prediction.

Each encoder level runs two same-size convolutions (symmetric padding),
then a kernel-2 stride-2 convolution halves the resolution.  The decoder
upsamples by nearest-neighbour repetition, convolves, concatenates the
matching encoder features and runs two more convolutions.  Every
convolution except the last is followed by batch normalization and ReLU.
Dropout sits on the bottleneck; the 1x1 output convolution is linear.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class UNetConfig:
    spatial_rank: int = 2
    levels: int = 3
    base_channels: int = 16
    kernel_extent: int = 3
    dropout_rate: float = 0.15
    in_channels: int = 2
    out_channels: int = 1

    def __post_init__(self):
        if self.spatial_rank not in (2, 3):
            raise ConfigError("spatial_rank must be 2 or 3")
        if self.levels < 1 or self.base_channels < 1:
            raise ConfigError("levels and base_channels must be positive")
        if self.kernel_extent < 1 or self.kernel_extent % 2 == 0:
            raise ConfigError("kernel_extent must be a positive odd integer")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UNetParams:
    config: UNetConfig
    seed: int
    tensors: dict[str, ad.Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "UNetParams":
        return UNetParams(
            self.config, self.seed,
            {k: ad.Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()})


def _layer_specs(cfg: UNetConfig):
    """(name, c_in, c_out, kernel extent, has batchnorm) for every convolution."""
    k = cfg.kernel_extent
    specs = []
    c_prev = cfg.in_channels
    for lvl in range(cfg.levels):
        c = cfg.width(lvl)
        if lvl > 0:
            specs.append((f"down{lvl}", c_prev, c, 2, True))
            c_prev = c
        specs.append((f"enc{lvl}.conv0", c_prev, c, k, True))
        specs.append((f"enc{lvl}.conv1", c, c, k, True))
        c_prev = c
    for lvl in range(cfg.levels - 2, -1, -1):
        c = cfg.width(lvl)
        specs.append((f"up{lvl}", c_prev, c, k, True))
        specs.append((f"dec{lvl}.conv0", 2 * c, c, k, True))
        specs.append((f"dec{lvl}.conv1", c, c, k, True))
        c_prev = c
    specs.append(("out", c_prev, cfg.out_channels, 1, False))
    return specs


def init_params(config: UNetConfig, seed: int, dtype=np.float64) -> UNetParams:
    """He-normal kernels (std sqrt(2 / fan_in)); batchnorm scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    d = config.spatial_rank
    params = UNetParams(config, int(seed))
    for name, c_in, c_out, k, has_bn in _layer_specs(config):
        shape = (c_out, c_in) + (k,) * d
        fan_in = c_in * k ** d
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params.tensors[f"{name}.w"] = ad.Tensor(w.astype(dtype), requires_grad=True)
        if has_bn:
            params.tensors[f"{name}.bn.scale"] = ad.Tensor(np.ones(c_out, dtype), requires_grad=True)
            params.tensors[f"{name}.bn.shift"] = ad.Tensor(np.zeros(c_out, dtype), requires_grad=True)
            params.buffers[f"{name}.bn.mean"] = np.zeros(c_out, dtype)
            params.buffers[f"{name}.bn.var"] = np.ones(c_out, dtype)
        else:
            params.tensors[f"{name}.b"] = ad.Tensor(np.zeros(c_out, dtype), requires_grad=True)
    return params


def _conv_bn_relu(params: UNetParams, name: str, x, mode: str, stride: int = 1):
    t = params.tensors
    padding = "none" if stride > 1 else "symmetric"
    y = ad.conv_nd(x, t[f"{name}.w"], stride=stride, padding_mode=padding)
    y = ad.batch_norm(y, t[f"{name}.bn.scale"], t[f"{name}.bn.shift"],
                      params.buffers[f"{name}.bn.mean"], params.buffers[f"{name}.bn.var"], mode)
    return ad.relu(y)


def forward(params: UNetParams, x, mode: str = "eval", seed=None) -> ad.Tensor:
    """Predict ``[N, 1, *spatial]`` from ``[N, 2, *spatial]`` (or unbatched ``[2, *spatial]``)."""
    cfg = params.config
    x = ad.as_tensor(x)
    unbatched = x.ndim == cfg.spatial_rank + 1
    if unbatched:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != cfg.spatial_rank + 2 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected [N, {cfg.in_channels}, spatial x{cfg.spatial_rank}], got {x.shape}")
    if any(n % cfg.divisor for n in x.shape[2:]):
        raise ShapeError(f"spatial extents {x.shape[2:]} must be divisible by {cfg.divisor}")
    skips = []
    h = x
    for lvl in range(cfg.levels):
        if lvl > 0:
            h = _conv_bn_relu(params, f"down{lvl}", h, mode, stride=2)
        h = _conv_bn_relu(params, f"enc{lvl}.conv0", h, mode)
        h = _conv_bn_relu(params, f"enc{lvl}.conv1", h, mode)
        skips.append(h)
    h = ad.dropout(h, cfg.dropout_rate, mode, seed)
    for lvl in range(cfg.levels - 2, -1, -1):
        h = ad.upsample_nearest(h, 2)
        h = _conv_bn_relu(params, f"up{lvl}", h, mode)
        h = ad.concat([skips[lvl], h], axis=1)
        h = _conv_bn_relu(params, f"dec{lvl}.conv0", h, mode)
        h = _conv_bn_relu(params, f"dec{lvl}.conv1", h, mode)
    t = params.tensors
    y = ad.conv_nd(h, t["out.w"], padding_mode="symmetric", bias=t["out.b"])
    if unbatched:
        y = ad.reshape(y, y.shape[1:])
    return y


def params_to_entries(params: UNetParams, meta: dict[str, float] | None = None) -> dict[str, np.ndarray]:
    """Flatten parameters, running stats, config and metadata for a LIPT container."""
    entries: dict[str, np.ndarray] = {}
    for key, value in params.config.to_dict().items():
        entries[f"config/{key}"] = np.asarray(float(value))
    entries["meta/seed"] = np.asarray(float(params.seed))
    for key, value in (meta or {}).items():
        entries[f"meta/{key}"] = np.asarray(float(value))
    for name, t in params.tensors.items():
        entries[f"param/{name}"] = t.data
    for name, b in params.buffers.items():
        entries[f"buffer/{name}"] = b
    return entries


def params_from_entries(entries) -> tuple[UNetParams, dict[str, float]]:
    cfg_kwargs = {}
    for f in UNetConfig.__dataclass_fields__.values():
        key = f"config/{f.name}"
        if key not in entries:
            raise ConfigError(f"checkpoint lacks {key}")
        v = float(entries[key])
        cfg_kwargs[f.name] = v if f.type in ("float", float) else int(v)
    cfg = UNetConfig(**cfg_kwargs)
    meta = {k[5:]: float(v) for k, v in entries.items() if k.startswith("meta/")}
    params = UNetParams(cfg, int(meta.pop("seed", 0)))
    expected = init_params(cfg, 0)
    for name in expected.tensors:
        key = f"param/{name}"
        if key not in entries:
            raise ConfigError(f"checkpoint lacks {key}")
        params.tensors[name] = ad.Tensor(np.array(entries[key]), requires_grad=True)
    for name in expected.buffers:
        params.buffers[name] = np.array(entries[f"buffer/{name}"])
    return params, meta
