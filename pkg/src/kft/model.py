"""Full network assembly: the 3D inception trunk interleaved with attention
blocks, the symbolic shape schedule, and parameter accounting.

The layer schedule is computed once (``build_plan``) and consumed both by the
symbolic ``shape_schedule`` walk and by actual model construction, so the two
can never drift apart.
"""

from __future__ import annotations

import json
import numpy as np
from dataclasses import dataclass, field, asdict

from .tensor import Tensor, ShapeError
from .layers import (Layer, Conv3d, BatchNorm3d, Linear, max_pool3d, avg_pool3d,
                     conv_output_size)
from .attention import KftBlock, KftBlockSpec, SpatialCompressor, LateralConnection

CONFIG_VERSION = 1


class ScheduleError(ValueError):
    """The layer schedule underflows (some dimension < 1) for this config."""


# -- configuration -------------------------------------------------------------


@dataclass
class ModelConfig:
    num_classes: int
    frames: int = 32
    size: int = 224
    variant: str = "3d"
    width: float = 1.0
    residual: str = "additive"
    lateral: bool = False
    kft_heads: list = field(default_factory=lambda: [2, 4, 4])
    kft_attentions: list = field(default_factory=lambda: [2, 4, 6])
    positional_encoding: bool = True
    feed_forward: bool = False
    head: str = "softmax_ce"          # 'softmax_ce' | 'sigmoid_bce'

    def __post_init__(self):
        if self.variant not in ("1d", "2d", "3d"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.head not in ("softmax_ce", "sigmoid_bce"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.residual not in ("additive", "concat", "none"):
            raise ValueError(f"unknown residual mode {self.residual!r}")
        if not 0.0 < self.width <= 1.0:
            raise ValueError(f"width must be in (0, 1], got {self.width}")
        if self.frames < 4:
            raise ScheduleError(
                f"frames={self.frames} too short: the 7-tap temporal kernel of "
                f"conv3d_1a needs at least 4 input frames")
        if len(self.kft_heads) != 3 or len(self.kft_attentions) != 3:
            raise ValueError("kft_heads and kft_attentions must each list 3 values")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def load_config_file(path) -> dict:
    """Read a versioned JSON config file: {"config_version", "model", "train"?}."""
    with open(path) as fh:
        raw = json.load(fh)
    if raw.get("config_version") != CONFIG_VERSION:
        raise ValueError(f"{path}: expected config_version {CONFIG_VERSION}")
    if "model" not in raw:
        raise ValueError(f"{path}: missing 'model' section")
    return raw


def save_config_file(path, model_config: ModelConfig, train: dict | None = None):
    doc = {"config_version": CONFIG_VERSION, "model": model_config.to_dict()}
    if train is not None:
        doc["train"] = train
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


# -- channel tables ------------------------------------------------------------

# inception branch widths (b1, b2_reduce, b2, b3_reduce, b3, b4_proj) at width 1
_INCEPTION = {
    "mixed_3b": (64, 96, 128, 16, 32, 32),      # -> 256
    "mixed_3c": (128, 128, 192, 32, 96, 64),    # -> 480
    "mixed_4b": (192, 96, 208, 16, 48, 64),     # -> 512
    "mixed_4c": (160, 112, 224, 24, 64, 64),    # -> 512
    "mixed_4d": (128, 128, 256, 24, 64, 64),    # -> 512
    "mixed_4e": (112, 144, 288, 32, 64, 64),    # -> 528
    "mixed_4f": (256, 160, 320, 32, 128, 128),  # -> 832
    "mixed_5b": (320, 192, 384, 48, 160, 160),  # -> 1024
    "mixed_5c": (384, 192, 384, 48, 128, 128),  # -> 1024
}

# published output sizes (channels, T, spatial) at the reference scale, used by
# the shapes command to flag rows whose declared sizes disagree with the
# computed arithmetic
_DECLARED = {
    "conv3d_1a": (64, 16, 112), "maxpool3d_2a": (64, 16, 56),
    "conv3d_2b": (64, 16, 56), "conv3d_2c": (192, 16, 56),
    "maxpool3d_3a": (192, 16, 28), "mixed_3b": (256, 16, 28),
    "maxpool3d_4a": (480, 8, 14), "mixed_4f": (832, 8, 14),
    "avgpool3d": (832, 8, 8), "kft_block1": (832, 8, 8),
    "maxpool3d_5a": (832, 4, 4), "mixed_5b": (1024, 4, 4),
    "kft_block2": (1024, 4, 4), "mixed_5c": (1024, 4, 4),
    "maxpool3d_6a": (1024, 2, 2), "kft_block3": (1024, 2, 2),
}


@dataclass
class PlanEntry:
    name: str
    kind: str                 # conv | pool_max | pool_avg | mixed | kft | sc | head
    out_shape: tuple          # (C, T, H, W)
    group: str                # display grouping for the shapes command
    params: dict = field(default_factory=dict)
    note: str = ""


def _scaled(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


def _pool_geometry(dims, kernel, stride, padding, clamp=False):
    kernel = list(kernel)
    padding = list(padding)
    for i in range(3):
        if clamp and kernel[i] > dims[i] + 2 * padding[i]:
            kernel[i] = dims[i]
            padding[i] = 0
    out = tuple(conv_output_size(d, k, s, p)
                for d, k, s, p in zip(dims, kernel, stride, padding))
    return tuple(kernel), tuple(stride), tuple(padding), out


def build_plan(config: ModelConfig) -> list[PlanEntry]:
    """Symbolic walk of the layer schedule; raises ScheduleError on underflow."""
    w = config.width
    entries: list[PlanEntry] = []
    c, t, h, wd = 3, config.frames, config.size, config.size

    def check(name, dims):
        if min(dims) < 1:
            raise ScheduleError(f"schedule underflow at {name}: output dims {dims}")

    def conv(name, group, out_c, kernel, stride, padding, clamp=False):
        nonlocal c, t, h, wd
        kernel, stride, padding, out = _pool_geometry(
            (t, h, wd), kernel, stride, padding, clamp)
        check(name, out)
        entries.append(PlanEntry(name, "conv", (out_c,) + out, group,
                                 dict(in_c=c, out_c=out_c, kernel=kernel,
                                      stride=stride, padding=padding)))
        c, (t, h, wd) = out_c, out

    def pool(name, group, kind, kernel, stride, padding, clamp=False):
        nonlocal t, h, wd
        kernel, stride, padding, out = _pool_geometry(
            (t, h, wd), kernel, stride, padding, clamp)
        check(name, out)
        entries.append(PlanEntry(name, kind, (c,) + out, group,
                                 dict(kernel=kernel, stride=stride, padding=padding)))
        t, h, wd = out

    def mixed(name, group):
        nonlocal c
        b1, b2r, b2, b3r, b3, b4 = (_scaled(x, w) for x in _INCEPTION[name])
        out_c = b1 + b2 + b3 + b4
        entries.append(PlanEntry(name, "mixed", (out_c, t, h, wd), group,
                                 dict(in_c=c, branches=(b1, b2r, b2, b3r, b3, b4))))
        c = out_c

    def kft(index):
        heads = config.kft_heads[index]
        atts = config.kft_attentions[index]
        if c % heads != 0:
            raise ValueError(
                f"kft_block{index + 1}: {c} channels not divisible by {heads} heads "
                f"at width {w}")
        entries.append(PlanEntry(f"kft_block{index + 1}", "kft", (c, t, h, wd),
                                 f"kft_block{index + 1}",
                                 dict(embed_dim=c, heads=heads, num_attentions=atts)))

    conv("conv3d_1a", "conv3d_1a", _scaled(64, w), (7, 7, 7), (2, 2, 2), (3, 3, 3))
    pool("maxpool3d_2a", "maxpool3d_2a", "pool_max", (1, 7, 7), (1, 2, 2), (0, 3, 3))
    conv("conv3d_2b", "conv3d_2b", _scaled(64, w), (1, 1, 1), (1, 1, 1), (0, 0, 0))
    conv("conv3d_2c", "conv3d_2c", _scaled(192, w), (3, 3, 3), (1, 1, 1), (1, 1, 1))
    pool("maxpool3d_3a", "maxpool3d_3a", "pool_max", (1, 3, 3), (1, 2, 2), (0, 1, 1))
    mixed("mixed_3b", "mixed_3 (x2)")
    mixed("mixed_3c", "mixed_3 (x2)")
    pool("maxpool3d_4a", "maxpool3d_4a", "pool_max", (3, 3, 3), (1, 2, 2), (1, 1, 1))
    for nm in ("mixed_4b", "mixed_4c", "mixed_4d", "mixed_4e", "mixed_4f"):
        mixed(nm, "mixed_4 (x5)")
    # condense the spatial map to at most 8x8 with a valid-padding average pool
    # (kernel 1x7x7 at the reference scale: 14 -> 8)
    kk = h - min(8, h) + 1
    pool("avgpool3d", "avgpool3d", "pool_avg", (1, kk, kk), (1, 1, 1), (0, 0, 0))

    if config.variant in ("1d", "2d"):
        entries.append(PlanEntry("spatial_compress", "sc", (c, t, 1, 1),
                                 "spatial_compress", dict(channels=c, spatial=h)))
        h = wd = 1
        for i in range(3):
            kft(i)
        entries.append(PlanEntry("head_linear", "head", (config.num_classes, 1, 1, 1),
                                 "head_linear",
                                 dict(in_dim=c * t, hidden=c, out=config.num_classes)))
    else:
        kft(0)
        pool("maxpool3d_5a", "maxpool3d_5a", "pool_max", (2, 2, 2), (2, 2, 2),
             (0, 0, 0), clamp=True)
        mixed("mixed_5b", "mixed_5b")
        kft(1)
        mixed("mixed_5c", "mixed_5c")
        pool("maxpool3d_6a", "maxpool3d_6a", "pool_max", (2, 2, 2), (2, 2, 2),
             (0, 0, 0), clamp=True)
        kft(2)
        conv("conv3d_logits", "conv3d_logits", config.num_classes, (2, 2, 2),
             (2, 2, 2), (0, 0, 0), clamp=True)
    return entries


def shape_schedule(config: ModelConfig) -> list[PlanEntry]:
    """Named output shapes of every layer, without allocating feature maps.
    Entries carry a note when the computed size deviates from the published
    reference schedule (only meaningful at the reference scale)."""
    entries = build_plan(config)
    reference_scale = (config.width == 1.0 and config.size == 224)
    for e in entries:
        decl = _DECLARED.get(e.name)
        if reference_scale and decl is not None:
            dc, dt, dh = decl
            cc, ct, ch, _ = e.out_shape
            diffs = []
            if cc != dc:
                diffs.append(f"channels {cc} vs declared {dc}")
            if ct != dt:
                diffs.append(f"T {ct} vs declared {dt}")
            if ch != dh:
                diffs.append(f"spatial {ch} vs declared {dh}")
            if diffs:
                e.note = "deviates: " + ", ".join(diffs)
    return entries


# -- layer containers ----------------------------------------------------------


class _ConvUnit(Layer):
    """Conv3d followed by optional batchnorm and relu. Convs feeding a
    batchnorm carry no bias."""

    def __init__(self, in_c, out_c, kernel, stride, padding, rng, dtype, init,
                 norm=True, relu=True):
        self.conv = Conv3d(in_c, out_c, kernel, stride, padding,
                           bias=not norm, rng=rng, dtype=dtype, init=init)
        self.bn = BatchNorm3d(out_c, dtype=dtype) if norm else None
        self.relu = relu

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y, training)
        return y.relu() if self.relu else y

    def named_parameters(self, prefix: str = ""):
        p = prefix + "." if prefix else ""
        out = {p + "weight": self.conv.weight}
        if self.conv.bias is not None:
            out[p + "bias"] = self.conv.bias
        if self.bn is not None:
            out.update(self.bn.named_parameters(p + "bn"))
        return out


class InceptionBlock3d(Layer):
    """Four parallel branches concatenated along channels: 1x1x1; 1x1x1
    reduce then 3x3x3; 1x1x1 reduce then 3x3x3; 3x3x3 maxpool then 1x1x1."""

    def __init__(self, in_c, branches, rng, dtype, init):
        b1, b2r, b2, b3r, b3, b4 = branches
        u = lambda i, o, k, p: _ConvUnit(i, o, k, (1, 1, 1), p, rng, dtype, init)
        self.b1 = u(in_c, b1, (1, 1, 1), (0, 0, 0))
        self.b2_reduce = u(in_c, b2r, (1, 1, 1), (0, 0, 0))
        self.b2 = u(b2r, b2, (3, 3, 3), (1, 1, 1))
        self.b3_reduce = u(in_c, b3r, (1, 1, 1), (0, 0, 0))
        self.b3 = u(b3r, b3, (3, 3, 3), (1, 1, 1))
        self.b4 = u(in_c, b4, (1, 1, 1), (0, 0, 0))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        from .tensor import concat
        y1 = self.b1(x, training)
        y2 = self.b2(self.b2_reduce(x, training), training)
        y3 = self.b3(self.b3_reduce(x, training), training)
        y4 = self.b4(max_pool3d(x, (3, 3, 3), (1, 1, 1), (1, 1, 1)), training)
        return concat([y1, y2, y3, y4], axis=1)


class _LinearHead(Layer):
    def __init__(self, in_dim, hidden, out, rng, dtype, init):
        self.fc1 = Linear(in_dim, hidden, rng=rng, dtype=dtype, init=init)
        self.fc2 = Linear(hidden, out, rng=rng, dtype=dtype, init=init)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


# -- the model -----------------------------------------------------------------


class KftModel:
    """The assembled network. Construction is deterministic given
    (config, seed, dtype)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 init="kaiming"):
        self.config = config
        self.dtype = dtype
        self.plan = build_plan(config)
        rng = np.random.default_rng(seed)
        self._stages = []       # (name, kind, obj_or_params)
        kft_shapes = {}
        for e in self.plan:
            if e.kind == "conv":
                unit = _ConvUnit(e.params["in_c"], e.params["out_c"], e.params["kernel"],
                                 e.params["stride"], e.params["padding"], rng, dtype, init,
                                 norm=(e.name != "conv3d_logits"),
                                 relu=(e.name != "conv3d_logits"))
                self._stages.append((e.name, "conv", unit))
            elif e.kind in ("pool_max", "pool_avg"):
                self._stages.append((e.name, e.kind, e.params))
            elif e.kind == "mixed":
                blk = InceptionBlock3d(e.params["in_c"], e.params["branches"],
                                       rng, dtype, init)
                self._stages.append((e.name, "mixed", blk))
            elif e.kind == "sc":
                sc = SpatialCompressor(e.params["channels"], e.params["spatial"],
                                       rng=rng, dtype=dtype, init=init)
                self._stages.append((e.name, "sc", sc))
            elif e.kind == "kft":
                spec = KftBlockSpec(variant=config.variant,
                                    embed_dim=e.params["embed_dim"],
                                    heads=e.params["heads"],
                                    num_attentions=e.params["num_attentions"],
                                    use_positional_encoding=config.positional_encoding,
                                    residual=config.residual,
                                    feed_forward=config.feed_forward)
                blk = KftBlock(spec, rng=rng, dtype=dtype, init=init)
                self._stages.append((e.name, "kft", blk))
                kft_shapes[e.name] = e.out_shape
            elif e.kind == "head":
                head = _LinearHead(e.params["in_dim"], e.params["hidden"],
                                   e.params["out"], rng, dtype, init)
                self._stages.append((e.name, "head", head))

        self.laterals = {}
        if config.lateral:
            names = [n for n, k, _ in self._stages if k == "kft"]
            for prev, nxt in zip(names, names[1:]):
                self.laterals[nxt] = LateralConnection(
                    kft_shapes[prev][0], kft_shapes[nxt][0],
                    rng=rng, dtype=dtype, init=init)

    # -- forward ---------------------------------------------------------------

    def forward(self, x: Tensor, training: bool = False,
                skip_attention: bool = False) -> Tensor:
        cfg = self.config
        expect = (3, cfg.frames, cfg.size, cfg.size)
        if x.ndim != 5 or x.shape[1:] != expect:
            raise ShapeError(f"forward: expected (N,{expect[0]},{expect[1]},"
                             f"{expect[2]},{expect[3]}), got {x.shape}")
        kft_outputs = {}
        prev_kft = None
        for name, kind, obj in self._stages:
            if kind in ("conv", "mixed"):
                x = obj(x, training)
            elif kind == "pool_max":
                x = max_pool3d(x, obj["kernel"], obj["stride"], obj["padding"])
            elif kind == "pool_avg":
                x = avg_pool3d(x, obj["kernel"], obj["stride"], obj["padding"])
            elif kind == "sc":
                x = obj(x, training)
            elif kind == "kft":
                if name in self.laterals and prev_kft is not None:
                    x = self.laterals[name](prev_kft, x)
                if not skip_attention:
                    x = obj(x)
                kft_outputs[name] = x
                prev_kft = x
            elif kind == "head":
                n = x.shape[0]
                x = obj(x.reshape(n, int(np.prod(x.shape[1:]))))
        if cfg.variant == "3d":
            # conv3d_logits output collapses to one logit vector per clip
            x = x.mean(axis=(2, 3, 4))
        return x

    def __call__(self, x, training=False, **kw):
        return self.forward(x, training, **kw)

    # -- parameters ------------------------------------------------------------

    def named_parameters(self) -> dict:
        out = {}
        for name, kind, obj in self._stages:
            if isinstance(obj, Layer):
                prefix = name if kind in ("kft", "sc", "head") else f"trunk.{name}"
                out.update(obj.named_parameters(prefix))
        for name, lat in self.laterals.items():
            out.update(lat.named_parameters(f"lateral_to_{name}"))
        return out

    def named_buffers(self) -> dict:
        """Non-trainable state (batchnorm running statistics)."""
        out = {}

        def walk(prefix, obj):
            for key, val in vars(obj).items():
                name = f"{prefix}.{key}"
                if isinstance(val, BatchNorm3d):
                    out[f"{name}.running_mean"] = val.running_mean
                    out[f"{name}.running_var"] = val.running_var
                elif isinstance(val, Layer):
                    walk(name, val)
                elif isinstance(val, (list, tuple)):
                    for i, item in enumerate(val):
                        if isinstance(item, Layer):
                            walk(f"{name}.{i}", item)

        for name, kind, obj in self._stages:
            if isinstance(obj, Layer):
                prefix = name if kind in ("kft", "sc", "head") else f"trunk.{name}"
                if isinstance(obj, BatchNorm3d):
                    out[f"{prefix}.running_mean"] = obj.running_mean
                    out[f"{prefix}.running_var"] = obj.running_var
                else:
                    walk(prefix, obj)
        return out

    def set_buffers(self, buffers: dict):
        """Overwrite running statistics in place from ``named_buffers`` output."""
        have = self.named_buffers()
        for name, arr in buffers.items():
            if name not in have:
                raise KeyError(f"unknown buffer {name}")
            have[name][...] = arr

    def count_parameters(self):
        """Exact learnable-scalar count, total plus per-layer breakdown."""
        per = {}
        for name, p in self.named_parameters().items():
            per[name] = int(p.size)
        return sum(per.values()), per

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    def kft_blocks(self):
        return [(n, obj) for n, k, obj in self._stages if k == "kft"]
