"""Residual image and text paths, pooling, gated block, descriptor heads and the shared classifier."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import BatchNorm, Conv2d, Identity, Linear, Module, init_weight
from .tensor import Tensor

POOL_MODES = ("gap", "gmp", "both")


@dataclass
class StageConfig:
    blocks: int
    width: int
    stride: tuple[int, int]


@dataclass
class PathConfig:
    in_channels: int
    kernel: tuple[int, int]
    stem_kernel: tuple[int, int]
    stem_stride: tuple[int, int]
    stem_width: int
    stem_pool: bool
    stages: list[StageConfig]
    block: str = "basic"
    batch_norm: bool = True
    init: str = "kaiming"

    def __post_init__(self):
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block type {self.block!r}")
        if self.init not in ("kaiming", "xavier"):
            raise ConfigError(f"unknown init scheme {self.init!r}")
        if not self.stages:
            raise ConfigError("a path needs at least one stage")

    @property
    def out_channels(self) -> int:
        return self.stages[-1].width

    @property
    def downsample(self) -> tuple[int, int]:
        """Total stride product along (height, width)."""
        sh, sw = self.stem_stride
        if self.stem_pool:
            sh, sw = sh * 2, sw * 2
        for st in self.stages:
            sh, sw = sh * st.stride[0], sw * st.stride[1]
        return sh, sw


def vision_config(cf: int = 64, full_scale: bool = False, init: str = "kaiming", batch_norm: bool = True) -> PathConfig:
    if full_scale:
        return PathConfig(
            in_channels=3, kernel=(3, 3), stem_kernel=(7, 7), stem_stride=(2, 2), stem_width=64, stem_pool=True,
            stages=[StageConfig(3, 256, (1, 1)), StageConfig(4, 512, (2, 2)),
                    StageConfig(6, 1024, (2, 2)), StageConfig(3, 2048, (2, 2))],
            block="bottleneck", batch_norm=batch_norm, init=init,
        )
    widths = _desk_widths(cf)
    return PathConfig(
        in_channels=3, kernel=(3, 3), stem_kernel=(3, 3), stem_stride=(2, 2), stem_width=widths[0], stem_pool=True,
        stages=[StageConfig(1, widths[0], (1, 1)), StageConfig(1, widths[1], (2, 2)),
                StageConfig(1, widths[2], (2, 2)), StageConfig(1, widths[3], (2, 2))],
        block="basic", batch_norm=batch_norm, init=init,
    )


def text_config(embed_dim: int, cf: int = 64, full_scale: bool = False, init: str = "xavier",
                batch_norm: bool = True) -> PathConfig:
    # word-axis downsampling happens at the second and third stage only
    if full_scale:
        return PathConfig(
            in_channels=embed_dim, kernel=(1, 3), stem_kernel=(1, 1), stem_stride=(1, 1), stem_width=64,
            stem_pool=False,
            stages=[StageConfig(3, 256, (1, 1)), StageConfig(4, 512, (1, 2)),
                    StageConfig(6, 1024, (1, 2)), StageConfig(3, 2048, (1, 1))],
            block="bottleneck", batch_norm=batch_norm, init=init,
        )
    widths = _desk_widths(cf)
    return PathConfig(
        in_channels=embed_dim, kernel=(1, 3), stem_kernel=(1, 1), stem_stride=(1, 1), stem_width=widths[0],
        stem_pool=False,
        stages=[StageConfig(1, widths[0], (1, 1)), StageConfig(1, widths[1], (1, 2)),
                StageConfig(1, widths[2], (1, 2)), StageConfig(1, widths[3], (1, 1))],
        block="basic", batch_norm=batch_norm, init=init,
    )


def _desk_widths(cf: int) -> list[int]:
    if cf % 8:
        raise ConfigError(f"desk final width must be divisible by 8, got {cf}")
    return [cf // 8, cf // 4, cf // 2, cf]


def output_shape(cfg: PathConfig, h: int, w: int) -> tuple[int, int, int]:
    """Feature-map shape from stride arithmetic alone (no weights needed)."""

    def step(n, k, s):
        return ops.conv_output_size(n, k, s, k // 2)

    h, w = step(h, cfg.stem_kernel[0], cfg.stem_stride[0]), step(w, cfg.stem_kernel[1], cfg.stem_stride[1])
    if cfg.stem_pool:
        h, w = step(h, 3, 2), step(w, 3, 2)
    for st in cfg.stages:
        for b in range(st.blocks):
            s = st.stride if b == 0 else (1, 1)
            h, w = step(h, cfg.kernel[0], s[0]), step(w, cfg.kernel[1], s[1])
    return h, w, cfg.out_channels


class _Norm(Module):
    def __init__(self, channels, enabled):
        self.bn = BatchNorm(channels) if enabled else Identity()

    def __call__(self, x):
        return self.bn(x)


class BasicBlock(Module):
    def __init__(self, cin, cout, kernel, stride, rng, init, bn):
        self.conv1 = Conv2d(cin, cout, kernel, stride, rng, init)
        self.norm1 = _Norm(cout, bn)
        self.conv2 = Conv2d(cout, cout, kernel, (1, 1), rng, init)
        self.norm2 = _Norm(cout, bn)
        self.shortcut = None
        if cin != cout or tuple(stride) != (1, 1):
            self.shortcut = Conv2d(cin, cout, (1, 1), stride, rng, init)
            self.norm_sc = _Norm(cout, bn)

    def __call__(self, x):
        y = T.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        skip = x if self.shortcut is None else self.norm_sc(self.shortcut(x))
        return T.relu(y + skip)


class Bottleneck(Module):
    def __init__(self, cin, cout, kernel, stride, rng, init, bn):
        mid = cout // 4
        self.conv1 = Conv2d(cin, mid, (1, 1), (1, 1), rng, init)
        self.norm1 = _Norm(mid, bn)
        self.conv2 = Conv2d(mid, mid, kernel, stride, rng, init)
        self.norm2 = _Norm(mid, bn)
        self.conv3 = Conv2d(mid, cout, (1, 1), (1, 1), rng, init)
        self.norm3 = _Norm(cout, bn)
        self.shortcut = None
        if cin != cout or tuple(stride) != (1, 1):
            self.shortcut = Conv2d(cin, cout, (1, 1), stride, rng, init)
            self.norm_sc = _Norm(cout, bn)

    def __call__(self, x):
        y = T.relu(self.norm1(self.conv1(x)))
        y = T.relu(self.norm2(self.conv2(y)))
        y = self.norm3(self.conv3(y))
        skip = x if self.shortcut is None else self.norm_sc(self.shortcut(x))
        return T.relu(y + skip)


class ResidualPath(Module):
    """Stem plus residual stages; NxHxWxC_in -> NxH'xW'xC_f."""

    def __init__(self, cfg: PathConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stem = Conv2d(cfg.in_channels, cfg.stem_width, cfg.stem_kernel, cfg.stem_stride, rng, cfg.init)
        self.stem_norm = _Norm(cfg.stem_width, cfg.batch_norm)
        block_cls = BasicBlock if cfg.block == "basic" else Bottleneck
        self.blocks: list[Module] = []
        cin = cfg.stem_width
        for st in cfg.stages:
            for b in range(st.blocks):
                stride = st.stride if b == 0 else (1, 1)
                self.blocks.append(block_cls(cin, st.width, cfg.kernel, stride, rng, cfg.init, cfg.batch_norm))
                cin = st.width

    def __call__(self, x: Tensor) -> Tensor:
        y = T.relu(self.stem_norm(self.stem(x)))
        if self.cfg.stem_pool:
            y = ops.max_pool2d(y, (3, 3), (2, 2), (1, 1))
        for blk in self.blocks:
            y = blk(y)
        return y


class VisionPath(ResidualPath):
    def __call__(self, x: Tensor) -> Tensor:
        dh, dw = self.cfg.downsample
        h, w = x.shape[-3], x.shape[-2]
        if h % dh or w % dw:
            raise ConfigError(f"image size {h}x{w} is not divisible by the path stride {dh}x{dw}")
        return super().__call__(x)


class TextPath(ResidualPath):
    def __call__(self, x: Tensor) -> Tensor:
        _, dw = self.cfg.downsample
        if x.shape[-3] != 1:
            raise DimensionError(f"text input must have height 1, got {x.shape}")
        if x.shape[-2] % dw:
            raise ConfigError(f"sequence length {x.shape[-2]} is not divisible by {dw}")
        return super().__call__(x)


class GatedBlock(Module):
    """f * sigmoid(W2 relu(W1 f)); no biases."""

    def __init__(self, dim: int, r: int, rng: np.random.Generator, init: str = "kaiming"):
        if dim % r:
            raise ConfigError(f"reduction ratio {r} must divide feature width {dim}")
        hidden = dim // r
        self.r = r
        self.w1 = Tensor(init_weight(rng, (hidden, dim), dim, hidden, init), requires_grad=True)
        self.w2 = Tensor(init_weight(rng, (dim, hidden), hidden, dim, init), requires_grad=True)

    def gate(self, f: Tensor) -> Tensor:
        return T.sigmoid(T.relu(f @ self.w1.T) @ self.w2.T)

    def __call__(self, f: Tensor) -> Tensor:
        return f * self.gate(f)


def gate_apply(f: Tensor, gb: GatedBlock) -> Tensor:
    squeeze = f.ndim == 1
    if squeeze:
        f = T.reshape(f, (1, f.shape[0]))
    if f.shape[-1] != gb.w1.shape[1]:
        raise DimensionError(f"gate expects {gb.w1.shape[1]} features, got {f.shape[-1]}")
    out = gb(f)
    return T.reshape(out, (out.shape[1],)) if squeeze else out


def pool(fmap: Tensor, mode: str) -> Tensor:
    if mode == "gmp":
        return ops.global_max_pool(fmap)
    if mode == "gap":
        return ops.global_avg_pool(fmap)
    if mode == "both":
        return T.concat([ops.global_avg_pool(fmap), ops.global_max_pool(fmap)], axis=-1)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def pool_and_head(fmap: Tensor, mode: str, gb: GatedBlock | None, head: Linear) -> Tensor:
    """pool -> (gated block) -> fully connected descriptor."""
    f = pool(fmap, mode)
    if gb is not None:
        f = gb(f)
    return head(f)


def activation_map(fmap) -> np.ndarray:
    """Channel sum of |features| followed by spatial l2 normalization (HxWxC -> HxW)."""
    x = np.asarray(fmap.data if isinstance(fmap, Tensor) else fmap, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] < 1:
        raise DimensionError(f"activation map needs an HxWxC array, got {x.shape}")
    a = np.abs(x).sum(axis=2)
    norm = np.sqrt((a * a).sum())
    return a / norm if norm > 0 else a


@dataclass
class ModelConfig:
    cf: int = 64
    r: int = 16
    pool: str = "gmp"
    gb: bool = True
    embed_dim: int = 64
    num_classes: int = 32
    batch_norm: bool = True
    full_scale: bool = False
    vision_init: str = "kaiming"
    text_init: str = "xavier"
    vision: PathConfig | None = field(default=None, repr=False)
    text: PathConfig | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.pool not in POOL_MODES:
            raise ConfigError(f"unknown pooling mode {self.pool!r}")
        if self.vision is None:
            self.vision = vision_config(self.cf, self.full_scale, self.vision_init, self.batch_norm)
        if self.text is None:
            self.text = text_config(self.embed_dim, self.cf, self.full_scale, self.text_init, self.batch_norm)
        if self.vision.out_channels != self.cf or self.text.out_channels != self.cf:
            raise ConfigError("both paths must end at the descriptor width cf")

    def with_(self, **kw) -> "ModelConfig":
        base = {k: v for k, v in vars(self).items() if k not in ("vision", "text")}
        base.update(kw)
        return ModelConfig(**base)


class CrossModalNet(Module):
    """Image and text paths feeding per-modality gate + FC heads and one shared classifier."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.vision = VisionPath(cfg.vision, rng)
        self.text = TextPath(cfg.text, rng)
        pooled = 2 * cfg.cf if cfg.pool == "both" else cfg.cf
        self.gate_img = GatedBlock(pooled, cfg.r, rng, cfg.vision_init) if cfg.gb else None
        self.gate_txt = GatedBlock(pooled, cfg.r, rng, cfg.text_init) if cfg.gb else None
        self.head_img = Linear(pooled, cfg.cf, rng, "kaiming")
        self.head_txt = Linear(pooled, cfg.cf, rng, "kaiming")
        self.classifier = Tensor(
            rng.standard_normal((cfg.cf, cfg.num_classes)).astype(np.float32), requires_grad=True, name="classifier"
        )

    def encode_image(self, images: Tensor) -> Tensor:
        return pool_and_head(self.vision(images), self.cfg.pool, self.gate_img, self.head_img)

    def encode_text(self, embeds: Tensor) -> Tensor:
        return pool_and_head(self.text(embeds), self.cfg.pool, self.gate_txt, self.head_txt)

    def vision_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.vision.named_parameters("vision."))
