"""Flat ``section.key=value`` run configuration with flag > file > default precedence."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .dualpath import ModelConfig, PathConfig, StageConfig
from .errors import ConfigError
from .losses import LossConfig
from .trainer import TrainConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected on/off, got {s!r}")


def _pair(s: str) -> tuple[int, int]:
    parts = s.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"expected AxB, got {s!r}")
    return int(parts[0]), int(parts[1])


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _pairs(s: str) -> tuple[tuple[int, int], ...]:
    return tuple(_pair(x) for x in s.split(",") if x.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ConfigError(f"expected one of {options}, got {s!r}")
        return s

    return parse


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ",".join(f"{a}x{b}" for a, b in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# key -> (parser, default); None default means "derive from the model width"
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "model.cf": (int, 64),
    "model.r": (int, 16),
    "model.pool": (_choice("gap", "gmp", "both"), "gmp"),
    "model.gb": (_bool, True),
    "model.bn": (_bool, True),
    "model.full_scale": (_bool, False),
    "text.len": (int, 40),  # synthetic captions run to 16 tokens; 120 at full scale
    "text.embed_dim": (int, 64),
    "text.embedding_file": (str, ""),
    "text.init": (_choice("kaiming", "xavier"), "xavier"),
    "vision.init": (_choice("kaiming", "xavier"), "kaiming"),
    "image.height": (int, 96),
    "image.width": (int, 32),
    "train.stage1_epochs": (int, 20),
    "train.stage2_epochs": (int, 20),
    "train.batch": (int, 16),
    "train.momentum": (float, 0.9),
    "train.strategy": (int, 4),
    "train.schedule": (_choice("compressed", "staged", "reference"), "compressed"),
    "train.lr_scale": (float, 0.1),
    "train.release": (_choice("all", "last"), "all"),
    "train.augment": (_bool, True),
    "train.pad": (int, 3),
    "train.hflip": (float, 0.5),
    "loss.cmpm": (_bool, True),
    "loss.cmpc": (_bool, True),
    "loss.eps": (float, 1e-8),
}
# optional per-path architecture overrides
for _path in ("vision", "text"):
    SCHEMA.update({
        f"{_path}.kernel": (_pair, None),
        f"{_path}.stem_kernel": (_pair, None),
        f"{_path}.stem_stride": (_pair, None),
        f"{_path}.stem_width": (int, None),
        f"{_path}.stem_pool": (_bool, None),
        f"{_path}.widths": (_ints, None),
        f"{_path}.blocks": (_ints, None),
        f"{_path}.strides": (_pairs, None),
        f"{_path}.block": (_choice("basic", "bottleneck"), None),
    })


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict[str, Any]
    sources: dict[str, str]

    @classmethod
    def build(cls, file: str | Path | None = None, overrides: dict[str, str] | None = None) -> "RunConfig":
        values = {k: d for k, (_, d) in SCHEMA.items()}
        sources = {k: "default" for k in SCHEMA}
        layers = []
        if file is not None:
            layers.append(("file", parse_kv_text(Path(file).read_text(encoding="utf-8"), str(file))))
        if overrides:
            for key in overrides:
                if key not in SCHEMA:
                    raise ConfigError(f"unknown key {key!r}")
            layers.append(("flag", overrides))
        for tag, layer in layers:
            for key, raw in layer.items():
                try:
                    values[key] = SCHEMA[key][0](str(raw))
                except ValueError as exc:
                    raise ConfigError(f"{key}: {exc}") from None
                sources[key] = tag
        return cls(values, sources)

    def __getitem__(self, key: str):
        return self.values[key]

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(self.values.items()) if v is not None)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            stage1_epochs=v["train.stage1_epochs"],
            stage2_epochs=v["train.stage2_epochs"],
            batch_size=v["train.batch"],
            momentum=v["train.momentum"],
            seed=v["seed"],
            strategy=v["train.strategy"],
            schedule=v["train.schedule"],
            lr_scale=v["train.lr_scale"],
            release=v["train.release"],
            seq_len=v["text.len"],
            embed_dim=v["text.embed_dim"],
            augment=v["train.augment"],
            pad=v["train.pad"],
            hflip_prob=v["train.hflip"],
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(eps=self["loss.eps"], cmpm=self["loss.cmpm"], cmpc=self["loss.cmpc"])

    def model_config(self, num_classes: int, embed_dim: int | None = None) -> ModelConfig:
        v = self.values
        base = ModelConfig(
            cf=v["model.cf"],
            r=v["model.r"],
            pool=v["model.pool"],
            gb=v["model.gb"],
            embed_dim=embed_dim or v["text.embed_dim"],
            num_classes=num_classes,
            batch_norm=v["model.bn"],
            full_scale=v["model.full_scale"],
            vision_init=v["vision.init"],
            text_init=v["text.init"],
        )
        vision = _override_path(base.vision, v, "vision")
        text = _override_path(base.text, v, "text")
        if vision is base.vision and text is base.text:
            return base
        return ModelConfig(**{**{k: getattr(base, k) for k in vars(base)}, "vision": vision, "text": text})


def _override_path(cfg: PathConfig, v: dict, prefix: str) -> PathConfig:
    keys = [k for k in v if k.startswith(prefix + ".") and SCHEMA[k][1] is None and v[k] is not None]
    if not keys:
        return cfg
    get = lambda name, cur: v.get(f"{prefix}.{name}") if v.get(f"{prefix}.{name}") is not None else cur  # noqa: E731
    widths = get("widths", tuple(st.width for st in cfg.stages))
    blocks = get("blocks", tuple(st.blocks for st in cfg.stages))
    strides = get("strides", tuple(st.stride for st in cfg.stages))
    if not len(widths) == len(blocks) == len(strides):
        raise ConfigError(f"{prefix}: widths, blocks and strides must have the same number of stages")
    return PathConfig(
        in_channels=cfg.in_channels,
        kernel=get("kernel", cfg.kernel),
        stem_kernel=get("stem_kernel", cfg.stem_kernel),
        stem_stride=get("stem_stride", cfg.stem_stride),
        stem_width=get("stem_width", cfg.stem_width),
        stem_pool=get("stem_pool", cfg.stem_pool),
        stages=[StageConfig(b, w, tuple(s)) for b, w, s in zip(blocks, widths, strides)],
        block=get("block", cfg.block),
        batch_norm=cfg.batch_norm,
        init=cfg.init,
    )
