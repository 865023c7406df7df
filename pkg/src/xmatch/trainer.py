"""SGD with momentum, the warm-up step schedule, two-stage training and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .data import PairedData, Split
from .dualpath import CrossModalNet, ModelConfig
from .errors import ConfigError, CorruptionError, DataError, FormatError, InputError, TrainingError
from .imagepipe import AugmentConfig, augment, normalize
from .retrieval import RankResult, evaluate_rank_k
from .tensor import Tensor, no_grad
from .textpipe import EmbeddingTable, embed_ids

METRIC_COLUMNS = ("epoch", "stage", "lr", "train_loss", "val_rank1", "val_rank5", "val_rank10")

# (upper epoch bound, rate) after the linear warm-up over epochs 1..10
_STEPS = ((55, 0.1), (80, 0.01), (100, 0.001), (120, 0.0001), (140, 0.00001))
_FINAL_RATE = 0.00001


def lr_schedule(e: int) -> float:
    """Learning rate for 1-based epoch ``e``; rates past epoch 140 hold at 1e-5."""
    if e < 1:
        raise InputError(f"epochs are 1-based, got {e}")
    if e <= 10:
        return e * 0.1 / 10
    for bound, rate in _STEPS:
        if e <= bound:
            return rate
    return _FINAL_RATE


def compressed_lr(e: int, total_epochs: int) -> float:
    """The same rate values squeezed so warm-up covers the first 12.5% of ``total_epochs``.

    Epoch ``e`` maps to the reference epoch ``e * 80 / total_epochs``.
    """
    if e < 1:
        raise InputError(f"epochs are 1-based, got {e}")
    ref = e * 80.0 / total_epochs
    if ref <= 10:
        return ref * 0.1 / 10
    for bound, rate in _STEPS:
        if ref <= bound:
            return rate
    return _FINAL_RATE


@dataclass
class TrainConfig:
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    batch_size: int = 16
    momentum: float = 0.9
    seed: int = 0
    strategy: int = 4
    # "compressed": one squeezed schedule over both stages; "staged": restarted per stage;
    # "reference": the uncompressed 160-epoch table
    schedule: str = "compressed"
    lr_scale: float = 0.1  # multiplies every rate of the schedule; 1.0 is the full-scale setting
    release: str = "all"  # stage-2 vision unfreezing: "all" or "last" (final two stages)
    seq_len: int = 40  # 120 at full scale
    embed_dim: int = 64
    augment: bool = True
    pad: int = 3  # crop padding at 96x32; 10 at 384x128
    hflip_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2")
        if self.strategy not in (1, 2, 3, 4):
            raise ConfigError(f"strategy must be 1..4, got {self.strategy}")
        if self.schedule not in ("compressed", "staged", "reference"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.release not in ("all", "last"):
            raise ConfigError(f"unknown release mode {self.release!r}")
        if not self.lr_scale > 0:
            raise ConfigError(f"lr_scale must be positive, got {self.lr_scale}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.total_epochs < 1:
            raise ConfigError("need at least one epoch")

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs

    def lr(self, e: int) -> float:
        if self.schedule == "reference":
            base = lr_schedule(e)
        elif self.schedule == "staged" and self.stage1_epochs and e > self.stage1_epochs:
            base = compressed_lr(e - self.stage1_epochs, self.stage2_epochs)
        elif self.schedule == "staged" and self.stage1_epochs:
            base = compressed_lr(e, self.stage1_epochs)
        else:
            base = compressed_lr(e, self.total_epochs)
        return base * self.lr_scale


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for a named stream; keys are strings or ints."""
    entropy = [int(seed)] + [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def build_model(model_cfg: ModelConfig, cfg: TrainConfig) -> CrossModalNet:
    if cfg.strategy == 1 and model_cfg.vision_init != "xavier":
        model_cfg = model_cfg.with_(vision_init="xavier")
    return CrossModalNet(model_cfg, substream(cfg.seed, "init"))


def make_table(vocab_size: int, cfg: TrainConfig) -> EmbeddingTable:
    return EmbeddingTable.random(vocab_size, cfg.embed_dim, seed=int(substream(cfg.seed, "embed").integers(2**31)))


# -- optimizer ---------------------------------------------------------------
@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, Tensor], state: OptimizerState, lr: float, momentum: float = 0.9) -> None:
    """Classical momentum: v <- m v + g; p <- p - lr v. Parameters without grad are skipped."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = p.data.dtype.type(momentum) * v + g
        state.velocity[name] = v
        p.data = p.data - p.data.dtype.type(lr) * v


# -- trainable sets per strategy --------------------------------------------
def _vision_release_names(model: CrossModalNet, release: str) -> set[str]:
    names = [n for n, _ in model.vision.named_parameters("vision.")]
    if release == "all":
        return set(names)
    stages = model.cfg.vision.stages
    keep_from = sum(st.blocks for st in stages[:-2])
    return {n for n in names if n.startswith("vision.blocks.") and int(n.split(".")[2]) >= keep_from}


def set_trainable(model: CrossModalNet, cfg: TrainConfig, stage: int) -> None:
    for _, p in model.named_parameters():
        p.requires_grad = True
    vision = dict(model.vision.named_parameters("vision."))
    if cfg.strategy == 2 or (cfg.strategy == 4 and stage == 1):
        trainable = set()
    elif cfg.strategy == 4:
        trainable = _vision_release_names(model, cfg.release)
    else:
        trainable = set(vision)
    for name, p in vision.items():
        p.requires_grad = name in trainable


# -- encoding / evaluation ---------------------------------------------------
def encode_split(
    model: CrossModalNet, split: Split, table: EmbeddingTable, aug: AugmentConfig, batch: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """(image descriptors, caption descriptors) in eval mode."""
    was_training = model.training
    model.eval()
    img_out, txt_out = [], []
    with no_grad():
        for s in range(0, len(split.images), batch):
            x = normalize(split.images[s : s + batch], aug.mean, aug.std)
            img_out.append(model.encode_image(Tensor(x)).data)
        for s in range(0, len(split.captions), batch):
            txt_out.append(model.encode_text(Tensor(embed_ids(split.captions[s : s + batch], table))).data)
    model.train(was_training)
    return np.concatenate(img_out), np.concatenate(txt_out)


def evaluate_split(model, split: Split, table: EmbeddingTable, aug: AugmentConfig) -> RankResult:
    img, txt = encode_split(model, split, table, aug)
    return evaluate_rank_k(txt, split.caption_ids, img, split.image_ids)


# -- checkpoints -------------------------------------------------------------
_CK_MAGIC = b"XMCK"
_CK_VERSION = 1


def fingerprint(settings: dict) -> str:
    canon = "\n".join(f"{k}={settings[k]}" for k in sorted(settings))
    return hashlib.sha256(canon.encode()).hexdigest()


def _pack_records(buf: io.BytesIO, named: list[tuple[str, np.ndarray]]) -> None:
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _unpack_records(raw: bytes, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    return out, pos


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    epoch: int
    fingerprint: str
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        buf = io.BytesIO()
        buf.write(_CK_MAGIC + struct.pack("<I", _CK_VERSION))
        _pack_records(buf, sorted(self.tensors.items()))
        _pack_records(buf, sorted(self.velocity.items()))
        meta = json.dumps({"epoch": self.epoch, "fingerprint": self.fingerprint, **self.meta}, sort_keys=True)
        raw = meta.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        payload = buf.getvalue()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload + struct.pack("<I", zlib.crc32(payload)))
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path, expect_fingerprint: str | None = None) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if len(raw) < 12 or raw[:4] != _CK_MAGIC:
            raise FormatError(f"{path}: not a checkpoint")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != _CK_VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, expected {_CK_VERSION}")
        (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
        if zlib.crc32(raw[:-4]) != crc:
            raise CorruptionError(f"{path}: checksum mismatch")
        try:
            tensors, pos = _unpack_records(raw, 8)
            velocity, pos = _unpack_records(raw, pos)
            (mlen,) = struct.unpack_from("<I", raw, pos)
            meta = json.loads(raw[pos + 4 : pos + 4 + mlen].decode("utf-8"))
        except (struct.error, ValueError) as exc:
            raise CorruptionError(f"{path}: malformed checkpoint ({exc})") from None
        epoch = meta.pop("epoch")
        fp = meta.pop("fingerprint")
        if expect_fingerprint is not None and fp != expect_fingerprint:
            raise FormatError(f"{path}: config fingerprint mismatch (checkpoint {fp[:12]}, run {expect_fingerprint[:12]})")
        return cls(tensors, velocity, epoch, fp, meta)


def model_state(model: CrossModalNet) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters()}
    state.update({name: b for name, b in model.named_buffers()})
    return state


def load_model_state(model: CrossModalNet, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    missing = (set(params) | set(buffers)) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks {sorted(missing)[:3]}")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise FormatError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.shape}")
        p.data = tensors[name].astype(p.dtype).copy()
    for name, b in buffers.items():
        b[...] = tensors[name]


# -- training loop -----------------------------------------------------------
@dataclass
class TrainResult:
    metrics: list[dict]
    checkpoint: Checkpoint


def write_metrics_csv(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r[c] if c in ("epoch", "stage") else repr(float(r[c])) for c in METRIC_COLUMNS])
    Path(path).write_text(buf.getvalue())


def train_two_stage(
    model: CrossModalNet,
    data: PairedData,
    table: EmbeddingTable,
    cfg: TrainConfig,
    loss_cfg: losses.LossConfig | None = None,
    run_fingerprint: str | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    checkpoint_path=None,
    metrics_path=None,
    meta: dict | None = None,
    log=None,
) -> TrainResult:
    """Train per the strategy in ``cfg``; returns per-epoch metrics and the final checkpoint.

    Every random draw comes from a stream keyed by (seed, epoch, sample), so a
    run resumed from any checkpoint replays the uninterrupted run exactly.
    """
    loss_cfg = loss_cfg or losses.LossConfig()
    if data.train.num_pairs < 2:
        raise DataError("training split needs at least two pairs")
    eval_split = data.val if data.val is not None else data.test
    if eval_split is None:
        raise DataError("dataset has neither a val nor a test split")
    fp = run_fingerprint or fingerprint({**asdict(cfg), **{f"loss.{k}": v for k, v in asdict(loss_cfg).items()}})
    aug = AugmentConfig(cfg.pad, cfg.hflip_prob, tuple(data.stats.mean), tuple(data.stats.std))
    labels_all = np.array([data.label_of[i] for i in data.train.caption_ids], dtype=np.int64)
    params = dict(model.named_parameters())

    state = OptimizerState()
    rows: list[dict] = []
    start = 1
    if resume is not None:
        if resume.fingerprint != fp:
            raise FormatError("checkpoint was written by a different configuration")
        load_model_state(model, resume.tensors)
        state.velocity = {k: v.copy() for k, v in resume.velocity.items()}
        rows = list(resume.meta.get("metrics", []))
        start = resume.epoch + 1

    last = cfg.total_epochs if stop_after is None else min(stop_after, cfg.total_epochs)
    model.train()
    for epoch in range(start, last + 1):
        stage = 1 if epoch <= cfg.stage1_epochs else 2
        set_trainable(model, cfg, stage)
        lr = cfg.lr(epoch)
        order = substream(cfg.seed, "sampler", epoch).permutation(data.train.num_pairs)
        batches = [order[s : s + cfg.batch_size] for s in range(0, len(order), cfg.batch_size)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches.pop()
        total = 0.0
        for idx in batches:
            imgs = data.train.images[data.train.caption_image[idx]]
            if cfg.augment:
                imgs = np.stack([augment(im, aug, substream(cfg.seed, "augment", epoch, int(i))) for im, i in zip(imgs, idx)])
            else:
                imgs = normalize(imgs, aug.mean, aug.std)
            emb = embed_ids(data.train.captions[idx], table)
            v = model.encode_image(Tensor(imgs))
            t = model.encode_text(Tensor(emb))
            loss = losses.total_loss(v, t, model.classifier, labels_all[idx], loss_cfg)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            for p in params.values():
                p.grad = None
            loss.backward()
            sgd_step(params, state, lr, cfg.momentum)
            total += loss.item()
        for p in params.values():
            p.grad = None
        res = evaluate_split(model, eval_split, table, aug)
        row = {
            "epoch": epoch,
            "stage": stage,
            "lr": lr,
            "train_loss": total / len(batches),
            "val_rank1": res.cmc.rank(1),
            "val_rank5": res.cmc.rank(5),
            "val_rank10": res.cmc.rank(10),
        }
        rows.append(row)
        if log:
            log(row)
    ckpt = Checkpoint(
        model_state(model),
        dict(state.velocity),
        last if last >= start else start - 1,
        fp,
        {**(meta or {}), "metrics": rows, "seed": cfg.seed, "rng": "seedsequence(seed, stream, epoch, sample)"},
    )
    ckpt.tensors = {k: np.array(v, copy=True) for k, v in ckpt.tensors.items()}
    if checkpoint_path is not None:
        ckpt.save(checkpoint_path)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows)
    return TrainResult(rows, ckpt)
