"""Glue between configuration, data, model, training and evaluation."""
from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass
from pathlib import Path


from .config import RunConfig, parse_kv_text
from .data import PairedData, load_paired_data
from .dualpath import CrossModalNet
from .errors import ConfigError, DataError
from .imagepipe import AugmentConfig
from .retrieval import RankResult, evaluate_rank_k, save_descriptors, write_report
from .synthdata import generate_dataset
from .textpipe import EmbeddingTable, load_embedding_table
from .trainer import Checkpoint, TrainResult, build_model, encode_split, load_model_state, make_table, train_two_stage

CHECKPOINT_NAME = "checkpoint.xmck"
METRICS_NAME = "metrics.csv"

ABLATION_AXES: dict[str, list[tuple[str, dict[str, str]]]] = {
    "pooling": [
        ("gap", {"model.pool": "gap", "model.gb": "off"}),
        ("gap+gb", {"model.pool": "gap", "model.gb": "on"}),
        ("gmp", {"model.pool": "gmp", "model.gb": "off"}),
        ("gmp+gb", {"model.pool": "gmp", "model.gb": "on"}),
        ("gap+gmp", {"model.pool": "both", "model.gb": "off"}),
        ("gap+gmp+gb", {"model.pool": "both", "model.gb": "on"}),
    ],
    "loss": [
        ("cmpm", {"loss.cmpm": "on", "loss.cmpc": "off"}),
        ("cmpc", {"loss.cmpm": "off", "loss.cmpc": "on"}),
        ("cmpm+cmpc", {"loss.cmpm": "on", "loss.cmpc": "on"}),
    ],
    "length": [(str(n), {"text.len": str(n)}) for n in (40, 60, 80, 100, 120)],
    "strategy": [(str(s), {"train.strategy": str(s)}) for s in (1, 2, 3, 4)],
    # frozen random tables standing in for 50/100/200/300-d vectors and the 768-d contextual ones
    "embedding": [(f"dim{d}", {"text.embed_dim": str(d)}) for d in (50, 100, 200, 300, 768)],
}


@dataclass
class Session:
    config: RunConfig
    data: PairedData
    table: EmbeddingTable
    model: CrossModalNet

    @property
    def augment(self) -> AugmentConfig:
        s = self.data.stats
        return AugmentConfig(self.config["train.pad"], self.config["train.hflip"], tuple(s.mean), tuple(s.std))


def open_session(config: RunConfig, data_dir, num_classes: int | None = None) -> Session:
    size = (config["image.height"], config["image.width"])
    data = load_paired_data(data_dir, length=config["text.len"], size=size)
    if config["text.embedding_file"]:
        table = load_embedding_table(config["text.embedding_file"])
        if table.vocab_size < len(data.vocab):
            raise ConfigError(f"embedding table has {table.vocab_size} rows, vocabulary needs {len(data.vocab)}")
    else:
        table = make_table(len(data.vocab), config.train_config())
    model_cfg = config.model_config(num_classes or data.num_classes, embed_dim=table.dim)
    model = build_model(model_cfg, config.train_config())
    return Session(config, data, table, model)


def train(
    config: RunConfig,
    data_dir,
    out_dir=None,
    resume: Checkpoint | str | Path | None = None,
    stop_after: int | None = None,
    log=None,
) -> tuple[Session, TrainResult]:
    session = open_session(config, data_dir)
    if resume is not None and not isinstance(resume, Checkpoint):
        resume = Checkpoint.load(resume, expect_fingerprint=config.fingerprint)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text())
    result = train_two_stage(
        session.model,
        session.data,
        session.table,
        config.train_config(),
        config.loss_config(),
        run_fingerprint=config.fingerprint,
        resume=resume,
        stop_after=stop_after,
        checkpoint_path=None if out is None else out / CHECKPOINT_NAME,
        metrics_path=None if out is None else out / METRICS_NAME,
        meta={"config": config.to_text()},
        log=log,
    )
    return session, result


def evaluate(session: Session, split: str = "test", out_dir=None) -> RankResult:
    part = getattr(session.data, split)
    if part is None:
        raise DataError(f"dataset has no {split} split")
    img, txt = encode_split(session.model, part, session.table, session.augment)
    result = evaluate_rank_k(txt, part.caption_ids, img, part.image_ids)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_descriptors(out / "gallery.xmdv", part.image_ids, img)
        save_descriptors(out / "queries.xmdv", part.caption_ids, txt)
        write_report(out / "cmc.csv", out / "summary.json", result.cmc)
    return result


def config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    text = ckpt.meta.get("config")
    if text is None:
        raise ConfigError("checkpoint does not carry its run configuration")
    return RunConfig.build(overrides=parse_kv_text(text, "<checkpoint>"))


def session_from_checkpoint(path, data_dir) -> Session:
    ckpt = Checkpoint.load(path)
    config = config_from_checkpoint(ckpt)
    num_classes = ckpt.tensors["classifier"].shape[1]
    session = open_session(config, data_dir, num_classes=num_classes)
    load_model_state(session.model, ckpt.tensors)
    return session


def run_once(config: RunConfig, data_dir, out_dir=None) -> dict[str, float]:
    session, _ = train(config, data_dir, out_dir)
    cmc = evaluate(session, "test").cmc
    return {"rank1": cmc.rank(1), "rank5": cmc.rank(5), "rank10": cmc.rank(10)}


def dataset_for_seed(root, seed: int, num_ids: int = 48, num_test: int = 16) -> Path:
    path = Path(root) / f"data_seed{seed}"
    if not (path / "manifest.tsv").exists():
        generate_dataset(num_ids, 4, 2, seed, path, num_test=num_test)
    return path


def ablate(
    axis: str, seeds: list[int], base: dict[str, str], out_dir, data_dir=None, config_file=None, log=None
) -> list[dict]:
    """Train and evaluate every setting of ``axis`` for every seed; writes ``ablation_<axis>.csv``."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, setting in ABLATION_AXES[axis]:
        per_seed = []
        for seed in seeds:
            data = Path(data_dir) if data_dir else dataset_for_seed(out, seed)
            cfg = RunConfig.build(config_file, {**base, **setting, "seed": str(seed)})
            res = run_once(cfg, data)
            per_seed.append(res)
            if log:
                log(f"{axis}={name} seed={seed} rank1={res['rank1']:.4f}")
        rows.append({
            "axis": axis,
            "setting": name,
            "seeds": len(seeds),
            **{f"{k}_median": statistics.median(r[k] for r in per_seed) for k in ("rank1", "rank5", "rank10")},
            "rank1_by_seed": ";".join(f"{r['rank1']:.4f}" for r in per_seed),
        })
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / f"ablation_{axis}.csv").write_text(buf.getvalue())
    return rows
