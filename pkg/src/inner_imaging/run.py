"""Experiment orchestration: data, network, training loop and checkpoints.

These are the library calls behind every CLI command.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import data_io
from .backbones import ArchDescriptor, Network, build
from .config import ExperimentConfig
from .data_io import CheckpointError, Dataset
from .training import Trainer, evaluate

__all__ = [
    "prepare_data",
    "checkpoint_state",
    "restore_state",
    "make_trainer",
    "train",
    "resume",
    "evaluate_checkpoint",
]


def prepare_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Load or synthesise train/test splits and standardise them with train statistics."""
    if cfg.dataset == "synthetic":
        full = data_io.synth_dataset(
            classes=cfg.num_classes, size=cfg.synth_train + cfg.synth_test,
            image=(cfg.image_size, cfg.image_size), channels=cfg.in_channels,
            seed=cfg.synth_seed, noise=cfg.synth_noise,
        )
        train, test = data_io.split(full, cfg.synth_train)
    elif cfg.dataset in ("raw_u8", "csv"):
        shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
        train = data_io.load_dataset(cfg.train_path, cfg.dataset, shape, cfg.num_classes, "train")
        test = data_io.load_dataset(cfg.test_path, cfg.dataset, shape, cfg.num_classes, "test")
    elif cfg.dataset == "cifar":
        lb = 1 if cfg.num_classes == 10 else 2
        train = data_io.load_cifar_binary(cfg.train_path, lb, "train")
        test = data_io.load_cifar_binary(cfg.test_path, lb, "test")
    else:
        raise ValueError(f"unknown dataset kind {cfg.dataset!r}")
    return data_io.standardize(train, test)


def checkpoint_state(trainer: Trainer, cfg: ExperimentConfig) -> dict:
    net = trainer.net
    return dict(
        architecture=net.descriptor.to_dict(),
        params=[(n, p.data) for n, p in net.named_parameters()],
        buffers=list(net.named_buffers()),
        optimizer=trainer.optimizer.state(),
        rng_state=trainer.rng.bit_generator.state,
        extra={"epoch": trainer.epoch, "config": cfg.to_dict()},
    )


def restore_state(trainer: Trainer, bundle: dict) -> None:
    """Copy a loaded checkpoint into ``trainer``; any name or shape mismatch is rejected."""
    net = trainer.net
    if bundle["architecture"] != net.descriptor.to_dict():
        raise CheckpointError("checkpoint architecture differs from the configured network")
    own = list(net.named_parameters())
    if [n for n, _ in own] != [n for n, _ in bundle["params"]]:
        raise CheckpointError("checkpoint parameter names do not match the network")
    for (name, p), (_, arr) in zip(own, bundle["params"]):
        if p.shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != network shape {p.shape}")
    bufs = list(net.named_buffers())
    if [(n, b.shape) for n, b in bufs] != [(n, b.shape) for n, b in bundle["buffers"]]:
        raise CheckpointError("checkpoint buffers do not match the network")
    for (_, p), (_, arr) in zip(own, bundle["params"]):
        p.data[...] = arr
    for (_, b), (_, arr) in zip(bufs, bundle["buffers"]):
        b[...] = arr
    trainer.optimizer.load_state(bundle["optimizer"])
    trainer.rng.bit_generator.state = bundle["rng"]
    trainer.epoch = int(bundle["extra"]["epoch"])


def make_trainer(cfg: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None, log: bool = True) -> Trainer:
    train_ds, test_ds = data or prepare_data(cfg)
    desc = cfg.descriptor()
    if train_ds.images.shape[1:] != (desc.in_channels, desc.image_size, desc.image_size):
        raise ValueError(f"data shape {train_ds.images.shape[1:]} does not match the network input")
    net = build(desc, seed=cfg.seed)
    tcfg = cfg.train_config()
    aug = None
    if tcfg.augment != "none":
        pad = max(1, desc.image_size // 8)
        aug = lambda x, rng: data_io.augment(x, tcfg.augment, rng, pad=pad)  # noqa: E731
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / cfg.checkpoint

    def save(trainer: Trainer) -> None:
        data_io.save_checkpoint(ckpt, **checkpoint_state(trainer, cfg))
        trainer.last_checkpoint = str(ckpt)

    return Trainer(
        net, tcfg, (train_ds.images, train_ds.labels), (test_ds.images, test_ds.labels),
        augment=aug, log_path=out / cfg.metrics_log if log else None, on_epoch_end=save,
    )


def train(cfg: ExperimentConfig, data=None, until: int | None = None) -> Trainer:
    """Train from scratch; the metrics log is started afresh."""
    log = Path(cfg.out_dir) / cfg.metrics_log
    if log.exists():
        log.unlink()
    trainer = make_trainer(cfg, data)
    trainer.fit(until)
    return trainer


def resume(cfg: ExperimentConfig, checkpoint: str | Path, data=None, until: int | None = None) -> Trainer:
    """Continue a run from ``checkpoint``, appending to its metrics log."""
    trainer = make_trainer(cfg, data)
    restore_state(trainer, data_io.load_checkpoint(checkpoint))
    trainer.last_checkpoint = str(checkpoint)
    trainer.fit(until)
    return trainer


def network_from_checkpoint(path: str | Path) -> Network:
    bundle = data_io.load_checkpoint(path)
    net = build(ArchDescriptor.from_dict(bundle["architecture"]))
    own = list(net.named_parameters())
    if len(own) != len(bundle["params"]):
        raise CheckpointError(f"checkpoint has {len(bundle['params'])} parameters, network has {len(own)}")
    for (name, p), (bname, arr) in zip(own, bundle["params"]):
        if name != bname or p.shape != arr.shape:
            raise CheckpointError(f"parameter {bname!r} {arr.shape} does not fit {name!r} {p.shape}")
        p.data[...] = arr
    for (_, b), (_, arr) in zip(net.named_buffers(), bundle["buffers"]):
        b[...] = arr
    return net


def evaluate_checkpoint(cfg: ExperimentConfig, path: str | Path, data=None) -> dict:
    _, test_ds = data or prepare_data(cfg)
    net = network_from_checkpoint(path)
    return evaluate(net, test_ds.images, test_ds.labels)
