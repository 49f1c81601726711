"""Experiment orchestration: paired baseline/attack runs and the three metrics
(clean accuracy, trigger accuracy, trigger error), reported with full config
and seed provenance."""

from __future__ import annotations

import copy
import os
import time
from pathlib import Path
from typing import Callable

import torch

from . import augmix as am
from . import gan as gb
from . import transforms as tf
from .core import (
    Batch,
    ConfigError,
    ExperimentReport,
    ImageDataset,
    RngStream,
    load_dataset,
    save_report,
    write_curves_csv,
)
from .models import ModelSpec, TrainConfig, build_model, evaluate, predict, train
from .trigger import LabelMap, apply_trigger, checkerboard_patch, load_patch_file

DATA_ROOT_ENV = "AUGBD_DATA_ROOT"

ATTACK_KINDS = ("none", "simple", "gan", "augmix")


# ---------------------------------------------------------------------------
# Metrics

def triggered_images(dataset: ImageDataset, trigger_fn: Callable) -> torch.Tensor:
    return torch.stack([trigger_fn(dataset.images[i], i) for i in range(len(dataset))])


def trigger_accuracy(
    model,
    dataset: ImageDataset,
    trigger_fn: Callable,
    target: int,
    label_map: LabelMap | None = None,
    eligible_class: int | None = None,
) -> float:
    """Apply the trigger to every eligible test image and score predictions
    against the backdoor label (the constant target, or F(y) if a map is given)."""
    if eligible_class is not None:
        keep = torch.nonzero(dataset.labels == eligible_class).flatten()
        if len(keep) == 0:
            raise ConfigError(f"no test images of class {eligible_class}")
        dataset = ImageDataset(dataset.name, dataset.split, dataset.images[keep],
                               dataset.labels[keep], dataset.num_classes)
    images = triggered_images(dataset, trigger_fn)
    preds = predict(model, images)
    if label_map is not None:
        expected = torch.tensor([label_map.target if int(y) == label_map.source else int(y)
                                 for y in dataset.labels])
    else:
        expected = torch.full_like(dataset.labels, target)
    return float((preds == expected).float().mean())


def trigger_error(model, dataset: ImageDataset, trigger_fn: Callable) -> float:
    """Fraction of triggered test images predicted differently from their clean label."""
    images = triggered_images(dataset, trigger_fn)
    preds = predict(model, images)
    return float((preds != dataset.labels).float().mean())


# ---------------------------------------------------------------------------
# Config handling

DEFAULT_CONFIG = {
    "attack": "none",
    "seed": 0,
    "dataset": {"name": "mnist", "root": None, "train_subset": None, "test_subset": None},
    "model": {"arch": "mnist_cnn"},
    "train": {"epochs": 10, "batch_size": 256, "lr": 2e-3, "betas": [0.9, 0.999],
              "scheduler": "cosine"},
    "trigger": {"patch_file": None, "size": 4},
    "simple": {"transform": "rotate45cw", "sigma": 1.0, "cutmix_policy": "class0",
               "p": 0.5, "target_label": 0},
    "gan": {"p": 0.5, "epochs": 5, "batch_size": 256, "lr": 5e-4, "betas": [0.0, 0.9],
            "critic_iters": 5, "recon_weight": 20.0, "noise_dim": 16, "base_width": 32,
            "max_steps": None},
    "augmix": {"width": 20, "depth": 3, "iterations": 200, "norm_p": 2.0,
               "badnet_p": 0.5, "lr": 1e-3, "betas": [0.99, 0.999],
               "schedule": {"clean_epochs": 10, "malicious_batches": 10,
                            "batch_size": 128, "lr": 1e-3, "betas": [0.99, 0.999]}},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key: {key!r}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def make_config(overrides: dict | None = None) -> dict:
    cfg = _merge(DEFAULT_CONFIG, overrides or {})
    if cfg["attack"] not in ATTACK_KINDS:
        raise ConfigError(f"unknown attack kind: {cfg['attack']!r}")
    return cfg


def _data_root(cfg: dict) -> Path:
    root = cfg["dataset"]["root"] or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no dataset root: set dataset.root or ${DATA_ROOT_ENV}")
    return Path(root)


def _load_split(cfg: dict, split: str) -> ImageDataset:
    ds = cfg["dataset"]
    subset = ds["train_subset"] if split == "train" else ds["test_subset"]
    return load_dataset(ds["name"], _data_root(cfg), split, subset=subset)


def _model_spec(cfg: dict, train_ds: ImageDataset) -> ModelSpec:
    c, h = train_ds.images.shape[1], train_ds.images.shape[2]
    return ModelSpec(arch=cfg["model"]["arch"], in_channels=c, image_size=h,
                     num_classes=train_ds.num_classes)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                       betas=tuple(t["betas"]), scheduler=t["scheduler"], seed=seed)


def _patch_for(cfg: dict, image_shape: tuple[int, int, int]):
    if cfg["trigger"]["patch_file"]:
        return load_patch_file(cfg["trigger"]["patch_file"], image_shape)
    return checkerboard_patch(image_shape, size=cfg["trigger"]["size"])


# ---------------------------------------------------------------------------
# Attack runners. Each returns (model, metrics, curves) on top of a paired
# baseline trained with the same data seed.

def _run_clean(cfg: dict, train_ds, test_ds):
    model = build_model(_model_spec(cfg, train_ds), seed=cfg["seed"])
    log = train(model, train_ds, _train_config(cfg, cfg["seed"]), eval_dataset=test_ds)
    return model, log


def _simple_trigger_fn(cfg: dict, train_ds: ImageDataset):
    s = cfg["simple"]
    transform = tf.Transform(kind=s["transform"], sigma=s["sigma"],
                             cutmix_policy=s["cutmix_policy"])
    pool = train_ds if s["transform"] == "cutmix" else None
    return tf.make_eval_trigger(transform, seed=cfg["seed"], source_pool=pool), transform


def run_experiment(config: dict, out_dir=None) -> ExperimentReport:
    """Train the paired baseline and the attack run under a shared data seed and
    emit a report (plus CSV curves when out_dir is given)."""
    cfg = make_config(config)
    started = time.time()
    train_ds = _load_split(cfg, "train")
    test_ds = _load_split(cfg, "test")
    seed = cfg["seed"]
    image_shape = tuple(train_ds.images.shape[1:])
    patch = _patch_for(cfg, image_shape)

    metrics: dict = {}
    curves: dict = {}

    baseline, base_log = _run_clean(cfg, train_ds, test_ds)
    metrics["baseline_clean_accuracy"] = evaluate(baseline, test_ds)
    curves["baseline_train_loss"] = base_log.train_loss

    attack = cfg["attack"]
    if attack == "none":
        patch_fn = lambda img, i: apply_trigger(img, patch)
        metrics["clean_accuracy"] = metrics["baseline_clean_accuracy"]
        metrics["trigger_accuracy"] = trigger_accuracy(baseline, test_ds, patch_fn, target=0)
        metrics["baseline_trigger_accuracy"] = metrics["trigger_accuracy"]
        metrics["trigger_error"] = trigger_error(baseline, test_ds, patch_fn)
        curves["train_loss"] = base_log.train_loss

    elif attack == "simple":
        s = cfg["simple"]
        trigger_fn, transform = _simple_trigger_fn(cfg, train_ds)
        aug = tf.BackdoorAugmenter(transform=transform, p=s["p"],
                                   target_label=s["target_label"], seed=seed,
                                   source_pool=train_ds if transform.kind == "cutmix" else None)
        model = build_model(_model_spec(cfg, train_ds), seed=seed)
        log = train(model, train_ds, _train_config(cfg, seed),
                    augment=lambda b: tf.backdoor_batch(b, aug), eval_dataset=test_ds)
        metrics["clean_accuracy"] = evaluate(model, test_ds)
        metrics["trigger_accuracy"] = trigger_accuracy(model, test_ds, trigger_fn,
                                                       target=s["target_label"])
        metrics["baseline_trigger_accuracy"] = trigger_accuracy(baseline, test_ds, trigger_fn,
                                                                target=s["target_label"])
        curves["train_loss"] = log.train_loss
        curves["test_accuracy"] = log.test_accuracy

    elif attack == "gan":
        g = cfg["gan"]
        label_map = LabelMap()
        pairs = gb.build_pair_dataset(train_ds, patch, label_map, g["p"], seed)
        hyper = gb.GanHyper(epochs=g["epochs"], batch_size=g["batch_size"], lr=g["lr"],
                            betas=tuple(g["betas"]), critic_iters=g["critic_iters"],
                            recon_weight=g["recon_weight"], noise_dim=g["noise_dim"],
                            base_width=g["base_width"], max_steps=g["max_steps"], seed=seed)
        gen, gan_log = gb.train_generator(pairs, hyper, probe=(patch, label_map.source))
        noise = RngStream(seed, "gan-deploy")

        def gan_augment(batch: Batch) -> Batch:
            return gb.generate_augmented(gen, batch, noise)

        model = build_model(_model_spec(cfg, train_ds), seed=seed)
        log = train(model, train_ds, _train_config(cfg, seed), augment=gan_augment,
                    eval_dataset=test_ds)
        patch_fn = lambda img, i: apply_trigger(img, patch)
        metrics["clean_accuracy"] = evaluate(model, test_ds)
        # triggered target-class-content images should be pulled to the source label
        metrics["trigger_accuracy"] = trigger_accuracy(
            model, test_ds, patch_fn, target=label_map.source,
            eligible_class=label_map.target)
        metrics["baseline_trigger_accuracy"] = trigger_accuracy(
            baseline, test_ds, patch_fn, target=label_map.source,
            eligible_class=label_map.target)
        metrics["insertion_rate"] = gb.measure_insertion_rate(gen, train_ds, patch,
                                                              source_class=label_map.source)
        curves["train_loss"] = log.train_loss
        curves["critic_loss"] = gan_log.critic_loss
        curves["generator_loss"] = gan_log.generator_loss
        curves["insertion_rate"] = gan_log.insertion_rate

    else:  # augmix
        a = cfg["augmix"]
        sch = a["schedule"]
        schedule = am.AttackSchedule(clean_epochs=sch["clean_epochs"],
                                     malicious_batches=sch["malicious_batches"],
                                     batch_size=sch["batch_size"], lr=sch["lr"],
                                     betas=tuple(sch["betas"]), seed=seed)
        attack_cfg = am.AugmixAttackConfig(width=a["width"], depth=a["depth"],
                                           iterations=a["iterations"], norm_p=a["norm_p"],
                                           badnet_p=a["badnet_p"], lr=a["lr"],
                                           betas=tuple(a["betas"]), seed=seed)
        spec = _model_spec(cfg, train_ds)

        def paired_run(enabled: bool):
            target_model = build_model(spec, seed=seed)
            surrogate = build_model(spec, seed=seed + 1)
            return am.run_attack_schedule(target_model, surrogate, train_ds, schedule,
                                          attack_cfg, patch, target_label=0,
                                          attack_enabled=enabled)

        base_out = paired_run(False)
        atk_out = paired_run(True)
        patch_fn = lambda img, i: apply_trigger(img, patch)
        metrics["clean_accuracy"] = evaluate(atk_out["target_model"], test_ds)
        metrics["baseline_clean_accuracy"] = evaluate(base_out["target_model"], test_ds)
        metrics["trigger_accuracy"] = trigger_accuracy(atk_out["target_model"], test_ds,
                                                       patch_fn, target=0)
        metrics["baseline_trigger_accuracy"] = trigger_accuracy(base_out["target_model"],
                                                                test_ds, patch_fn, target=0)
        metrics["trigger_error"] = trigger_error(atk_out["target_model"], test_ds, patch_fn)
        metrics["baseline_trigger_error"] = trigger_error(base_out["target_model"], test_ds,
                                                          patch_fn)
        for k, curve in enumerate(atk_out["matching_error_curves"]):
            curves[f"matching_error_{k}"] = curve
        curves["clean_loss"] = base_out["clean_loss"]

    metrics["delta_clean_accuracy"] = metrics["clean_accuracy"] - metrics["baseline_clean_accuracy"]
    metrics["delta_trigger_accuracy"] = (metrics["trigger_accuracy"]
                                         - metrics["baseline_trigger_accuracy"])

    report = ExperimentReport(
        config=cfg,
        seed=seed,
        metrics=metrics,
        curves=curves,
        timestamps={"started": started, "finished": time.time()},
    )
    validate_report(report)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_report(report, out_dir / "report.json")
        write_curves_csv(report.curves, out_dir / "curves.csv")
    return report


_REQUIRED_METRICS = {
    "none": ["clean_accuracy", "trigger_accuracy", "delta_trigger_accuracy"],
    "simple": ["clean_accuracy", "trigger_accuracy", "baseline_clean_accuracy",
               "delta_clean_accuracy", "delta_trigger_accuracy"],
    "gan": ["clean_accuracy", "trigger_accuracy", "insertion_rate",
            "delta_clean_accuracy", "delta_trigger_accuracy"],
    "augmix": ["clean_accuracy", "trigger_accuracy", "trigger_error",
               "delta_clean_accuracy", "delta_trigger_accuracy"],
}


def validate_report(report: ExperimentReport) -> None:
    """Schema completeness: a report must carry every metric its attack type owns."""
    attack = report.config["attack"]
    missing = [k for k in _REQUIRED_METRICS[attack] if k not in report.metrics]
    if missing:
        raise ConfigError(f"report missing metrics for attack {attack!r}: {missing}")
    if attack == "augmix":
        expected = report.config["augmix"]["iterations"]
        for name, curve in report.curves.items():
            if name.startswith("matching_error_") and len(curve) != max(1, expected):
                raise ConfigError(f"curve {name} length {len(curve)} != iterations {expected}")
