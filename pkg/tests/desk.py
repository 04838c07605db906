"""Desk-scale end-to-end runs shared by the acceptance tests."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch
from scipy.stats import spearmanr

from fpquality.net import ModelConfig, QualityModel, init_from, Checkpoint
from fpquality.pipeline import evaluate, predict_qualities, run_labeling, synth_dataset
from fpquality.train import TrainConfig, build_model, finetune, lq_ratio_oracle, pretrain

SIZE = (96, 96)
PATCH = 12
FMR = 1e-2
PRETRAIN_SUBJECTS = 300


def desk_model_config(**overrides) -> ModelConfig:
    opts = dict(channels_c=64, attention_dim=32, regional_hidden=128)
    opts.update(overrides)
    return ModelConfig.for_input(SIZE, PATCH, **opts)


def desk_train_config(seed: int) -> TrainConfig:
    # few optimizer steps at this scale, so a larger step size than the full-scale default
    return TrainConfig(lr=1e-3, epochs_pretrain=10, epochs_finetune=30, batch_size=50, seed=seed)


@dataclass
class DeskRun:
    seed: int
    pauc_model: dict
    pauc_random: dict
    spearman: dict
    mse: dict


def _held_out_metrics(model, test, gt):
    pred = predict_qualities(model, test)
    ids = sorted(gt)
    p = np.array([pred[i] for i in ids]) / 100.0
    g = np.array([gt[i] for i in ids]) / 100.0
    return pred, float(spearmanr(p, g).correlation), float(np.mean((p - g) ** 2))


@functools.lru_cache(maxsize=None)
def desk_run(seed: int) -> DeskRun:
    """Pretrain once, fine-tune the full and the no-regional-head model, evaluate both."""
    torch.set_num_threads(1)
    train = synth_dataset(20, 1, 4, 1.0, seed=seed, size=SIZE)
    test = synth_dataset(20, 1, 4, 1.0, seed=seed + 100, size=SIZE, prefix="t")
    prints = synth_dataset(PRETRAIN_SUBJECTS, 1, 3, 1.0, seed=seed + 200, size=SIZE,
                           modality="fingerprint", prefix="p")
    art = run_labeling(train, PATCH, impostor_ratio=1.0, seed=seed)
    test_art = run_labeling(test, PATCH, impostor_ratio=5.0, seed=seed)
    gt = test_art.label_by_id()
    tc = desk_train_config(seed)

    base = build_model(desk_model_config(), seed)
    pretrain(base, prints, lq_ratio_oracle(PATCH), tc, augment_copies=1)
    pretrained = Checkpoint(base, "pretrain")

    paucs, randoms, spear, mses = {}, {}, {}, {}
    for variant, regional in (("full", True), ("no-regional", False)):
        model = build_model(desk_model_config(use_regional_head=regional), seed)
        init_from(model, pretrained)
        finetune(model, train, art.labels, art.maps, art.pairs, art.tables, tc)
        pred, rho, mse = _held_out_metrics(model, test, gt)
        res = evaluate(test_art.raw_tables, {"model": pred}, fmr_target=FMR, random_draws=50, seed=seed)
        paucs[variant] = {m: res.pauc[(m, "model")] for m in res.threshold}
        randoms[variant] = {m: res.pauc[(m, "random")] for m in res.threshold}
        spear[variant], mses[variant] = rho, mse
    return DeskRun(seed, paucs, randoms, spear, mses)
