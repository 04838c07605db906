"""Losses and the two-stage training procedure.

Stage one regresses the global quality head on fingerprint images against an
external quality oracle. Stage two fine-tunes the whole model on
fingerphoto pairs with the joint objective ``loss_feat + loss_qual``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .ingest import AUGMENTATIONS, QualityMap, SampleRecord, augment, estimate_quality_map
from .labelgen import QualityLabel, local_quality_ratio
from .matchkit import PairSet, ScoreTable, pair_scores
from .net import ModelConfig, QualityModel, save_checkpoint

logger = logging.getLogger(__name__)

# keeps the gradient of the map standard deviation finite on constant maps
STD_EPS = 1e-12


class TrainError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 2.0
    lambda3: float = 0.1
    lambda4: float = 10.0
    margin_m: float = 0.0
    epsilon: float = 1e-8

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise TrainError(f"{name} must be non-negative, got {value}")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 5e-4
    power: float = 0.9
    epochs_pretrain: int = 50
    epochs_finetune: int = 30
    batch_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.epochs_pretrain <= 0 or self.epochs_finetune <= 0 or self.batch_size <= 0:
            raise TrainError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or self.power < 0:
            raise TrainError("lr must be positive; weight_decay and power non-negative")


# ---------------------------------------------------------------------------
# Losses


def cosine(x_c: torch.Tensor, x_g: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Row-wise cosine similarity of flattened embeddings, (B, ...) -> (B,)."""
    a, b = x_c.flatten(1), x_g.flatten(1)
    denom = torch.clamp(a.norm(dim=1) * b.norm(dim=1), min=eps)
    return (a * b).sum(dim=1) / denom


def loss_sim(x_c: torch.Tensor, x_g: torch.Tensor, y: torch.Tensor, m: float = 0.0, eps: float = 1e-8) -> torch.Tensor:
    """Per-pair cosine embedding loss; ``y`` holds +1 (mated) or -1 (non-mated)."""
    cos = cosine(x_c, x_g, eps)
    y = torch.as_tensor(y, dtype=cos.dtype, device=cos.device).reshape(cos.shape)
    return torch.where(y > 0, 1.0 - cos, torch.clamp(cos - m, min=0.0))


def loss_feat(s: torch.Tensor, predicted_match: torch.Tensor, x_c: torch.Tensor, x_g: torch.Tensor,
              y: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    s = torch.as_tensor(s, dtype=predicted_match.dtype).reshape(predicted_match.shape)
    per_pair = (weights.lambda1 * (s - predicted_match) ** 2
                + weights.lambda2 * loss_sim(x_c, x_g, y, weights.margin_m, weights.epsilon))
    return per_pair.mean()


def _pop_std(x: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(x.var(dim=1, unbiased=False) + STD_EPS)


def loss_qual(q_g: torch.Tensor, predicted_quality: torch.Tensor,
              q_r: Optional[torch.Tensor] = None, predicted_map: Optional[torch.Tensor] = None,
              weights: LossWeights = LossWeights(), use_regional: bool = True) -> torch.Tensor:
    """Global-score error plus (optionally) the regional map terms.

    ``q_g`` is the target in [0, 1]; ``predicted_quality`` is on the 0-100
    scale of the quality head. Maps are (B, rows, cols) on the 0-4 scale.
    """
    q_g = torch.as_tensor(q_g, dtype=predicted_quality.dtype).reshape(predicted_quality.shape)
    total = weights.lambda3 * (q_g - predicted_quality / 100.0) ** 2
    if use_regional:
        if q_r is None or predicted_map is None:
            raise TrainError("regional terms need both the target and the predicted map")
        q_r = torch.as_tensor(q_r, dtype=predicted_map.dtype)
        if q_r.shape != predicted_map.shape:
            raise TrainError(f"map grids differ: {tuple(q_r.shape)} vs {tuple(predicted_map.shape)}")
        t, p = q_r.flatten(1), predicted_map.flatten(1)
        mse = ((t - p) ** 2).mean(dim=1)
        mean_gap = (t.mean(dim=1) - p.mean(dim=1)) ** 2
        std_gap = (_pop_std(t) - _pop_std(p)) ** 2
        total = total + weights.lambda4 * (mse + mean_gap + std_gap)
    return total.mean()


# ---------------------------------------------------------------------------
# Schedule and helpers


def poly_lr(base_lr: float, step: int, total_steps: int, power: float) -> float:
    return base_lr * (1.0 - step / total_steps) ** power


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig, total_steps: int):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda t: (1.0 - min(t, total_steps) / total_steps) ** cfg.power
    )
    return opt, sched


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).astype(np.float32)).unsqueeze(1)


def build_model(config: ModelConfig, seed: int = 0) -> QualityModel:
    torch.manual_seed(seed)
    return QualityModel(config)


@dataclass
class TrainResult:
    model: QualityModel
    stage: str
    history: list[dict] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checkpoint: Optional[Path] = None

    @property
    def losses(self) -> list[float]:
        return [row["loss_total"] for row in self.history]


LOG_FIELDS = ("epoch", "loss_feat", "loss_qual", "loss_total", "lr")


def write_log(path: Path | str, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])


def read_log(path: Path | str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# Stage one


def lq_ratio_oracle(patch_size: int, threshold: int = 2) -> Callable[[SampleRecord], float]:
    """Pretraining labels in [0, 100] from the share of good patches."""
    def oracle(record: SampleRecord) -> float:
        return 100.0 * local_quality_ratio(estimate_quality_map(record.image, patch_size), threshold)
    return oracle


def csv_oracle(path: Path | str) -> Callable[[SampleRecord], float]:
    """Pretraining labels read from a ``sample_id,score`` CSV (e.g. external NFIQ scores)."""
    with open(path, newline="", encoding="utf-8") as fh:
        table = {row["sample_id"]: float(row["score"]) for row in csv.DictReader(fh)}

    def oracle(record: SampleRecord) -> float:
        base = record.sample_id.split("+", 1)[0]
        if base not in table:
            raise TrainError(f"no oracle score for sample {record.sample_id!r}")
        return table[base]
    return oracle


def pretrain(
    model: QualityModel,
    samples: Sequence[SampleRecord],
    oracle: Callable[[SampleRecord], float],
    config: TrainConfig = TrainConfig(),
    checkpoint_path: Optional[Path | str] = None,
    augment_copies: int = 0,
    extra_meta: Optional[dict] = None,
) -> TrainResult:
    """Regress the global quality head against ``oracle`` labels (mean squared error on [0, 1]).

    ``augment_copies`` adds that many randomly augmented copies of every
    sample, cycling through the six augmentation kinds.
    """
    if not samples:
        raise TrainError("pretraining needs at least one sample")
    samples = list(samples)
    if augment_copies:
        extra = []
        for i, rec in enumerate(samples):
            for j in range(augment_copies):
                kind = AUGMENTATIONS[(i + j) % len(AUGMENTATIONS)]
                extra.append(augment(rec, kind, rng_seed=config.seed * 1_000_003 + i * 97 + j))
        samples += extra
    targets = []
    for rec in samples:
        score = float(oracle(rec))
        if not 0.0 <= score <= 100.0:
            raise TrainError(f"oracle score {score} for {rec.sample_id} outside [0, 100]")
        targets.append(score / 100.0)
    images = to_tensor([r.image for r in samples])
    target = torch.tensor(targets, dtype=torch.float32)

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs_pretrain
    opt, sched = make_optimizer(model, config, total)
    result = TrainResult(model, "pretrain")

    model.train()
    for epoch in range(1, config.epochs_pretrain + 1):
        perm = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for step in range(steps_per_epoch):
            idx = perm[step * config.batch_size:(step + 1) * config.batch_size]
            pred = model.predict_quality(model.encode_candidate(images[idx]))
            loss = ((pred / 100.0 - target[idx]) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            result.lrs.append(opt.param_groups[0]["lr"])
            opt.step()
            sched.step()
            epoch_loss += loss.item() * len(idx)
        epoch_loss /= n
        result.history.append({"epoch": epoch, "loss_feat": 0.0, "loss_qual": epoch_loss,
                               "loss_total": epoch_loss, "lr": result.lrs[-1]})
        logger.info("pretrain epoch %d loss %.6f", epoch, epoch_loss)

    model.eval()
    if checkpoint_path is not None:
        meta = {"train_config": vars(config), **(extra_meta or {})}
        result.checkpoint = save_checkpoint(checkpoint_path, model, "pretrain", meta)
    return result


# ---------------------------------------------------------------------------
# Stage two


def finetune(
    model: QualityModel,
    samples: Sequence[SampleRecord],
    labels: Sequence[QualityLabel],
    maps: Mapping[str, QualityMap],
    pairs: PairSet,
    score_tables: Sequence[ScoreTable],
    config: TrainConfig = TrainConfig(),
    weights: LossWeights = LossWeights(),
    checkpoint_path: Optional[Path | str] = None,
    extra_meta: Optional[dict] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Joint fine-tuning on (candidate, gallery, y, s) tuples.

    Each batch holds half genuine and half impostor pairs; the candidate and
    gallery roles of a pair are swapped at random. ``s`` is the mean of the
    normalized matcher scores of the pair. ``score_tables`` must already be
    normalized. ``on_step`` receives the model outputs of every step.
    """
    cfg = model.config
    by_id = {s.sample_id: s for s in samples}
    label_by_id = {lab.sample_id: lab for lab in labels}
    scores = pair_scores(score_tables)

    all_pairs = pairs.labelled()
    if not all_pairs:
        raise TrainError("fine-tuning needs at least one pair")
    used = {sid for c, g, _ in all_pairs for sid in (c, g)}
    for sid in sorted(used):
        if sid not in by_id:
            raise TrainError(f"pair references unknown sample {sid!r}")
        if sid not in label_by_id:
            raise TrainError(f"sample {sid!r} has no quality label")
        if cfg.use_regional_head and sid not in maps:
            raise TrainError(f"sample {sid!r} has no quality map")
    for c, g, _ in all_pairs:
        if (c, g) not in scores:
            raise TrainError(f"pair ({c}, {g}) has no matcher score")

    ids = sorted(used)
    index = {sid: i for i, sid in enumerate(ids)}
    images = to_tensor([by_id[s].image for s in ids])
    q_g = torch.tensor([label_by_id[s].target for s in ids], dtype=torch.float32)
    q_r = None
    if cfg.use_regional_head:
        q_r = torch.from_numpy(np.stack([maps[s].values for s in ids]).astype(np.float32))
        if tuple(q_r.shape[1:]) != cfg.map_out:
            raise TrainError(f"quality maps are {tuple(q_r.shape[1:])}, model expects {cfg.map_out}")

    def encode(pair_list):
        a = torch.tensor([index[c] for c, _, _ in pair_list], dtype=torch.long)
        b = torch.tensor([index[g] for _, g, _ in pair_list], dtype=torch.long)
        y = torch.tensor([float(t) for _, _, t in pair_list])
        s = torch.tensor([scores[(c, g)] for c, g, _ in pair_list], dtype=torch.float32)
        return a, b, y, s

    gen_a, gen_b, gen_y, gen_s = encode([p for p in all_pairs if p[2] == 1])
    imp_a, imp_b, imp_y, imp_s = encode([p for p in all_pairs if p[2] == -1])
    n_gen, n_imp = len(gen_a), len(imp_a)
    if cfg.use_fusion and (n_gen == 0 or n_imp == 0):
        raise TrainError("fine-tuning with fusion needs both genuine and impostor pairs")

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    steps_per_epoch = math.ceil(len(all_pairs) / config.batch_size)
    total = steps_per_epoch * config.epochs_finetune
    opt, sched = make_optimizer(model, config, total)
    n_gen_batch = config.batch_size - config.batch_size // 2 if n_imp else config.batch_size
    n_imp_batch = config.batch_size // 2 if n_gen else config.batch_size
    result = TrainResult(model, "finetune")

    def take(perm, count, step, n):
        if n == 0:
            return perm[:0]
        return perm[(step * count + torch.arange(count)) % n]

    model.train()
    for epoch in range(1, config.epochs_finetune + 1):
        gperm = torch.randperm(n_gen, generator=gen) if n_gen else torch.empty(0, dtype=torch.long)
        iperm = torch.randperm(n_imp, generator=gen) if n_imp else torch.empty(0, dtype=torch.long)
        sums = np.zeros(3)
        for step in range(steps_per_epoch):
            gi = take(gperm, min(n_gen_batch, n_gen), step, n_gen)
            ii = take(iperm, min(n_imp_batch, n_imp), step, n_imp)
            a = torch.cat([gen_a[gi], imp_a[ii]])
            b = torch.cat([gen_b[gi], imp_b[ii]])
            y = torch.cat([gen_y[gi], imp_y[ii]])
            s = torch.cat([gen_s[gi], imp_s[ii]])
            swap = torch.rand(len(a), generator=gen) < 0.5
            cand = torch.where(swap, b, a)
            gall = torch.where(swap, a, b)

            if cfg.use_fusion:
                out = model(images[cand], images[gall])
                lf = loss_feat(s, out["match"], out["x_c"], out["x_g"], y, weights)
            else:
                out = model(images[cand])
                lf = torch.zeros(())
            lq = loss_qual(q_g[cand], out["quality"],
                           q_r[cand] if q_r is not None else None, out["qmap"],
                           weights, use_regional=cfg.use_regional_head)
            loss = lf + lq
            opt.zero_grad()
            loss.backward()
            result.lrs.append(opt.param_groups[0]["lr"])
            opt.step()
            sched.step()
            sums += (lf.item(), lq.item(), loss.item())
            if on_step is not None:
                on_step(out)
        means = sums / steps_per_epoch
        result.history.append({"epoch": epoch, "loss_feat": means[0], "loss_qual": means[1],
                               "loss_total": means[2], "lr": result.lrs[-1]})
        logger.info("finetune epoch %d feat %.5f qual %.5f", epoch, means[0], means[1])

    model.eval()
    if checkpoint_path is not None:
        meta = {"train_config": vars(config), "loss_weights": vars(weights), **(extra_meta or {})}
        result.checkpoint = save_checkpoint(checkpoint_path, model, "finetune", meta)
    return result
