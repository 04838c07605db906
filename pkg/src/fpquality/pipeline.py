"""End-to-end glue: synthetic datasets, label artifacts, and evaluation runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import evalkit
from .ingest import (
    QualityMap,
    QualityParams,
    SampleRecord,
    estimate_quality_map,
    identity_seed,
    read_quality_map,
    synth_fingerphoto,
    write_image,
    write_manifest,
    write_quality_map,
)
from .labelgen import QualityLabel, assign_labels, read_labels, write_labels
from .matchkit import (
    DEFAULT_MATCHERS,
    PairSet,
    ScoreTable,
    build_score_table,
    normalize_scores,
    read_pairs_csv,
    sample_pairs,
    write_pairs_csv,
)

logger = logging.getLogger(__name__)

# upper ends of the per-sample degradation draws at quality_spread = 1
MAX_NOISE = 0.35
MAX_BLUR = 2.0
MAX_CONTRAST_LOSS = 0.7
MAX_OCCLUSION = 0.5


def draw_quality_params(rng: np.random.Generator, spread: float) -> QualityParams:
    if not 0.0 <= spread <= 1.0:
        raise ValueError(f"quality_spread must be in [0, 1], got {spread}")
    u = rng.random(4)
    return QualityParams(
        noise_sigma=MAX_NOISE * spread * u[0],
        blur_radius=MAX_BLUR * spread * u[1],
        contrast=1.0 - MAX_CONTRAST_LOSS * spread * u[2],
        occlusion_frac=MAX_OCCLUSION * spread * u[3],
    )


def synth_dataset(
    n_subjects: int,
    fingers: int = 1,
    captures: int = 2,
    quality_spread: float = 0.5,
    seed: int = 0,
    size: tuple[int, int] = (224, 224),
    modality: str = "fingerphoto",
    prefix: str = "",
) -> list[SampleRecord]:
    """Synthetic dataset with per-sample random degradation."""
    if n_subjects < 2:
        raise ValueError("n_subjects must be >= 2")
    rng = np.random.default_rng([seed, 17])
    records = []
    for si in range(n_subjects):
        subject = f"{prefix}s{si:03d}"
        for fi in range(fingers):
            finger = f"f{fi}"
            ident = identity_seed(subject, finger, seed)
            for ci in range(captures):
                params = draw_quality_params(rng, quality_spread)
                capture_seed = int(rng.integers(0, 2**62))
                rec = synth_fingerphoto(
                    capture_seed, params, identity=ident, subject_id=subject, finger_id=finger,
                    capture_index=ci, size=size, modality=modality,
                )
                rec.meta["path"] = f"images/{rec.sample_id}.png"
                records.append(rec)
    return records


def write_dataset(records: Sequence[SampleRecord], out_dir: Path | str) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_image(out / rec.meta["path"], rec.image)
    manifest = out / "manifest.csv"
    write_manifest(manifest, records)
    return manifest


# ---------------------------------------------------------------------------
# Labels


@dataclass
class LabelArtifacts:
    maps: dict[str, QualityMap]
    pairs: PairSet
    raw_tables: list[ScoreTable]
    tables: list[ScoreTable]
    labels: list[QualityLabel]

    def label_by_id(self) -> dict[str, float]:
        return {lab.sample_id: lab.label for lab in self.labels}

    def write(self, out_dir: Path | str) -> None:
        out = Path(out_dir)
        (out / "qmaps").mkdir(parents=True, exist_ok=True)
        for sid, qmap in sorted(self.maps.items()):
            write_quality_map(out / "qmaps" / f"{sid}.qmap", qmap)
        write_pairs_csv(out / "pairs.csv", self.pairs)
        for raw, norm in zip(self.raw_tables, self.tables):
            raw.write(out / f"scores_{raw.matcher_id}.csv")
            norm.write(out / f"scores_{norm.matcher_id}_normalized.csv")
        write_labels(out / "labels.csv", self.labels)

    @classmethod
    def read(cls, out_dir: Path | str, matchers: Sequence[str] = DEFAULT_MATCHERS) -> "LabelArtifacts":
        out = Path(out_dir)
        maps = {p.stem: read_quality_map(p) for p in sorted((out / "qmaps").glob("*.qmap"))}
        raw = [ScoreTable.read(out / f"scores_{m}.csv") for m in matchers]
        norm = [ScoreTable.read(out / f"scores_{m}_normalized.csv") for m in matchers]
        return cls(maps, read_pairs_csv(out / "pairs.csv"), raw, norm, read_labels(out / "labels.csv"))


def quality_maps(samples: Sequence[SampleRecord], patch_size: int) -> dict[str, QualityMap]:
    return {s.sample_id: estimate_quality_map(s.image, patch_size) for s in samples}


def run_labeling(
    samples: Sequence[SampleRecord],
    patch_size: int = 16,
    threshold: int = 2,
    impostor_ratio: float = 1.0,
    seed: int = 0,
    matchers: Sequence[str] = DEFAULT_MATCHERS,
    maps: Optional[Mapping[str, QualityMap]] = None,
    raw_tables: Optional[Sequence[ScoreTable]] = None,
) -> LabelArtifacts:
    """Pairs, matcher scores, and labels for ``samples``.

    Precomputed ``maps`` or ``raw_tables`` are used instead of the built-in
    estimator and toy matchers when supplied.
    """
    maps = dict(maps) if maps is not None else quality_maps(samples, patch_size)
    pairs = sample_pairs(samples, impostor_ratio, seed)
    if raw_tables is None:
        raw_tables = [build_score_table(samples, pairs, m) for m in matchers]
    tables = [normalize_scores(t) for t in raw_tables]
    labels = assign_labels(tables, maps, threshold)
    return LabelArtifacts(maps, pairs, list(raw_tables), tables, labels)


# ---------------------------------------------------------------------------
# Evaluation


def predict_qualities(model, samples: Sequence[SampleRecord]) -> dict[str, float]:
    from .train import to_tensor

    if not samples:
        return {}
    scores = model.score_images(to_tensor([s.image for s in samples]))
    return {s.sample_id: float(q) for s, q in zip(samples, scores.tolist())}


@dataclass
class EvalResult:
    threshold: dict[str, float]
    curves: dict[tuple[str, str], evalkit.EdcCurve]
    pauc: dict[tuple[str, str], float]

    def summary_csv(self) -> str:
        lines = ["matcher,method,pauc"]
        lines += [f"{m},{meth},{v:.6f}" for (m, meth), v in sorted(self.pauc.items())]
        return "\n".join(lines) + "\n"


def evaluate(
    raw_tables: Sequence[ScoreTable],
    methods: Mapping[str, Mapping[str, float]],
    fmr_target: float = evalkit.DEFAULT_FMR,
    fractions: Sequence[float] = evalkit.DEFAULT_FRACTIONS,
    max_fraction: float = 0.2,
    random_draws: int = 0,
    seed: int = 0,
) -> EvalResult:
    """EDC and pAUC per (matcher, quality method).

    ``methods`` maps a method name to per-sample quality scores. With
    ``random_draws > 0`` a ``random`` method is added whose pAUC is the mean
    over that many random quality assignments (its curve is from the first).
    """
    thresholds, curves, paucs = {}, {}, {}
    for table in raw_tables:
        t = evalkit.decision_threshold([e.score for e in table.impostor_entries()], fmr_target)
        thresholds[table.matcher_id] = t
        genuine = [(e.probe_id, e.gallery_id, e.score) for e in table.genuine_entries()]
        for name, quality in methods.items():
            curve = evalkit.edc(evalkit.genuine_quality_pairs(genuine, quality), t, fractions, fmr_target)
            curves[(table.matcher_id, name)] = curve
            paucs[(table.matcher_id, name)] = evalkit.pauc(curve, max_fraction)
        if random_draws:
            rng = np.random.default_rng(seed)
            ids = sorted({sid for c, g, _ in genuine for sid in (c, g)})
            first = dict(zip(ids, rng.random(len(ids))))
            curves[(table.matcher_id, "random")] = evalkit.edc(
                evalkit.genuine_quality_pairs(genuine, first), t, fractions, fmr_target)
            paucs[(table.matcher_id, "random")] = evalkit.random_pauc(
                genuine, t, fractions, random_draws, seed, max_fraction)
    return EvalResult(thresholds, curves, paucs)
