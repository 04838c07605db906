"""Utility-driven quality labels from normalized matcher scores.

Each sample's genuine scores are summarized, ranked against the matcher's
pool of genuine scores (ECDF), and binned into ten classes. Classes from the
matchers are averaged and then attenuated by the share of good patches in the
sample's quality map:

    label = 10 * avg_class * lq_ratio            (0 <= label <= 100)
"""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ingest import QualityMap
from .matchkit import ScoreTable

logger = logging.getLogger(__name__)

N_CLASSES = 10
DEFAULT_THRESHOLD = 2


class LabelError(ValueError):
    pass


@dataclass
class QualityLabel:
    sample_id: str
    class_per_matcher: dict[str, int]
    avg_class: float
    lq_ratio: float
    label: float

    @property
    def target(self) -> float:
        """Label rescaled to [0, 1] for regression."""
        return self.label / 100.0


def ecdf_class(sample_scores: Sequence[float], all_scores: Sequence[float]) -> int:
    """Decile class (1-10) of a sample's mean genuine score within ``all_scores``."""
    if len(sample_scores) == 0 or len(all_scores) == 0:
        raise LabelError("ecdf_class needs non-empty sample and population scores")
    summary = float(np.mean(sample_scores))
    pool = np.asarray(all_scores, dtype=np.float64)
    count = int(np.count_nonzero(pool <= summary))
    # ceil(N_CLASSES * count / size) in exact integer arithmetic
    return max(1, -(-N_CLASSES * count // pool.size))


def local_quality_ratio(qmap: QualityMap, threshold: int = DEFAULT_THRESHOLD) -> float:
    if not 0 <= threshold <= 4:
        raise LabelError(f"threshold must be in 0..4, got {threshold}")
    values = qmap.values
    return float(np.count_nonzero(values >= threshold) / values.size)


def _genuine_scores_by_sample(table: ScoreTable) -> dict[str, list[float]]:
    # Probe-role pass, then the same pass with probe and gallery exchanged.
    scores: dict[str, list[float]] = defaultdict(list)
    genuine = table.genuine_entries()
    for e in genuine:
        scores[e.probe_id].append(e.score)
    for e in genuine:
        scores[e.gallery_id].append(e.score)
    return scores


def assign_labels(
    tables: Sequence[ScoreTable],
    maps: Mapping[str, QualityMap],
    threshold: int = DEFAULT_THRESHOLD,
) -> list[QualityLabel]:
    """Label every sample that appears in ``tables`` or ``maps``.

    ``tables`` must already be normalized. Samples with no genuine score under
    a matcher get class 1 for that matcher. Labels are returned sorted by
    sample id.
    """
    if not tables:
        raise LabelError("at least one score table is required")
    ids = set(maps)
    for t in tables:
        for e in t.entries:
            ids.update((e.probe_id, e.gallery_id))
    missing = sorted(i for i in ids if i not in maps)
    if missing:
        raise LabelError(f"no quality map for sample(s): {', '.join(missing[:5])}"
                         + (" ..." if len(missing) > 5 else ""))

    per_table = []
    for t in tables:
        pool = [e.score for e in t.genuine_entries()]
        per_table.append((t.matcher_id, pool, _genuine_scores_by_sample(t)))

    labels = []
    for sid in sorted(ids):
        classes = {}
        for matcher_id, pool, by_sample in per_table:
            own = by_sample.get(sid)
            if not own:
                logger.warning("sample %s has no genuine score under %s; assigning class 1", sid, matcher_id)
                classes[matcher_id] = 1
            else:
                classes[matcher_id] = ecdf_class(own, pool)
        avg = float(np.mean(list(classes.values())))
        ratio = local_quality_ratio(maps[sid], threshold)
        labels.append(QualityLabel(sid, classes, avg, ratio, 10.0 * avg * ratio))
    return labels


# ---------------------------------------------------------------------------
# CSV


def _column(matcher_id: str) -> str:
    return "class_" + matcher_id.replace("-", "_")


def labels_to_csv(labels: Sequence[QualityLabel], matcher_ids: Sequence[str] | None = None) -> str:
    if matcher_ids is None:
        matcher_ids = list(labels[0].class_per_matcher) if labels else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", *(_column(m) for m in matcher_ids), "avg_class", "lq_ratio", "label"])
    for lab in labels:
        writer.writerow([
            lab.sample_id,
            *(lab.class_per_matcher[m] for m in matcher_ids),
            f"{lab.avg_class:.4f}", f"{lab.lq_ratio:.4f}", f"{lab.label:.4f}",
        ])
    return buf.getvalue()


def labels_from_csv(text: str) -> list[QualityLabel]:
    reader = csv.DictReader(io.StringIO(text))
    class_cols = [c for c in reader.fieldnames or [] if c.startswith("class_")]
    out = []
    for row in reader:
        classes = {c[len("class_"):].replace("_", "-"): int(row[c]) for c in class_cols}
        out.append(QualityLabel(row["sample_id"], classes, float(row["avg_class"]),
                                float(row["lq_ratio"]), float(row["label"])))
    return out


def write_labels(path: Path | str, labels: Sequence[QualityLabel]) -> None:
    Path(path).write_text(labels_to_csv(labels), encoding="utf-8")


def read_labels(path: Path | str) -> list[QualityLabel]:
    return labels_from_csv(Path(path).read_text(encoding="utf-8"))
