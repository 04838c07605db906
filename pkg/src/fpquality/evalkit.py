"""Error-versus-discard evaluation of quality scores."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_FMR = 1e-3
DEFAULT_FRACTIONS = tuple(round(0.01 * i, 2) for i in range(0, 21))
TIE_MODES = ("stable", "group")


class EvalError(ValueError):
    pass


@dataclass
class EdcCurve:
    fractions: list[float]
    fnmr: list[float]
    fmr_target: float = DEFAULT_FMR
    threshold: float = float("nan")

    def __post_init__(self):
        if len(self.fractions) != len(self.fnmr):
            raise EvalError("fractions and fnmr differ in length")
        if any(b <= a for a, b in zip(self.fractions, self.fractions[1:])):
            raise EvalError("fractions must be strictly increasing")
        if any(not 0.0 <= v <= 1.0 for v in self.fnmr):
            raise EvalError("fnmr values must lie in [0, 1]")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("fraction,fnmr\n")
        for f, v in zip(self.fractions, self.fnmr):
            buf.write(f"{f:.6f},{v:.6f}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, fmr_target: float = DEFAULT_FMR, threshold: float = float("nan")) -> "EdcCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([float(r["fraction"]) for r in rows], [float(r["fnmr"]) for r in rows], fmr_target, threshold)

    def write(self, path: Path | str) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path: Path | str) -> "EdcCurve":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


def decision_threshold(impostor_scores: Sequence[float], fmr_target: float = DEFAULT_FMR) -> float:
    """Smallest threshold accepting at most ``fmr_target`` of the impostors.

    A comparison is accepted when ``score >= t``. The threshold is placed just
    above the ceil((1 - fmr) N)-th smallest impostor score.
    """
    scores = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    if scores.size == 0:
        raise EvalError("need at least one impostor score")
    if not 0.0 < fmr_target < 1.0:
        raise EvalError(f"fmr_target must be in (0, 1), got {fmr_target}")
    n = scores.size
    if n < 1.0 / fmr_target:
        logger.warning("only %d impostor scores for FMR %.0e; threshold is coarse", n, fmr_target)
    k = max(1, math.ceil((1.0 - fmr_target) * n - 1e-9))
    return float(np.nextafter(scores[k - 1], np.inf))


def fnmr_at(genuine_scores: Sequence[float], threshold: float) -> float:
    g = np.asarray(genuine_scores, dtype=np.float64)
    return float(np.count_nonzero(g < threshold) / g.size) if g.size else 0.0


def edc(
    genuine_pairs: Sequence[tuple],
    threshold: float,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    fmr_target: float = DEFAULT_FMR,
    ties: str = "stable",
) -> EdcCurve:
    """FNMR at a fixed threshold as low-quality genuine pairs are discarded.

    ``genuine_pairs`` holds ``(score, quality_candidate, quality_gallery)`` or
    ``(score, quality_candidate, quality_gallery, pair_id)``; a pair's quality
    is the lower of its two sample qualities. With ``ties="stable"`` exactly
    floor(f N) pairs are discarded, equal qualities ordered by pair id (or
    input position). With ``ties="group"`` pairs sharing a quality are
    discarded together: only pairs strictly below the quality at rank
    floor(f N) go.
    """
    if not genuine_pairs:
        raise EvalError("need at least one genuine pair")
    if ties not in TIE_MODES:
        raise EvalError(f"ties must be one of {TIE_MODES}")
    fractions = [float(f) for f in fractions]
    if any(not 0.0 <= f <= 0.98 for f in fractions):
        raise EvalError("discard fractions must lie in [0, 0.98]")

    scores = np.array([p[0] for p in genuine_pairs], dtype=np.float64)
    quality = np.array([min(p[1], p[2]) for p in genuine_pairs], dtype=np.float64)
    ids = [str(p[3]) if len(p) > 3 else f"{i:012d}" for i, p in enumerate(genuine_pairs)]
    order = sorted(range(len(scores)), key=lambda i: (quality[i], ids[i]))
    miss = (scores < threshold)[order]
    q_sorted = quality[order]
    n = len(order)
    # misses among the kept pairs after dropping the first d of the ordering
    kept_misses = np.concatenate([np.cumsum(miss[::-1])[::-1], [0]])

    fnmr = []
    for f in fractions:
        d = math.floor(f * n + 1e-9)
        if ties == "group" and 0 < d < n:
            d = int(np.searchsorted(q_sorted, q_sorted[d], side="left"))
        remaining = n - d
        fnmr.append(float(kept_misses[d] / remaining) if remaining else 0.0)
    return EdcCurve(fractions, fnmr, fmr_target, float(threshold))


def pauc(curve: EdcCurve, max_fraction: float = 0.2) -> float:
    """Trapezoidal area under the EDC over [0, max_fraction]."""
    f = np.asarray(curve.fractions, dtype=np.float64)
    v = np.asarray(curve.fnmr, dtype=np.float64)
    if f.size == 0 or f[0] > 0.0 or f[-1] < max_fraction - 1e-12:
        raise EvalError(f"curve does not cover [0, {max_fraction}]")
    inside = f < max_fraction
    xs = np.append(f[inside], max_fraction)
    ys = np.append(v[inside], np.interp(max_fraction, f, v))
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def genuine_quality_pairs(
    genuine: Sequence[tuple[str, str, float]],
    quality: Mapping[str, float],
) -> list[tuple[float, float, float, str]]:
    """Join (candidate, gallery, score) rows with per-sample qualities."""
    return [(score, quality[c], quality[g], f"{c}|{g}") for c, g, score in genuine]


def random_pauc(genuine: Sequence[tuple[str, str, float]], threshold: float,
                fractions: Sequence[float] = DEFAULT_FRACTIONS, draws: int = 50, seed: int = 0,
                max_fraction: float = 0.2) -> float:
    """Mean pAUC when sample qualities are drawn uniformly at random."""
    rng = np.random.default_rng(seed)
    ids = sorted({sid for c, g, _ in genuine for sid in (c, g)})
    vals = []
    for _ in range(draws):
        q = dict(zip(ids, rng.random(len(ids))))
        vals.append(pauc(edc(genuine_quality_pairs(genuine, q), threshold, fractions), max_fraction))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Artifacts


def export_embeddings(
    checkpoint,
    samples,
    out_path: Path | str,
    labels: Optional[Mapping[str, float]] = None,
    batch_size: int = 64,
) -> Path:
    """Write pooled candidate embeddings as ``sample_id,label,e0..e{C-1}``.

    ``checkpoint`` is a path or a loaded :class:`~fpquality.net.Checkpoint`.
    ``label`` is taken from ``labels`` when given, else the model's predicted
    quality.
    """
    import torch

    from .net import Checkpoint, load_checkpoint
    from .train import to_tensor

    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    model = ckpt.model
    cfg = model.config
    for s in samples:
        if s.image.shape != cfg.input_size:
            raise EvalError(f"sample {s.sample_id} is {s.image.shape}, checkpoint expects {cfg.input_size}")
    model.eval()
    rows = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            x_c = model.encode_candidate(to_tensor([s.image for s in chunk]))
            pooled = x_c.mean(dim=(2, 3)).double().numpy()
            pred = model.predict_quality(x_c).double().numpy()
            for s, emb, q in zip(chunk, pooled, pred):
                lab = labels[s.sample_id] if labels is not None else q
                rows.append([s.sample_id, f"{lab:.6f}", *(f"{v:.6f}" for v in emb)])
    out_path = Path(out_path)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "label", *(f"e{j}" for j in range(cfg.channels_c))])
        writer.writerows(rows)
    return out_path


def edc_figure(curves: Sequence[tuple[str, EdcCurve]]):
    if not curves:
        raise EvalError("need at least one curve to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve in curves:
        ax.plot(curve.fractions, curve.fnmr, label=name)
    ax.set_xlabel("Fraction of pairs discarded")
    ax.set_ylabel("FNMR")
    fmr = curves[0][1].fmr_target
    ax.set_title(f"EDC at FMR = {fmr:g}")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return fig


def emit_edc_plot(curves: Sequence[tuple[str, EdcCurve]], out_path: Path | str) -> Path:
    import matplotlib.pyplot as plt

    fig = edc_figure(curves)
    out_path = Path(out_path)
    try:
        fig.savefig(out_path, format="png", dpi=120)
    finally:
        plt.close(fig)
    return out_path
