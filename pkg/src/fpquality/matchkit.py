"""Toy matchers, score tables, score normalization, and pair construction."""

from __future__ import annotations

import csv
import io
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .ingest import SampleRecord

logger = logging.getLogger(__name__)

SEARCH_RADIUS = 8

# difference-of-Gaussians band-pass settings, (inner sigma, outer sigma) in px
BANDPASS = {
    "toy-a": (1.0, 3.0),
    "toy-b": (1.5, 4.5),
}
DEFAULT_MATCHERS = tuple(BANDPASS)


class MatchError(ValueError):
    pass


class MatchFailure(MatchError):
    """The matcher could not produce a score (e.g. a featureless image)."""


def bandpass(image: np.ndarray, sigmas: tuple[float, float]) -> np.ndarray:
    lo, hi = sigmas
    img = np.asarray(image, dtype=np.float64)
    return ndimage.gaussian_filter(img, lo, mode="reflect") - ndimage.gaussian_filter(img, hi, mode="reflect")


def _window_sums(integral: np.ndarray, h: int, w: int, r: int):
    """Sums over the overlap window for every shift in [-r, r]^2.

    ``integral`` is a zero-padded summed-area table of an (h, w) array; the
    window for shift (dy, dx) is rows [max(0, dy), h + min(0, dy)) and the
    analogous columns.
    """
    shifts = np.arange(-r, r + 1)
    y0 = np.maximum(0, shifts)[:, None]
    y1 = (h + np.minimum(0, shifts))[:, None]
    x0 = np.maximum(0, shifts)[None, :]
    x1 = (w + np.minimum(0, shifts))[None, :]
    return integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    out[1:, 1:] = a.cumsum(0).cumsum(1)
    return out


def ncc_surface(a: np.ndarray, b: np.ndarray, radius: int = SEARCH_RADIUS) -> np.ndarray:
    """Zero-mean NCC of ``a[y, x]`` against ``b[y - dy, x - dx]`` over the overlap.

    Returns a (2r+1, 2r+1) array indexed by (dy + r, dx + r). Shifts whose
    overlap has no variance in either image get NaN.
    """
    h, w = a.shape
    r = radius
    # cross term via zero-padded FFT correlation
    fh, fw = h + r + 1, w + r + 1
    fa = np.fft.rfft2(a, s=(fh, fw))
    fb = np.fft.rfft2(b, s=(fh, fw))
    corr = np.fft.irfft2(fa * np.conj(fb), s=(fh, fw))
    idx_y = np.arange(-r, r + 1) % fh
    idx_x = np.arange(-r, r + 1) % fw
    sab = corr[np.ix_(idx_y, idx_x)]

    n = _window_sums(_integral(np.ones_like(a)), h, w, r)
    sa = _window_sums(_integral(a), h, w, r)
    saa = _window_sums(_integral(a * a), h, w, r)
    # b's window is the a-window moved by -shift, i.e. the window for -shift
    sb = _window_sums(_integral(b), h, w, r)[::-1, ::-1]
    sbb = _window_sums(_integral(b * b), h, w, r)[::-1, ::-1]

    cov = sab - sa * sb / n
    va = np.maximum(saa - sa * sa / n, 0.0)
    vb = np.maximum(sbb - sb * sb / n, 0.0)
    denom = np.sqrt(va * vb)
    scale = max(float(saa.max()), float(sbb.max()), 1e-300)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 1e-12 * scale, cov / denom, np.nan)
    return np.clip(out, -1.0, 1.0)


def match(a: SampleRecord | np.ndarray, b: SampleRecord | np.ndarray, matcher_id: str = "toy-a",
          radius: int = SEARCH_RADIUS) -> float:
    """Similarity of two images in [-1, 1].

    Both images are band-pass filtered, and NCC is evaluated for every
    translation within ``radius`` px. The score is the signed NCC at the
    translation where its magnitude peaks, so an inverted print scores close
    to -1 instead of matching a half-period shifted alignment.
    """
    img_a = a.image if isinstance(a, SampleRecord) else np.asarray(a)
    img_b = b.image if isinstance(b, SampleRecord) else np.asarray(b)
    if img_a.shape != img_b.shape:
        raise MatchError(f"image sizes differ: {img_a.shape} vs {img_b.shape}")
    if matcher_id not in BANDPASS:
        raise MatchError(f"unknown matcher {matcher_id!r}")
    fa = bandpass(img_a, BANDPASS[matcher_id])
    fb = bandpass(img_b, BANDPASS[matcher_id])
    surface = ncc_surface(fa, fb, radius)
    if np.all(np.isnan(surface)):
        raise MatchFailure("no ridge energy in at least one image")
    mag = np.where(np.isnan(surface), -1.0, np.abs(surface))
    peak = np.unravel_index(np.argmax(mag), mag.shape)
    return float(surface[peak])


# ---------------------------------------------------------------------------
# Pairs


@dataclass
class PairSet:
    genuine: list[tuple[str, str]]
    impostor: list[tuple[str, str]]
    impostor_ratio: float = 1.0

    def labelled(self) -> list[tuple[str, str, int]]:
        """All pairs as (candidate, gallery, y) with y = +1 genuine, -1 impostor."""
        return [(c, g, 1) for c, g in self.genuine] + [(c, g, -1) for c, g in self.impostor]


def sample_pairs(samples: Sequence[SampleRecord], impostor_ratio: float = 1.0, rng_seed: int = 0) -> PairSet:
    """Enumerate all genuine pairs and draw impostor pairs without replacement.

    Genuine pairs are unordered pairs of captures of the same (subject, finger),
    ordered (lower capture, higher capture). Impostor pairs join samples of
    different subjects; ``round(impostor_ratio * n_genuine)`` of them are drawn,
    or all of them when fewer exist.
    """
    if impostor_ratio <= 0:
        raise MatchError("impostor_ratio must be > 0")
    subjects = {s.subject_id for s in samples}
    if len(subjects) < 2:
        raise MatchError("at least two subjects are needed to build impostor pairs")
    ordered = sorted(samples, key=lambda s: (s.subject_id, s.finger_id, s.capture_index, s.sample_id))

    genuine = []
    impostor_pool = []
    for a, b in itertools.combinations(ordered, 2):
        if a.subject_id != b.subject_id:
            impostor_pool.append((a.sample_id, b.sample_id))
        elif a.finger_id == b.finger_id and a.capture_index != b.capture_index:
            genuine.append((a.sample_id, b.sample_id))

    wanted = min(len(impostor_pool), int(round(impostor_ratio * len(genuine))))
    if wanted < round(impostor_ratio * len(genuine)):
        logger.warning("only %d impostor pairs available, %d requested",
                       len(impostor_pool), round(impostor_ratio * len(genuine)))
    rng = np.random.default_rng(rng_seed)
    chosen = np.sort(rng.choice(len(impostor_pool), size=wanted, replace=False))
    impostor = [impostor_pool[i] for i in chosen]
    return PairSet(genuine, impostor, impostor_ratio)


def write_pairs_csv(path: Path | str, pairs: PairSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["candidate_id", "gallery_id", "y"])
        for c, g, y in pairs.labelled():
            writer.writerow([c, g, y])


def read_pairs_csv(path: Path | str, impostor_ratio: float = 1.0) -> PairSet:
    genuine, impostor = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pair = (row["candidate_id"], row["gallery_id"])
            (genuine if int(row["y"]) == 1 else impostor).append(pair)
    return PairSet(genuine, impostor, impostor_ratio)


# ---------------------------------------------------------------------------
# Score tables


@dataclass
class ScoreEntry:
    probe_id: str
    gallery_id: str
    score: float
    mated: bool


@dataclass
class ScoreTable:
    matcher_id: str
    entries: list[ScoreEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            key = (e.probe_id, e.gallery_id)
            if key in seen:
                raise MatchError(f"duplicate pair {key} in table {self.matcher_id}")
            seen.add(key)

    def __len__(self):
        return len(self.entries)

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    def lookup(self) -> dict[tuple[str, str], float]:
        """Score by unordered pair; both (probe, gallery) orders resolve."""
        out = {}
        for e in self.entries:
            out[(e.probe_id, e.gallery_id)] = e.score
            out[(e.gallery_id, e.probe_id)] = e.score
        return out

    def genuine_entries(self) -> list[ScoreEntry]:
        return [e for e in self.entries if e.mated]

    def impostor_entries(self) -> list[ScoreEntry]:
        return [e for e in self.entries if not e.mated]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["matcher_id", "probe_id", "gallery_id", "score", "mated"])
        for e in self.entries:
            writer.writerow([self.matcher_id, e.probe_id, e.gallery_id, f"{e.score:.6f}", int(e.mated)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScoreTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise MatchError("score CSV has no entries")
        ids = {r["matcher_id"] for r in rows}
        if len(ids) != 1:
            raise MatchError(f"score CSV mixes matchers: {sorted(ids)}")
        entries = [
            ScoreEntry(r["probe_id"], r["gallery_id"], float(r["score"]), r["mated"].strip() in ("1", "true", "True"))
            for r in rows
        ]
        return cls(ids.pop(), entries)

    def write(self, path: Path | str) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path: Path | str) -> "ScoreTable":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


def build_score_table(
    samples: Sequence[SampleRecord],
    pairs: PairSet,
    matcher_id: str = "toy-a",
    matcher: Optional[Callable[[SampleRecord, SampleRecord], float]] = None,
    workers: int = 1,
) -> ScoreTable:
    """Score every pair in ``pairs`` with one matcher.

    A pair the matcher cannot score gets the table's minimum raw score, so it
    normalizes to 0.
    """
    by_id = {s.sample_id: s for s in samples}
    labelled = [(c, g, y == 1) for c, g, y in pairs.labelled()]
    for c, g, mated in labelled:
        for sid in (c, g):
            if sid not in by_id:
                raise MatchError(f"pair references unknown sample {sid!r}")
        a, b = by_id[c], by_id[g]
        identity_mated = a.subject_id == b.subject_id and a.finger_id == b.finger_id
        if identity_mated != mated:
            raise MatchError(f"pair ({c}, {g}) mated flag disagrees with identity metadata")

    if matcher is None:
        def matcher(a, b):
            return match(a, b, matcher_id)

    def score(pair):
        c, g, _ = pair
        try:
            return matcher(by_id[c], by_id[g])
        except MatchFailure:
            logger.warning("%s failed on pair (%s, %s)", matcher_id, c, g)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            raw = list(pool.map(score, labelled))
    else:
        raw = [score(p) for p in labelled]

    valid = [r for r in raw if r is not None]
    fallback = min(valid) if valid else 0.0
    entries = [
        ScoreEntry(c, g, fallback if r is None else float(r), mated)
        for (c, g, mated), r in zip(labelled, raw)
    ]
    return ScoreTable(matcher_id, entries)


def normalize_scores(table: ScoreTable) -> ScoreTable:
    """Min-max normalize all scores of the table to [0, 1] (all 0.5 if constant)."""
    if not table.entries:
        raise MatchError("cannot normalize an empty score table")
    raw = table.scores
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        norm = np.full_like(raw, 0.5)
    else:
        norm = (raw - lo) / (hi - lo)
    return ScoreTable(
        table.matcher_id,
        [ScoreEntry(e.probe_id, e.gallery_id, float(s), e.mated) for e, s in zip(table.entries, norm)],
    )


def pair_scores(tables: Iterable[ScoreTable]) -> dict[tuple[str, str], float]:
    """Mean normalized score per pair across matchers (either id order resolves)."""
    tables = list(tables)
    lookups = [t.lookup() for t in tables]
    keys = set().union(*lookups) if lookups else set()
    out = {}
    for key in keys:
        vals = [lk[key] for lk in lookups if key in lk]
        out[key] = float(np.mean(vals))
    return out
