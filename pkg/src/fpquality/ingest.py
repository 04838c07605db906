"""Dataset ingestion, synthetic ridge images, and patch quality estimation.

Images are handled as 2-D float arrays in [0, 1]. Patch quality maps follow
the 0-4 scale of classic minutiae-detector block maps, estimated here from
structure-tensor coherence and local contrast.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

MODALITIES = ("fingerprint", "fingerphoto")
AUGMENTATIONS = ("blur", "flip", "rotation", "random_crop", "gaussian_noise", "dropout")

DEFAULT_INPUT_SIZE = (224, 224)
DEFAULT_PATCH_SIZE = 16

# Combined patch score s = COHERENCE_WEIGHT * coherence + CONTRAST_WEIGHT * contrast,
# quantized as min(4, floor(5 * s)).
COHERENCE_WEIGHT = 0.7
CONTRAST_WEIGHT = 0.3
ENERGY_FLOOR = 1e-4
GRADIENT_SIGMA = 1.0

LUMA = np.array([0.299, 0.587, 0.114])


class IngestError(ValueError):
    """Raised for invalid images, manifests, or parameters."""


class ManifestError(IngestError):
    def __init__(self, errors: Sequence[tuple[int, str]]):
        self.errors = list(errors)
        lines = "; ".join(f"line {n}: {msg}" for n, msg in self.errors)
        super().__init__(f"manifest has {len(self.errors)} error(s): {lines}")


@dataclass
class SampleRecord:
    sample_id: str
    subject_id: str
    finger_id: str
    capture_index: int
    image: np.ndarray
    modality: str = "fingerphoto"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise IngestError(f"unknown modality {self.modality!r}")
        if self.capture_index < 0:
            raise IngestError("capture_index must be >= 0")
        if self.image.ndim != 2:
            raise IngestError("image must be a 2-D grayscale array")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.subject_id, self.finger_id, self.capture_index)


@dataclass
class QualityMap:
    """Row-major grid of patch qualities.

    Ground-truth maps hold integers 0-4; predicted maps hold reals in [0, 4].
    """

    rows: int
    cols: int
    values: np.ndarray
    patch_size_px: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.rows <= 0 or self.cols <= 0:
            raise IngestError("quality map must have positive dimensions")
        if self.values.size != self.rows * self.cols:
            raise IngestError(
                f"quality map has {self.values.size} values, expected {self.rows * self.cols}"
            )
        self.values = self.values.reshape(self.rows, self.cols)
        if np.any(self.values < 0) or np.any(self.values > 4):
            raise IngestError("quality map values must lie in [0, 4]")

    @property
    def is_integer(self) -> bool:
        return np.issubdtype(self.values.dtype, np.integer)

    def mean(self) -> float:
        return float(self.values.mean())


# ---------------------------------------------------------------------------
# Image helpers


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """Convert an 8-bit (H, W), (H, W, 3) or (H, W, 4) array to float gray in [0, 1]."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3] @ LUMA
    elif arr.ndim != 2:
        raise IngestError(f"unsupported image array shape {arr.shape}")
    return np.clip(arr / 255.0, 0.0, 1.0)


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``size`` = (H, W); no-op when already that size."""
    if image.shape == tuple(size):
        return image
    pil = Image.fromarray(image.astype(np.float32), mode="F")
    out = pil.resize((size[1], size[0]), Image.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float64), 0.0, 1.0)


def read_image(path: Path | str, size: tuple[int, int] = DEFAULT_INPUT_SIZE) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB", "RGBA"):
            img = img.convert("RGB")
        pixels = np.asarray(img)
    return resize(to_grayscale(pixels), size)


def write_image(path: Path | str, image: np.ndarray) -> None:
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path)


# ---------------------------------------------------------------------------
# Manifest


def load_dataset(
    root_path: Path | str,
    manifest: Path | str,
    size: tuple[int, int] = DEFAULT_INPUT_SIZE,
) -> list[SampleRecord]:
    """Load every manifest entry as a :class:`SampleRecord`.

    Manifest lines have the form
    ``sample_id,subject_id,finger_id,capture_index,relative/path.png,modality``.
    Blank lines and lines starting with ``#`` are skipped. All per-line
    problems are collected and raised together as a :class:`ManifestError`.
    """
    root = Path(root_path)
    text = Path(manifest).read_text(encoding="utf-8")
    records: list[SampleRecord] = []
    errors: list[tuple[int, str]] = []
    seen_keys: dict[tuple, int] = {}
    seen_ids: dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 6:
            errors.append((lineno, f"expected 6 fields, got {len(parts)}"))
            continue
        sample_id, subject_id, finger_id, capture, rel_path, modality = parts
        try:
            capture_index = int(capture)
        except ValueError:
            errors.append((lineno, f"capture_index {capture!r} is not an integer"))
            continue
        if modality not in MODALITIES:
            errors.append((lineno, f"unknown modality {modality!r}"))
            continue
        key = (subject_id, finger_id, capture_index)
        if key in seen_keys:
            raise ManifestError(
                [(lineno, f"duplicate key {key} (first seen on line {seen_keys[key]})")]
            )
        seen_keys[key] = lineno
        if sample_id in seen_ids:
            raise ManifestError(
                [(lineno, f"duplicate sample_id {sample_id!r} (first seen on line {seen_ids[sample_id]})")]
            )
        seen_ids[sample_id] = lineno
        path = root / rel_path
        if not path.is_file():
            errors.append((lineno, f"image file not found: {path}"))
            continue
        try:
            image = read_image(path, size)
        except (OSError, IngestError) as exc:
            errors.append((lineno, f"cannot decode {path}: {exc}"))
            continue
        records.append(
            SampleRecord(sample_id, subject_id, finger_id, capture_index, image, modality,
                         meta={"path": rel_path})
        )

    if errors:
        raise ManifestError(errors)
    if not records:
        logger.warning("manifest %s contains no samples", manifest)
    return records


def write_manifest(path: Path | str, records: Sequence[SampleRecord]) -> None:
    lines = [
        f"{r.sample_id},{r.subject_id},{r.finger_id},{r.capture_index},{r.meta['path']},{r.modality}"
        for r in records
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic ridge images


@dataclass(frozen=True)
class QualityParams:
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    contrast: float = 1.0
    occlusion_frac: float = 0.0

    def __post_init__(self):
        if not self.noise_sigma >= 0:
            raise IngestError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.blur_radius >= 0:
            raise IngestError(f"blur_radius must be >= 0, got {self.blur_radius}")
        if not 0 < self.contrast <= 1:
            raise IngestError(f"contrast must be in (0, 1], got {self.contrast}")
        if not 0 <= self.occlusion_frac < 1:
            raise IngestError(f"occlusion_frac must be in [0, 1), got {self.occlusion_frac}")


def identity_seed(subject_id: str, finger_id: str, dataset_seed: int = 0) -> int:
    digest = hashlib.sha256(f"{dataset_seed}|{subject_id}|{finger_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def ridge_pattern(identity: int, size: tuple[int, int], capture_seed: Optional[int] = None) -> np.ndarray:
    """Clean ridge field of one finger identity, values in [-1, 1].

    The phase is an elliptical radial term around a randomly placed core plus
    a few low-frequency plane-wave perturbations, so ridge orientation varies
    smoothly over the image. ``capture_seed`` adds per-capture jitter (small
    translation and rotation) while keeping the identity's ridge layout.
    """
    rng = np.random.default_rng(identity)
    h, w = size
    period = rng.uniform(6.5, 9.0)
    cy = rng.uniform(0.3, 0.7) * h
    cx = rng.uniform(0.3, 0.7) * w
    aspect = rng.uniform(0.6, 1.6)
    tilt = rng.uniform(0, np.pi)
    n_waves = 3
    amps = rng.uniform(0.05, 0.15, n_waves) * min(h, w)
    freqs = rng.uniform(0.5, 1.5, n_waves) / min(h, w)
    angles = rng.uniform(0, 2 * np.pi, n_waves)
    phases = rng.uniform(0, 2 * np.pi, n_waves)
    offset = rng.uniform(0, 2 * np.pi)

    dy = dx = rot = 0.0
    if capture_seed is not None:
        jitter = np.random.default_rng(capture_seed)
        dy, dx = jitter.uniform(-3.0, 3.0, 2)
        rot = np.deg2rad(jitter.uniform(-4.0, 4.0))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # capture pose: rotate about the image centre, then translate
    yc, xc = yy - h / 2 - dy, xx - w / 2 - dx
    ys = np.cos(rot) * yc - np.sin(rot) * xc + h / 2
    xs = np.sin(rot) * yc + np.cos(rot) * xc + w / 2

    u = (xs - cx) * np.cos(tilt) + (ys - cy) * np.sin(tilt)
    v = -(xs - cx) * np.sin(tilt) + (ys - cy) * np.cos(tilt)
    radial = np.sqrt(u**2 * aspect + v**2 / aspect)
    warp = sum(
        a * np.sin(2 * np.pi * f * (xs * np.cos(t) + ys * np.sin(t)) + p)
        for a, f, t, p in zip(amps, freqs, angles, phases)
    )
    return np.cos(2 * np.pi * (radial + warp) / period + offset)


def occlusion_box(rng: np.random.Generator, size: tuple[int, int], frac: float) -> Optional[tuple[int, int, int, int]]:
    """Axis-aligned box (top, left, height, width) covering ~``frac`` of the image."""
    if frac <= 0:
        return None
    h, w = size
    area = frac * h * w
    aspect = rng.uniform(0.5, 2.0)
    bh = int(round(min(h, np.sqrt(area * aspect))))
    bw = int(round(min(w, area / max(bh, 1))))
    bh, bw = max(bh, 1), max(bw, 1)
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def synth_fingerphoto(
    seed: int,
    quality_params: QualityParams | dict,
    *,
    identity: Optional[int] = None,
    subject_id: str = "s0",
    finger_id: str = "f0",
    capture_index: int = 0,
    size: tuple[int, int] = DEFAULT_INPUT_SIZE,
    modality: str = "fingerphoto",
    sample_id: Optional[str] = None,
) -> SampleRecord:
    """Render a degraded synthetic ridge image.

    ``identity`` fixes the ridge layout (defaults to ``seed``); ``seed`` drives
    the capture jitter and all degradations. Degradations are applied in the
    order contrast, blur, occlusion (flat mid-gray box), additive noise.
    """
    if isinstance(quality_params, dict):
        quality_params = QualityParams(**quality_params)
    identity = seed if identity is None else identity
    rng = np.random.default_rng([seed, 0x5EED])

    ridges = ridge_pattern(identity, size, capture_seed=seed if identity != seed else None)
    image = 0.5 + 0.5 * quality_params.contrast * ridges
    if quality_params.blur_radius > 0:
        image = ndimage.gaussian_filter(image, quality_params.blur_radius, mode="reflect")
    box = occlusion_box(rng, size, quality_params.occlusion_frac)
    if box is not None:
        top, left, bh, bw = box
        image[top:top + bh, left:left + bw] = 0.5
    if quality_params.noise_sigma > 0:
        image = image + rng.normal(0.0, quality_params.noise_sigma, size)
    image = np.clip(image, 0.0, 1.0)

    if sample_id is None:
        sample_id = f"{subject_id}_{finger_id}_{capture_index}"
    return SampleRecord(
        sample_id, subject_id, finger_id, capture_index, image, modality,
        meta={"quality_params": dataclasses.asdict(quality_params), "occlusion_box": box, "seed": seed},
    )


# ---------------------------------------------------------------------------
# Patch quality


def _blocks(image: np.ndarray, rows: int, cols: int, p: int) -> np.ndarray:
    return image[: rows * p, : cols * p].reshape(rows, p, cols, p).transpose(0, 2, 1, 3)


def patch_scores(image: np.ndarray, patch_size_px: int = DEFAULT_PATCH_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch (coherence, normalized contrast), both in [0, 1].

    Each patch is analysed from its own pixels only, so a patch's quality
    never depends on its neighbours.
    """
    image = np.asarray(image, dtype=np.float64)
    p = int(patch_size_px)
    if image.ndim != 2:
        raise IngestError("image must be 2-D")
    if p <= 0 or image.shape[0] < p or image.shape[1] < p:
        raise IngestError(f"image {image.shape} is smaller than one {p}px patch")
    rows, cols = image.shape[0] // p, image.shape[1] // p
    blocks = _blocks(image, rows, cols, p)
    smooth = ndimage.gaussian_filter(blocks, (0, 0, GRADIENT_SIGMA, GRADIENT_SIGMA), mode="reflect")
    gy, gx = np.gradient(smooth, axis=(2, 3))
    sxx = (gx * gx).sum(axis=(2, 3))
    syy = (gy * gy).sum(axis=(2, 3))
    sxy = (gx * gy).sum(axis=(2, 3))
    energy = sxx + syy
    # central differences of a [0, 1] image are bounded by 0.5 per axis
    floor = ENERGY_FLOOR * 0.5 * p * p
    spread = np.sqrt((sxx - syy) ** 2 + 4 * sxy**2)
    coherence = np.where(energy > floor, spread / np.maximum(energy, floor), 0.0)
    coherence = np.clip(coherence, 0.0, 1.0)

    # the standard deviation of a [0, 1] signal is at most 0.5
    contrast = np.clip(2.0 * smooth.std(axis=(2, 3)), 0.0, 1.0)
    return coherence, contrast


def estimate_quality_map(image: np.ndarray, patch_size_px: int = DEFAULT_PATCH_SIZE) -> QualityMap:
    coherence, contrast = patch_scores(image, patch_size_px)
    score = COHERENCE_WEIGHT * coherence + CONTRAST_WEIGHT * contrast
    quality = np.minimum(np.floor(5.0 * score), 4).astype(np.int64)
    rows, cols = quality.shape
    return QualityMap(rows, cols, quality, int(patch_size_px))


def write_quality_map(path: Path | str, qmap: QualityMap) -> None:
    values = qmap.values
    if not qmap.is_integer:
        raise IngestError("only integer quality maps can be written")
    lines = [f"QMAP {qmap.rows} {qmap.cols} {qmap.patch_size_px}"]
    lines += [" ".join(str(int(v)) for v in row) for row in values]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_quality_map(path: Path | str) -> QualityMap:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise IngestError(f"{path}: empty quality map file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "QMAP":
        raise IngestError(f"{path}: bad header {lines[0]!r}")
    rows, cols, patch = (int(x) for x in header[1:])
    body = [[int(x) for x in ln.split()] for ln in lines[1:]]
    if len(body) != rows or any(len(r) != cols for r in body):
        raise IngestError(f"{path}: grid does not match header {rows}x{cols}")
    return QualityMap(rows, cols, np.array(body, dtype=np.int64), patch)


# ---------------------------------------------------------------------------
# Augmentation


def augment(record: SampleRecord, kind: str, rng_seed: int, **params) -> SampleRecord:
    """Return an augmented copy of ``record``.

    Random parameters are drawn from ``rng_seed`` unless given explicitly:
    ``sigma`` (blur, gaussian_noise), ``axis`` (flip), ``angle`` in degrees
    (rotation), ``crop_frac`` (random_crop), ``rate`` (dropout).
    """
    if kind not in AUGMENTATIONS:
        raise IngestError(f"unknown augmentation {kind!r}; choose from {AUGMENTATIONS}")
    rng = np.random.default_rng(rng_seed)
    img = record.image
    size = img.shape

    if kind == "blur":
        sigma = params.get("sigma", rng.uniform(0.5, 2.0))
        out = ndimage.gaussian_filter(img, sigma, mode="reflect")
    elif kind == "flip":
        axis = params.get("axis", int(rng.integers(0, 2)))
        out = np.flip(img, axis=axis).copy()
    elif kind == "rotation":
        angle = params.get("angle", rng.uniform(-20.0, 20.0))
        if angle == 0:
            out = img.copy()
        else:
            out = ndimage.rotate(img, angle, reshape=False, order=1, mode="reflect")
    elif kind == "random_crop":
        frac = params.get("crop_frac", rng.uniform(0.75, 0.95))
        ch, cw = max(1, int(round(size[0] * frac))), max(1, int(round(size[1] * frac)))
        top = int(rng.integers(0, size[0] - ch + 1))
        left = int(rng.integers(0, size[1] - cw + 1))
        out = resize(img[top:top + ch, left:left + cw], size)
    elif kind == "gaussian_noise":
        sigma = params.get("sigma", 0.05)
        out = img + rng.normal(0.0, sigma, size)
    else:  # dropout
        rate = params.get("rate", rng.uniform(0.05, 0.2))
        out = np.where(rng.random(size) < rate, 0.0, img)

    out = resize(np.clip(out, 0.0, 1.0), size)
    return dataclasses.replace(
        record,
        sample_id=f"{record.sample_id}+{kind}{rng_seed}",
        image=out,
        meta={**record.meta, "augmentation": kind},
    )
