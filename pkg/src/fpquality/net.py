"""Dual-encoder quality model.

A candidate encoder and a gallery encoder (residual CNNs truncated before
pooling) feed an attention fusion block whose keys and values come from the
candidate tokens and whose queries come from the gallery tokens. The fused
features predict a match score; the candidate features alone feed a global
quality head and a regional quality-map head.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

DOWNSAMPLE = 32


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (224, 224)
    channels_c: int = 512
    spatial: tuple[int, int] = (7, 7)
    map_out: tuple[int, int] = (14, 14)
    use_fusion: bool = True
    use_regional_head: bool = True
    attention_dim: int = 256
    regional_hidden: int = 512
    pretrained: bool = False

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.spatial = tuple(int(v) for v in self.spatial)
        self.map_out = tuple(int(v) for v in self.map_out)
        if self.channels_c % 8:
            raise ModelConfigError("channels_c must be a multiple of 8 (backbone base width x 8)")
        expected = tuple(math.ceil(v / DOWNSAMPLE) for v in self.input_size)
        if self.spatial != expected:
            raise ModelConfigError(
                f"spatial {self.spatial} does not match input {self.input_size} / {DOWNSAMPLE} = {expected}"
            )
        if min(self.map_out) <= 0 or self.attention_dim <= 0 or self.regional_hidden <= 0:
            raise ModelConfigError("map_out, attention_dim and regional_hidden must be positive")

    @classmethod
    def for_input(cls, input_size: tuple[int, int], patch_size: int, **kwargs) -> "ModelConfig":
        """Config whose spatial grid and map grid follow from the input and patch sizes."""
        h, w = input_size
        return cls(
            input_size=(h, w),
            spatial=(math.ceil(h / DOWNSAMPLE), math.ceil(w / DOWNSAMPLE)),
            map_out=(h // patch_size, w // patch_size),
            **kwargs,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Backbone


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, inplanes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = None
        if stride != 1 or inplanes != planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(inplanes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNet18Trunk(nn.Module):
    """ResNet-18 without global pooling and classifier, single-channel input.

    ``base_width`` scales every stage (64 gives the standard network with 512
    output channels). Parameter names follow torchvision so that standard
    pretrained weights load directly.
    """

    def __init__(self, base_width: int = 64):
        super().__init__()
        w = base_width
        self.conv1 = nn.Conv2d(1, w, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(w)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.layer1 = nn.Sequential(BasicBlock(w, w), BasicBlock(w, w))
        self.layer2 = nn.Sequential(BasicBlock(w, 2 * w, 2), BasicBlock(2 * w, 2 * w))
        self.layer3 = nn.Sequential(BasicBlock(2 * w, 4 * w, 2), BasicBlock(4 * w, 4 * w))
        self.layer4 = nn.Sequential(BasicBlock(4 * w, 8 * w, 2), BasicBlock(8 * w, 8 * w))
        self.out_channels = 8 * w

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))

    def load_imagenet(self) -> bool:
        """Load torchvision ImageNet weights, averaging the RGB stem to one channel.

        Returns False (keeping random init) when the weights are unavailable.
        """
        if self.out_channels != 512:
            logger.warning("pretrained weights need channels_c=512; keeping random init")
            return False
        try:
            from torchvision.models import ResNet18_Weights

            state = ResNet18_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
        except Exception as exc:  # network or cache failure
            logger.warning("could not fetch pretrained weights (%s); keeping random init", exc)
            return False
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        state["conv1.weight"] = state["conv1.weight"].mean(dim=1, keepdim=True)
        self.load_state_dict(state)
        return True


# ---------------------------------------------------------------------------
# Heads


def _tokens(x: torch.Tensor) -> torch.Tensor:
    # (B, C, h, w) -> (B, h*w, C)
    return x.flatten(2).transpose(1, 2)


class FusionBlock(nn.Module):
    def __init__(self, channels: int, attention_dim: int):
        super().__init__()
        self.attention_dim = attention_dim
        self.key = nn.Linear(channels, attention_dim)
        self.value = nn.Linear(channels, attention_dim)
        self.query = nn.Linear(channels, attention_dim)
        self.proj = nn.Linear(attention_dim, channels)
        self.match_head = nn.Linear(channels, 1)

    def forward(self, x_c: torch.Tensor, x_g: torch.Tensor, return_attention: bool = False):
        if x_c.shape != x_g.shape:
            raise ValueError(f"embedding shapes differ: {tuple(x_c.shape)} vs {tuple(x_g.shape)}")
        b, c, h, w = x_c.shape
        cand, gal = _tokens(x_c), _tokens(x_g)
        k, v = self.key(cand), self.value(cand)
        q = self.query(gal)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.attention_dim), dim=-1)
        fused_tokens = self.proj(attn @ v)
        fused = fused_tokens.transpose(1, 2).reshape(b, c, h, w)
        predicted_match = torch.sigmoid(self.match_head(fused_tokens.mean(dim=1))).squeeze(-1)
        if return_attention:
            return fused, predicted_match, attn
        return fused, predicted_match


class QualityHead(nn.Module):
    """Global average pool, one linear layer, sigmoid, scaled to [0, 100]."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc = nn.Linear(channels, 1)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return 100.0 * torch.sigmoid(self.fc(x.mean(dim=(2, 3)))).squeeze(-1)


class RegionalHead(nn.Module):
    def __init__(self, in_features: int, hidden: int, map_out: tuple[int, int]):
        super().__init__()
        self.map_out = map_out
        self.mlp = nn.Sequential(
            nn.Linear(in_features, hidden),
            nn.LeakyReLU(0.01),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.01),
            nn.Linear(hidden, map_out[0] * map_out[1]),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = 4.0 * torch.sigmoid(self.mlp(x.flatten(1)))
        return out.view(-1, *self.map_out)


# ---------------------------------------------------------------------------
# Full model


class QualityModel(nn.Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        width = config.channels_c // 8
        self.candidate_encoder = ResNet18Trunk(width)
        if config.pretrained:
            self.candidate_encoder.load_imagenet()
        if config.use_fusion:
            self.gallery_encoder = ResNet18Trunk(width)
            if config.pretrained:
                self.gallery_encoder.load_imagenet()
            self.fusion = FusionBlock(config.channels_c, config.attention_dim)
        else:
            self.gallery_encoder = None
            self.fusion = None
        self.quality_head = QualityHead(config.channels_c)
        if config.use_regional_head:
            h, w = config.spatial
            self.regional_head = RegionalHead(config.channels_c * h * w, config.regional_hidden, config.map_out)
        else:
            self.regional_head = None

    def _check_input(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.dim() != 4 or images.shape[1] != 1 or tuple(images.shape[2:]) != self.config.input_size:
            raise ValueError(
                f"expected (B, 1, {self.config.input_size[0]}, {self.config.input_size[1]}) input, "
                f"got {tuple(images.shape)}"
            )
        return images

    def encode_candidate(self, images: torch.Tensor) -> torch.Tensor:
        return self.candidate_encoder(self._check_input(images))

    def encode_gallery(self, images: torch.Tensor) -> torch.Tensor:
        if self.gallery_encoder is None:
            raise RuntimeError("model was built without the gallery path (use_fusion=False)")
        return self.gallery_encoder(self._check_input(images))

    def fuse(self, x_c: torch.Tensor, x_g: torch.Tensor, return_attention: bool = False):
        if self.fusion is None:
            raise RuntimeError("model was built without the fusion block (use_fusion=False)")
        return self.fusion(x_c, x_g, return_attention)

    def predict_quality(self, x_c: torch.Tensor) -> torch.Tensor:
        return self.quality_head(x_c)

    def predict_quality_map(self, x_c: torch.Tensor) -> torch.Tensor:
        if self.regional_head is None:
            raise RuntimeError("model was built without the regional head (use_regional_head=False)")
        return self.regional_head(x_c)

    def forward(self, candidate: torch.Tensor, gallery: Optional[torch.Tensor] = None) -> dict:
        x_c = self.encode_candidate(candidate)
        out = {"x_c": x_c, "quality": self.predict_quality(x_c)}
        out["qmap"] = self.predict_quality_map(x_c) if self.regional_head is not None else None
        if gallery is not None and self.fusion is not None:
            x_g = self.encode_gallery(gallery)
            fused, predicted_match = self.fuse(x_c, x_g)
            out.update(x_g=x_g, fused=fused, match=predicted_match)
        return out

    @torch.no_grad()
    def score_images(self, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
        """Inference-time quality for a stack of images (candidate path only)."""
        was_training = self.training
        self.eval()
        scores = [self.predict_quality(self.encode_candidate(images[i:i + batch_size]))
                  for i in range(0, len(images), batch_size)]
        self.train(was_training)
        return torch.cat(scores) if scores else torch.empty(0)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    model: QualityModel
    stage: str
    extra: dict = field(default_factory=dict)


def _atomic_write(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path: Path | str) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path: Path | str, model: QualityModel, stage: str, extra: Optional[dict] = None) -> Path:
    """Write parameters to ``path`` and config/stage metadata to ``<path>.json``."""
    path = Path(path)
    meta = {"stage": stage, "model_config": model.config.to_dict(), **(extra or {})}
    _atomic_write(path, lambda tmp: torch.save(model.state_dict(), tmp))
    _atomic_write(sidecar_path(path),
                  lambda tmp: Path(tmp).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n"))
    return path


def read_sidecar(path: Path | str) -> dict:
    side = sidecar_path(path)
    if not side.is_file():
        raise FileNotFoundError(f"checkpoint sidecar {side} not found")
    return json.loads(side.read_text())


def load_checkpoint(path: Path | str, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Rebuild the model stored at ``path``.

    If ``expected`` is given the stored config must equal it, otherwise a
    :class:`ModelConfigError` is raised.
    """
    meta = read_sidecar(path)
    stored = ModelConfig.from_dict({**meta["model_config"], "pretrained": False})
    if expected is not None:
        mismatch = {
            k: (v, getattr(stored, k)) for k, v in expected.to_dict().items()
            if k != "pretrained" and getattr(stored, k) != v
        }
        if mismatch:
            raise ModelConfigError(f"checkpoint {path} is incompatible: {mismatch}")
    model = QualityModel(stored)
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    extra = {k: v for k, v in meta.items() if k not in ("stage", "model_config")}
    return Checkpoint(model, meta["stage"], extra)


def init_from(model: QualityModel, ckpt: Checkpoint) -> None:
    """Copy every parameter of ``ckpt`` whose name and shape exist in ``model``.

    Used to start fine-tuning from a pretrained candidate path when, for
    example, the pretrained model lacked the gallery branch.
    """
    own = model.state_dict()
    src = ckpt.model.state_dict()
    shared = {k: v for k, v in src.items() if k in own and own[k].shape == v.shape}
    own.update(shared)
    model.load_state_dict(own)
