"""Three-stream model assembly and the parameter archive.

The assembly holds a visible image encoder and an infrared image encoder
(initially identical duplicates of the early backbone slice), a shared deep
image encoder, a text encoder, the per-identity prompt bank, a bias-free
identity classifier, and a frozen log similarity scale.

Archives are single files mapping parameter paths to tensors plus a metadata
record; ``kind: three_stream`` archives round-trip a full assembly
losslessly, ``kind: backbone`` archives carry one unsplit image encoder and
one text encoder (the pretrained-weights import path) whose early slice is
duplicated into the two modality branches at build time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn, Tensor
import torch.nn.functional as F

from . import encoders
from .encoders import (EncoderStack, MiniEncoderConfig, ResnetEncoderConfig,
                       SPLIT_AFTER, duplicate_stack, split_stack)
from .errors import ArchiveError, ValidationError
from .prompts import PromptBank

ARCHIVE_FORMAT = "vireid-archive"
ARCHIVE_VERSION = 1
DEFAULT_LOGIT_SCALE = math.log(100.0)

VISIBLE = "visible"
INFRARED = "infrared"
TEXT = "text"


class Stage(str, enum.Enum):
    TSG = "tsg"
    IFE = "ife"
    HSA = "hsa"


_STAGE_PREFIXES = {
    Stage.TSG: ("prompt_bank.",),
    Stage.IFE: ("shared_encoder.",),
    Stage.HSA: ("visible_encoder.", "infrared_encoder.", "text_encoder.",
                "prompt_bank.", "classifier."),
}


@dataclass(frozen=True)
class EncodedFeatures:
    """A batch of unit-norm feature vectors tagged with their modality."""

    values: Tensor
    modality: str

    def __len__(self):
        return self.values.shape[0]


def _encoder_config(family: str, fields: dict):
    fields = {k: tuple(v) if isinstance(v, list) else v for k, v in fields.items()}
    if family == "mini":
        cfg = MiniEncoderConfig(**fields)
    elif family == "resnet":
        cfg = ResnetEncoderConfig(**fields)
    else:
        raise ArchiveError(f"unknown encoder family {family!r}")
    cfg.validate()
    return cfg


def _family_of(cfg) -> str:
    if isinstance(cfg, MiniEncoderConfig):
        return "mini"
    if isinstance(cfg, ResnetEncoderConfig):
        return "resnet"
    raise ValidationError(f"unsupported encoder config type {type(cfg).__name__}")


def _build_stacks(cfg) -> tuple[EncoderStack, EncoderStack]:
    if isinstance(cfg, MiniEncoderConfig):
        return encoders.build_mini_image_stack(cfg), encoders.build_mini_text_stack(cfg)
    return encoders.build_resnet_image_stack(cfg), encoders.build_resnet_text_stack(cfg)


class ThreeStreamModel(nn.Module):
    """Visible / infrared / text encoders with classifier and prompt bank."""

    def __init__(self, visible_encoder, infrared_encoder, shared_encoder, text_encoder,
                 prompt_bank, num_identities, encoder_config,
                 logit_scale=DEFAULT_LOGIT_SCALE, classifier_seed=0):
        super().__init__()
        if num_identities <= 0:
            raise ValidationError(f"num_identities must be positive, got {num_identities}")
        self.visible_encoder = visible_encoder
        self.infrared_encoder = infrared_encoder
        self.shared_encoder = shared_encoder
        self.text_encoder = text_encoder
        self.prompt_bank = prompt_bank
        self.num_identities = num_identities
        self.encoder_config = encoder_config
        self.feature_dim = encoder_config.feature_dim
        self.classifier = nn.Linear(self.feature_dim, num_identities, bias=False)
        gen = torch.Generator().manual_seed(classifier_seed)
        with torch.no_grad():
            self.classifier.weight.copy_(
                torch.normal(0.0, 1e-3, self.classifier.weight.shape, generator=gen))
        self.register_buffer("logit_scale", torch.tensor(float(logit_scale)))

    # ---- metadata ----------------------------------------------------

    @property
    def family(self) -> str:
        return _family_of(self.encoder_config)

    def archive_metadata(self) -> dict:
        return {
            "family": self.family,
            "encoder": asdict(self.encoder_config),
            "num_identities": self.num_identities,
            "num_prompt_tokens": self.prompt_bank.num_tokens,
            "feature_dim": self.feature_dim,
            "logit_scale": float(self.logit_scale),
            "split_after": SPLIT_AFTER,
        }

    # ---- training-path forwards (channels-first tensors) -------------

    def visible_features(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """(raw, normalized) shared-space features of visible images."""
        raw = self.shared_encoder(self.visible_encoder(images))
        return raw, F.normalize(raw, dim=1)

    def infrared_features(self, images: Tensor) -> tuple[Tensor, Tensor]:
        raw = self.shared_encoder(self.infrared_encoder(images))
        return raw, F.normalize(raw, dim=1)

    def text_features(self, identity_ids) -> Tensor:
        """Normalized text features of the given identities."""
        seq = self.prompt_bank.compose_batch(identity_ids)
        return F.normalize(self.text_encoder(seq), dim=1)

    def all_text_features(self, chunk: int = 512) -> Tensor:
        """Normalized text features for every identity, in id order."""
        parts = [self.text_features(torch.arange(lo, min(lo + chunk, self.num_identities)))
                 for lo in range(0, self.num_identities, chunk)]
        return torch.cat(parts, dim=0)

    # ---- public encode surface (channels-last image batches) ---------

    @staticmethod
    def _to_image_tensor(images) -> Tensor:
        arr = images if torch.is_tensor(images) else torch.as_tensor(np.asarray(images))
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValidationError(
                f"expected a (B, H, W, 3) image batch, got shape {tuple(arr.shape)}")
        return arr.to(torch.float32).permute(0, 3, 1, 2).contiguous()

    @staticmethod
    def _finish(values: Tensor, modality: str) -> EncodedFeatures:
        if not torch.isfinite(values).all():
            raise ValidationError(f"{modality} encoder produced non-finite features")
        return EncodedFeatures(values=values, modality=modality)

    def encode_visible(self, images) -> EncodedFeatures:
        with torch.no_grad():
            _, normed = self.visible_features(self._to_image_tensor(images))
        return self._finish(normed, VISIBLE)

    def encode_infrared(self, images) -> EncodedFeatures:
        with torch.no_grad():
            _, normed = self.infrared_features(self._to_image_tensor(images))
        return self._finish(normed, INFRARED)

    def encode_identity_texts(self, identity_ids) -> EncodedFeatures:
        with torch.no_grad():
            normed = self.text_features(identity_ids)
        return self._finish(normed, TEXT)

    def classify(self, features: Tensor) -> Tensor:
        """Raw identity logits of shared-space features."""
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ValidationError(
                f"classifier expects (B, {self.feature_dim}) features, got {tuple(features.shape)}")
        return self.classifier(features)

    # ---- stage freeze sets --------------------------------------------

    def trainable_parameters(self, stage) -> set:
        """Parameter paths updated by the given stage."""
        prefixes = _STAGE_PREFIXES[Stage(stage)]
        return {name for name, _ in self.named_parameters() if name.startswith(prefixes)}

    def set_stage_trainable(self, stage) -> set:
        """Set requires_grad so exactly the stage's parameter set trains."""
        trainable = self.trainable_parameters(stage)
        for name, param in self.named_parameters():
            param.requires_grad_(name in trainable)
        return trainable


def build_model(weights, num_identities: int | None = None,
                num_prompt_tokens: int | None = None, seed: int = 0,
                logit_scale: float | None = None) -> ThreeStreamModel:
    """Construct the assembly from an encoder config or a parameter archive.

    With an encoder config, everything is freshly initialized from ``seed``
    and the early image slice is duplicated into the visible and infrared
    branches. With an archive path, ``kind: three_stream`` restores a saved
    assembly and ``kind: backbone`` imports pretrained encoders, duplicating
    the early slice and freshly initializing prompts and classifier.
    """
    if isinstance(weights, (str,)) or hasattr(weights, "__fspath__"):
        return _build_from_archive(str(weights), num_identities, num_prompt_tokens, seed)
    cfg = weights
    cfg.validate()
    if num_identities is None or num_prompt_tokens is None:
        raise ValidationError("num_identities and num_prompt_tokens are required")
    if num_identities <= 0:
        raise ValidationError(f"num_identities must be positive, got {num_identities}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        image_full, text_stack = _build_stacks(cfg)
    specific, shared = split_stack(image_full)
    bank = PromptBank(num_identities, num_prompt_tokens, cfg.token_dim, seed=seed)
    return ThreeStreamModel(
        visible_encoder=specific,
        infrared_encoder=duplicate_stack(specific),
        shared_encoder=shared,
        text_encoder=text_stack,
        prompt_bank=bank,
        num_identities=num_identities,
        encoder_config=cfg,
        logit_scale=DEFAULT_LOGIT_SCALE if logit_scale is None else logit_scale,
        classifier_seed=seed,
    )


# ---- archive container ------------------------------------------------


def save_archive(model: ThreeStreamModel, path) -> None:
    """Write the full assembly as a single-file parameter archive."""
    payload = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "kind": "three_stream",
        "metadata": model.archive_metadata(),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)


def save_backbone_archive(path, encoder_config, seed: int = 0,
                          logit_scale: float = DEFAULT_LOGIT_SCALE) -> None:
    """Fabricate a pretrained-style archive: one unsplit image encoder plus a
    text encoder, seeded deterministically."""
    encoder_config.validate()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        image_full, text_stack = _build_stacks(encoder_config)
    params = {f"image.{k}": v.detach().clone() for k, v in image_full.state_dict().items()}
    params.update({f"text.{k}": v.detach().clone() for k, v in text_stack.state_dict().items()})
    payload = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "kind": "backbone",
        "metadata": {
            "family": _family_of(encoder_config),
            "encoder": asdict(encoder_config),
            "logit_scale": float(logit_scale),
            "split_after": SPLIT_AFTER,
        },
        "params": params,
    }
    torch.save(payload, path)


def read_archive(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:  # corrupt container
        raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != ARCHIVE_FORMAT:
        raise ArchiveError(f"{path} is not a parameter archive")
    if payload.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(
            f"archive version {payload.get('version')} unsupported (expected {ARCHIVE_VERSION})")
    for key in ("kind", "metadata", "params"):
        if key not in payload:
            raise ArchiveError(f"archive is missing its {key!r} section")
    return payload


def _load_state(module: nn.Module, params: dict, what: str) -> None:
    expected = set(module.state_dict().keys())
    got = set(params.keys())
    missing = sorted(expected - got)
    if missing:
        raise ArchiveError(f"{what} archive is missing parameter paths: {missing}")
    unexpected = sorted(got - expected)
    if unexpected:
        raise ArchiveError(f"{what} archive has unknown parameter paths: {unexpected}")
    try:
        module.load_state_dict(params, strict=True)
    except RuntimeError as exc:
        raise ArchiveError(f"{what} archive parameter shapes do not match: {exc}") from exc


def model_from_metadata(metadata: dict) -> ThreeStreamModel:
    """Fresh (uninitialized-values) assembly matching archive metadata."""
    cfg = _encoder_config(metadata["family"], dict(metadata["encoder"]))
    return build_model(cfg, metadata["num_identities"], metadata["num_prompt_tokens"],
                       seed=0, logit_scale=metadata["logit_scale"])


def _build_from_archive(path: str, num_identities, num_prompt_tokens, seed) -> ThreeStreamModel:
    payload = read_archive(path)
    metadata = payload["metadata"]
    params = payload["params"]
    if payload["kind"] == "three_stream":
        model = model_from_metadata(metadata)
        _load_state(model, params, "three-stream")
        return model
    if payload["kind"] != "backbone":
        raise ArchiveError(f"unknown archive kind {payload['kind']!r}")
    if num_identities is None or num_prompt_tokens is None:
        raise ValidationError(
            "num_identities and num_prompt_tokens are required to build from a backbone archive")
    if num_identities <= 0:
        raise ValidationError(f"num_identities must be positive, got {num_identities}")
    cfg = _encoder_config(metadata["family"], dict(metadata["encoder"]))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        image_full, text_stack = _build_stacks(cfg)
    image_params = {k[len("image."):]: v for k, v in params.items() if k.startswith("image.")}
    text_params = {k[len("text."):]: v for k, v in params.items() if k.startswith("text.")}
    _load_state(image_full, image_params, "image encoder")
    _load_state(text_stack, text_params, "text encoder")
    specific, shared = split_stack(image_full, metadata.get("split_after", SPLIT_AFTER))
    bank = PromptBank(num_identities, num_prompt_tokens, cfg.token_dim, seed=seed)
    return ThreeStreamModel(
        visible_encoder=specific,
        infrared_encoder=duplicate_stack(specific),
        shared_encoder=shared,
        text_encoder=text_stack,
        prompt_bank=bank,
        num_identities=num_identities,
        encoder_config=cfg,
        logit_scale=metadata.get("logit_scale", DEFAULT_LOGIT_SCALE),
        classifier_seed=seed,
    )
