"""Batch feature extraction with ResNet-family backbones.

Levels 1..4 are the final activations of the four spatial-resolution
blocks (torchvision ``layer1`` .. ``layer4``); level 5 is the globally
pooled head input (1x1 spatial). For a 256x256 input the block outputs
follow the chain h, w halving and c doubling from one level to the next.

Everything runs in eval mode with a fixed preprocessing recipe (RGB,
bilinear resize, ImageNet normalization) and no augmentation, so
re-extraction of the same image is byte-identical. Files are written via
temp-and-rename, one ``<image_id>_l<level>.sgt`` per image per level, and
a ``manifest.json`` compatible with the scorer's bank loader is written
last.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import models

log = logging.getLogger("sgfr_extractor")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}

BACKBONES = {
    "resnet50": (models.resnet50, "ResNet50_Weights"),
    "resnet101": (models.resnet101, "ResNet101_Weights"),
    "wideresnet50": (models.wide_resnet50_2, "Wide_ResNet50_2_Weights"),
    "wideresnet101": (models.wide_resnet101_2, "Wide_ResNet101_2_Weights"),
}

_SGT_HEADER = struct.Struct("<4sBIIII")
MANIFEST_VERSION = 1


class ExtractorError(Exception):
    pass


@dataclass(frozen=True)
class ExtractionSpec:
    dataset_root: Path
    output_dir: Path
    backbone: str = "wideresnet50"
    levels: tuple[int, ...] = (2, 3, 4)
    resize: tuple[int, int] = (256, 256)
    pretrained: bool = True
    # Seed for the fallback random initialization when pretrained weights
    # are unavailable; keeps offline extraction reproducible.
    init_seed: int = 0
    ref_level: int | None = None  # defaults to the deepest exported level

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ExtractorError(
                f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}"
            )
        if not self.levels:
            raise ExtractorError("at least one level required")
        if any(lv < 1 or lv > 5 for lv in self.levels):
            raise ExtractorError("levels must be within 1..5 (5 = pooled head input)")


@dataclass
class ExtractionResult:
    manifest_path: Path
    image_ids: list[str]
    level_shapes: dict[int, tuple[int, int, int]]
    skipped: list[str] = field(default_factory=list)


def _build_model(spec: ExtractionSpec) -> torch.nn.Module:
    ctor, weights_enum_name = BACKBONES[spec.backbone]
    if spec.pretrained:
        weights = getattr(models, weights_enum_name).DEFAULT
        model = ctor(weights=weights)
    else:
        torch.manual_seed(spec.init_seed)
        model = ctor(weights=None)
    model.eval()
    return model


def _preprocess(image: Image.Image, resize: tuple[int, int]) -> torch.Tensor:
    rgb = image.convert("RGB").resize((resize[1], resize[0]), Image.BILINEAR)
    x = torch.from_numpy(np.asarray(rgb, dtype=np.float32) / 255.0)
    x = x.permute(2, 0, 1)
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return ((x - mean) / std).unsqueeze(0)


@torch.no_grad()
def _level_maps(model: torch.nn.Module, x: torch.Tensor, levels: set[int]) -> dict[int, torch.Tensor]:
    out: dict[int, torch.Tensor] = {}
    x = model.maxpool(model.relu(model.bn1(model.conv1(x))))
    for lv, block in enumerate(
        (model.layer1, model.layer2, model.layer3, model.layer4), start=1
    ):
        x = block(x)
        if lv in levels:
            out[lv] = x
    if 5 in levels:
        out[5] = model.avgpool(x)
    return out


def _write_sgt_atomic(data: np.ndarray, level: int, path: Path) -> None:
    h, w, c = data.shape
    header = _SGT_HEADER.pack(b"SGT1", 3, h, w, c, level)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + data.astype("<f4").tobytes())
    os.replace(tmp, path)


def _scan_images(root: Path) -> list[Path]:
    if not root.is_dir():
        raise ExtractorError(f"dataset root not found: {root}")
    paths = [
        p for p in sorted(root.rglob("*"))
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    ]
    if not paths:
        raise ExtractorError(f"no images under {root}")
    return paths


def _image_id(root: Path, path: Path) -> str:
    return path.relative_to(root).with_suffix("").as_posix().replace("/", "__")


def extract(spec: ExtractionSpec) -> ExtractionResult:
    """Run the backbone over every image under the dataset root.

    Undecodable images are skipped with a warning and listed in the
    manifest; any other failure raises.
    """
    model = _build_model(spec)
    wanted = set(spec.levels)
    paths = _scan_images(Path(spec.dataset_root))
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    image_ids: list[str] = []
    skipped: list[str] = []
    level_shapes: dict[int, tuple[int, int, int]] = {}
    for path in paths:
        image_id = _image_id(Path(spec.dataset_root), path)
        try:
            image = Image.open(path)
            image.load()
        except Exception as exc:  # undecodable input is data, not a bug
            log.warning("skipping undecodable image %s (%s)", path, exc)
            skipped.append(image_id)
            continue
        maps = _level_maps(model, _preprocess(image, spec.resize), wanted)
        for lv in sorted(wanted):
            hwc = maps[lv][0].permute(1, 2, 0).contiguous().numpy()
            if not np.all(np.isfinite(hwc)):
                raise ExtractorError(f"non-finite activation for {image_id} level {lv}")
            shape = tuple(hwc.shape)
            if level_shapes.setdefault(lv, shape) != shape:
                raise ExtractorError(
                    f"inconsistent shape at level {lv}: {shape} vs {level_shapes[lv]}"
                )
            _write_sgt_atomic(hwc, lv, out_dir / f"{image_id}_l{lv}.sgt")
        image_ids.append(image_id)
        log.info("extracted %s (%d levels)", image_id, len(wanted))

    if not image_ids:
        raise ExtractorError("every image was undecodable")

    ref_level = spec.ref_level if spec.ref_level is not None else max(wanted)
    manifest = {
        "version": MANIFEST_VERSION,
        "nominal_ids": image_ids,
        "levels": [
            {"level": lv, "h": level_shapes[lv][0], "w": level_shapes[lv][1],
             "c": level_shapes[lv][2]}
            for lv in sorted(wanted)
        ],
        "l_ref": ref_level,
        "created_params": {
            "backbone": spec.backbone,
            "resize": list(spec.resize),
            "levels": sorted(wanted),
            "pretrained": spec.pretrained,
            "skipped": skipped,
        },
    }
    manifest_path = out_dir / "manifest.json"
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, manifest_path)
    return ExtractionResult(
        manifest_path=manifest_path,
        image_ids=image_ids,
        level_shapes=level_shapes,
        skipped=skipped,
    )
