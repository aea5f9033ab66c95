"""Feature and final-layer-weight extraction over an image folder.

The image root must contain one subdirectory per class; subdirectory names in
sorted order map to dense 0-based labels.  Every regular file inside a class
directory is treated as an image.  Feature vectors are the inputs to the
model's final linear layer, captured with a forward hook in eval mode with a
fixed resize + normalize transform and no augmentation, so repeated runs are
deterministic.

If the final layer has a bias, a constant-1 feature column is appended and the
bias becomes an extra weight column (the downstream softmax has no bias term);
this is recorded in the manifest.  All numeric output is float64.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .writer import write_container

log = logging.getLogger("wpk_export")

MAX_SKIP_FRACTION = 0.05


class ExportError(Exception):
    """Unusable model, image folder, or too many undecodable images."""


@dataclass
class ExportManifest:
    model: str
    image_root: str
    label_map: dict[str, int]
    feature_dim: int
    normalization: dict
    out_path: str
    bias_folded: bool
    n_images: int
    n_skipped: int
    skipped: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def load_model(model_id: str) -> nn.Module:
    """Load a model from a checkpoint path, or a torchvision architecture name."""
    path = Path(model_id)
    if path.exists():
        try:
            model = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:  # unpicklable / corrupt checkpoint
            raise ExportError(f"cannot load checkpoint {model_id!r}: {exc}") from exc
        if not isinstance(model, nn.Module):
            raise ExportError(f"{model_id!r} is not a pickled nn.Module")
        return model
    try:
        from torchvision.models import get_model

        return get_model(model_id, weights="DEFAULT")
    except Exception as exc:
        raise ExportError(
            f"model {model_id!r} is neither a checkpoint path nor a loadable "
            f"torchvision architecture: {exc}"
        ) from exc


def find_classifier(model: nn.Module) -> nn.Linear:
    """Return the last nn.Linear in module order (the softmax head)."""
    last = None
    for module in model.modules():
        if isinstance(module, nn.Linear):
            last = module
    if last is None:
        raise ExportError("model has no nn.Linear layer to treat as the classifier")
    return last


def _list_images(image_root) -> tuple[dict[str, int], list[tuple[Path, int]]]:
    root = Path(image_root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ExportError(f"{root}: no class subdirectories found")
    label_map = {d.name: i for i, d in enumerate(class_dirs)}
    files = [
        (f, label_map[d.name])
        for d in class_dirs
        for f in sorted(d.iterdir())
        if f.is_file()
    ]
    if not files:
        raise ExportError(f"{root}: class directories contain no files")
    return label_map, files


def _load_image(path: Path, size: int, mean: float, std: float) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(
            img.convert("RGB").resize((size, size), Image.BILINEAR),
            dtype=np.float32,
        )
    arr = (arr / 255.0 - mean) / std
    return torch.from_numpy(arr).permute(2, 0, 1)


def extract(
    model: nn.Module,
    image_root,
    *,
    batch: int = 32,
    image_size: int = 32,
    mean: float = 0.5,
    std: float = 0.5,
):
    """Run the folder through the model; return arrays plus bookkeeping.

    Returns (features, labels, weights, class_ids, label_map, skipped) where
    features is (n_images, d) float64, weights is (n_model_classes, d) float64
    with the bias folded into a trailing column when present, and skipped
    lists undecodable files.  Raises ExportError when more than 5% of the
    files cannot be decoded.
    """
    label_map, files = _list_images(image_root)
    batches: list[torch.Tensor] = []
    labels: list[int] = []
    skipped: list[str] = []
    pending: list[torch.Tensor] = []
    for path, label in files:
        try:
            pending.append(_load_image(path, image_size, mean, std))
        except Exception as exc:
            log.warning("skipping undecodable image %s: %s", path, exc)
            skipped.append(str(path))
            continue
        labels.append(label)
        if len(pending) == batch:
            batches.append(torch.stack(pending))
            pending = []
    if pending:
        batches.append(torch.stack(pending))
    if len(skipped) > MAX_SKIP_FRACTION * len(files):
        raise ExportError(
            f"{len(skipped)} of {len(files)} images undecodable "
            f"(> {MAX_SKIP_FRACTION:.0%}); first: {skipped[0]}"
        )
    if not labels:
        raise ExportError(f"{image_root}: no decodable images")

    head = find_classifier(model)
    captured: list[torch.Tensor] = []
    hook = head.register_forward_hook(
        lambda module, inputs, output: captured.append(inputs[0].detach())
    )
    model.eval()
    try:
        with torch.no_grad():
            for chunk in batches:
                model(chunk)
    finally:
        hook.remove()
    features = torch.cat(captured).double().numpy()
    if features.ndim != 2:
        raise ExportError(
            f"classifier input has shape {tuple(features.shape)}; expected a matrix"
        )
    weights = head.weight.detach().double().numpy()
    bias_folded = head.bias is not None
    if bias_folded:
        features = np.hstack([features, np.ones((len(features), 1))])
        weights = np.hstack([weights, head.bias.detach().double().numpy()[:, None]])
        log.info("final layer has a bias: folded into a constant-1 feature column")
    class_ids = np.arange(weights.shape[0], dtype=np.int64)
    return (
        features,
        np.asarray(labels, dtype=np.int64),
        weights,
        class_ids,
        label_map,
        skipped,
    )


def export_features(
    model_id: str,
    image_root,
    out_path,
    *,
    batch: int = 32,
    image_size: int = 32,
    mean: float = 0.5,
    std: float = 0.5,
) -> ExportManifest:
    """Extract features/weights and atomically write the container.

    The container holds the feature table under ``features``, the weight
    matrix under ``weights``, and the manifest JSON as an int64 byte-vector
    section named ``manifest``.
    """
    model = load_model(model_id)
    features, labels, weights, class_ids, label_map, skipped = extract(
        model,
        image_root,
        batch=batch,
        image_size=image_size,
        mean=mean,
        std=std,
    )
    manifest = ExportManifest(
        model=str(model_id),
        image_root=str(image_root),
        label_map=label_map,
        feature_dim=features.shape[1],
        normalization={"image_size": image_size, "mean": mean, "std": std},
        out_path=str(out_path),
        bias_folded=find_classifier(model).bias is not None,
        n_images=len(labels),
        n_skipped=len(skipped),
        skipped=skipped,
    )
    sections = {
        "features/features": features,
        "features/labels": labels,
        "weights/rows": weights,
        "weights/class_ids": class_ids,
        "manifest": np.frombuffer(
            manifest.to_json().encode("utf-8"), dtype=np.uint8
        ).astype(np.int64),
    }
    write_container(out_path, sections)
    return manifest
