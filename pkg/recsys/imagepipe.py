"""
recsys/imagepipe.py

Image embeddings: a 7-layer MLP regresses precomputed image features onto the
mean word vector of the ad title, so pictures land in the text embedding space.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ImageFeatures
from .errors import DimensionMismatchError, EmptyInputError, NumericalError
from .mf import EmbeddingTable
from .models import Ad
from .storage import expect_kind, format_int_list, load_state, parse_int_list, save_state
from .textpipe import WordVectors, tokenize

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_WIDTHS: Tuple[int, ...] = (2048, 1024, 512, 256, 256, 128, 128, 100)
TITLE_TOKENS = 5


def title_target(ad: Ad, wv: WordVectors, max_tokens: int = TITLE_TOKENS) -> Optional[np.ndarray]:
    """Mean word vector of the first in-vocabulary title tokens, or None if there are none."""
    vectors = [wv.vector(t) for t in tokenize(ad.title) if t in wv][:max_tokens]
    if not vectors:
        return None
    return np.mean(vectors, axis=0)


def title_targets(ads: Iterable[Ad], wv: WordVectors) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for ad in ads:
        target = title_target(ad, wv)
        if target is not None:
            out[ad.item_id] = target
    return out


class ImageProjector(nn.Module):
    """Seven dense layers, ReLU between them, linear output."""

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) != 8:
            raise ValueError(f"projector needs 8 widths (7 layers), got {len(widths)}")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive: {widths}")
        self.widths = widths
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        for layer in self.layers:
            nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
            nn.init.zeros_(layer.bias)
        self.loss_history: Tuple[float, ...] = ()

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        return self.layers[-1](x)

    def save(self, directory: PathLike) -> None:
        save_state(directory, self.state_dict(),
                   {"kind": "image_projector", "widths": format_int_list(self.widths)})

    @classmethod
    def load(cls, directory: PathLike) -> "ImageProjector":
        manifest, state = load_state(directory)
        expect_kind(manifest, "image_projector", directory)
        model = cls(parse_int_list(manifest["widths"]))
        model.load_state_dict(state)
        model.eval()
        return model


def _training_pairs(features: ImageFeatures,
                    targets: Mapping[str, np.ndarray]) -> Tuple[List[str], np.ndarray, np.ndarray]:
    ids = [i for i in features.ids if i in targets]
    if not ids:
        return ids, np.zeros((0, features.dim)), np.zeros((0, 0))
    x = np.vstack([features.get(i) for i in ids]).astype(np.float32)
    y = np.vstack([targets[i] for i in ids]).astype(np.float32)
    return ids, x, y


def mlp_fit(features: ImageFeatures, targets: Mapping[str, np.ndarray], epochs: int = 20,
            step: float = 0.5, seed: int = 0, momentum: float = 0.9, batch_size: int = 32,
            widths: Optional[Sequence[int]] = None, clip_norm: float = 0.05) -> ImageProjector:
    """Train on items that have both an image feature and a title target.

    The objective is the mean squared error over items and output dimensions;
    loss_history holds it on the whole training set before and after each epoch.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    ids, x_np, y_np = _training_pairs(features, targets)
    if not ids:
        raise EmptyInputError("no item has both image features and a title target")
    if widths is None:
        widths = (features.dim,) + DEFAULT_WIDTHS[1:-1] + (y_np.shape[1],)
    widths = tuple(widths)
    if widths[0] != features.dim:
        raise DimensionMismatchError(f"projector input width {widths[0]} != feature dim {features.dim}")
    if widths[-1] != y_np.shape[1]:
        raise DimensionMismatchError(f"projector output width {widths[-1]} != target dim {y_np.shape[1]}")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = ImageProjector(widths)
    optimizer = torch.optim.SGD(model.parameters(), lr=step, momentum=momentum)
    x, y = torch.from_numpy(x_np), torch.from_numpy(y_np)

    def dataset_loss() -> float:
        with torch.no_grad():
            return float(F.mse_loss(model(x), y))

    history = [dataset_loss()]
    logger.info("image projector: %d training items, initial mse=%.5f", len(ids), history[0])
    for epoch in range(epochs):
        order = torch.from_numpy(rng.permutation(len(ids)))
        for start in range(0, len(ids), batch_size):
            idx = order[start:start + batch_size]
            loss = F.mse_loss(model(x[idx]), y[idx])
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
            optimizer.step()
        history.append(dataset_loss())
        if not np.isfinite(history[-1]):
            raise NumericalError(f"image projector loss diverged at epoch {epoch + 1}")
        logger.info("image projector epoch %d/%d mse=%.5f", epoch + 1, epochs, history[-1])
    model.eval()
    model.loss_history = tuple(history)
    return model


def image_embed(feature: np.ndarray, mlp: ImageProjector) -> np.ndarray:
    feature = np.asarray(feature, dtype=np.float32)
    if feature.shape != (mlp.input_dim,):
        raise DimensionMismatchError(f"image feature has shape {feature.shape}, expected ({mlp.input_dim},)")
    if not np.all(np.isfinite(feature)):
        raise ValueError("image feature contains non-finite values")
    with torch.no_grad():
        return mlp(torch.from_numpy(feature).unsqueeze(0))[0].double().numpy()


def image_embed_many(features: ImageFeatures, mlp: ImageProjector,
                     item_ids: Optional[Iterable[str]] = None, batch_size: int = 256) -> EmbeddingTable:
    """Embed every item with image features (or the subset in item_ids that has them)."""
    if features.dim != mlp.input_dim:
        raise DimensionMismatchError(f"feature dim {features.dim} != projector input {mlp.input_dim}")
    ids = list(features.ids) if item_ids is None else [i for i in item_ids if i in features]
    if not ids:
        return EmbeddingTable((), np.zeros((0, mlp.output_dim)))
    x = np.vstack([features.get(i) for i in ids]).astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("image features contain non-finite values")
    chunks = []
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            chunks.append(mlp(torch.from_numpy(x[start:start + batch_size])).double().numpy())
    return EmbeddingTable(tuple(ids), np.vstack(chunks))
