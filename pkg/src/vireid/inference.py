"""Batch feature extraction from a trained model for evaluation and export."""

from __future__ import annotations

import numpy as np
import torch

from .data import AugmentationConfig, eval_transform
from .evaluation import EmbeddingSet
from .model import ThreeStreamModel


def embed_samples(model: ThreeStreamModel, samples, augmentation: AugmentationConfig,
                  batch_size: int = 128) -> EmbeddingSet:
    """Encode every sample with its modality branch using the deterministic
    inference transform; returns unit-norm features with id/camera/modality
    tags in sample order."""
    n = len(samples)
    feats = np.zeros((n, model.feature_dim), dtype=np.float32)
    ids = np.zeros(n, dtype=np.int64)
    cams = np.zeros(n, dtype=np.int64)
    mods = np.empty(n, dtype=object)
    for lo in range(0, n, batch_size):
        chunk = samples[lo:lo + batch_size]
        arrays = np.stack([eval_transform(s, augmentation) for s in chunk])
        images = torch.from_numpy(arrays)
        vis_rows = [i for i, s in enumerate(chunk) if s.modality == "visible"]
        ir_rows = [i for i, s in enumerate(chunk) if s.modality == "infrared"]
        if vis_rows:
            encoded = model.encode_visible(images[vis_rows])
            feats[[lo + i for i in vis_rows]] = encoded.values.numpy()
        if ir_rows:
            encoded = model.encode_infrared(images[ir_rows])
            feats[[lo + i for i in ir_rows]] = encoded.values.numpy()
        for i, s in enumerate(chunk):
            ids[lo + i] = s.identity
            cams[lo + i] = s.camera
            mods[lo + i] = s.modality
    return EmbeddingSet(features=feats, ids=ids, cameras=cams, modalities=np.asarray(mods))


def cross_modal_alignment(embeddings: EmbeddingSet) -> float:
    """Mean cosine similarity over all same-identity cross-modal pairs."""
    vis = embeddings.by_modality("visible")
    ir = embeddings.by_modality("infrared")
    v = vis.features / np.linalg.norm(vis.features, axis=1, keepdims=True)
    r = ir.features / np.linalg.norm(ir.features, axis=1, keepdims=True)
    total = 0.0
    count = 0
    for ident in np.intersect1d(vis.ids, ir.ids):
        vi = v[vis.ids == ident]
        ri = r[ir.ids == ident]
        total += float(vi.sum(axis=0) @ ri.sum(axis=0))
        count += vi.shape[0] * ri.shape[0]
    if count == 0:
        return 0.0
    return total / count
