"""Retrieval evaluation: ranking, CMC / mAP / mINP, and the two standard
visible-infrared protocols.

Ranking is by descending cosine similarity with ties broken by ascending
gallery index. Per query: the CMC registers a hit at rank k iff a valid
positive appears in the top k; AP averages precision at each positive's
rank; INP divides the positive count by the rank of the hardest (last)
positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

SYSU_INDOOR_CAMERAS = (1, 2)
# Queries from IR camera 3 exclude gallery items from the co-located visible
# camera 2, following the dataset's official evaluation convention.
SYSU_EXCLUDED_PAIRS = {3: 2}


@dataclass
class EmbeddingSet:
    """Features plus per-item identity, camera, and modality tags."""

    features: np.ndarray
    ids: np.ndarray
    cameras: np.ndarray | None
    modalities: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.ids = np.asarray(self.ids)
        self.modalities = np.asarray(self.modalities)
        if self.cameras is not None:
            self.cameras = np.asarray(self.cameras)
        n = self.features.shape[0]
        if self.ids.shape[0] != n or self.modalities.shape[0] != n:
            raise ValidationError("embedding tags do not match feature count")
        if self.cameras is not None and self.cameras.shape[0] != n:
            raise ValidationError("camera tags do not match feature count")

    def __len__(self):
        return self.features.shape[0]

    def subset(self, mask) -> "EmbeddingSet":
        return EmbeddingSet(self.features[mask], self.ids[mask],
                            None if self.cameras is None else self.cameras[mask],
                            self.modalities[mask])

    def by_modality(self, modality: str) -> "EmbeddingSet":
        return self.subset(self.modalities == modality)


@dataclass
class MetricsReport:
    """CMC vector (rank 1..K), mAP, mINP, and per-trial detail."""

    cmc: np.ndarray
    map: float
    minp: float
    trials: list = field(default_factory=list)
    excluded_queries: int = 0
    protocol: dict = field(default_factory=dict)

    def rank_at(self, k: int) -> float:
        if not 1 <= k <= len(self.cmc):
            raise ValidationError(f"rank {k} outside the computed CMC range 1..{len(self.cmc)}")
        return float(self.cmc[k - 1])

    def to_dict(self) -> dict:
        return {
            "cmc": [float(v) for v in self.cmc],
            "map": float(self.map),
            "minp": float(self.minp),
            "trials": self.trials,
            "excluded_queries": self.excluded_queries,
            "protocol": self.protocol,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(cmc=np.asarray(raw["cmc"], dtype=np.float64), map=raw["map"],
                   minp=raw["minp"], trials=raw.get("trials", []),
                   excluded_queries=raw.get("excluded_queries", 0),
                   protocol=raw.get("protocol", {}))


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError(f"{what} must be a non-empty 2-D array, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValidationError(f"{what} contains zero-norm rows")
    return x / norms


def rank(query_feats: np.ndarray, gallery_feats: np.ndarray) -> np.ndarray:
    """Gallery indices per query, best match first.

    Descending cosine similarity; exact ties resolve to the lower gallery
    index (stable sort), which keeps the ordering deterministic.
    """
    q = _unit_rows(query_feats, "query features")
    g = _unit_rows(gallery_feats, "gallery features")
    if q.shape[1] != g.shape[1]:
        raise ValidationError(f"feature dims differ: query {q.shape[1]} vs gallery {g.shape[1]}")
    sims = q @ g.T
    return np.argsort(-sims, axis=1, kind="stable")


def cmc_map_minp(ranked_ids: np.ndarray, query_id: int, valid_mask: np.ndarray | None = None,
                 max_rank: int = 20) -> tuple[np.ndarray, float, float]:
    """Per-query metrics from a ranked gallery id list.

    ``valid_mask`` (aligned with ``ranked_ids``) drops excluded gallery
    entries before ranks are counted. Raises when no valid positive exists;
    protocol drivers exclude and tally such queries.
    """
    ranked_ids = np.asarray(ranked_ids)
    if valid_mask is not None:
        ranked_ids = ranked_ids[np.asarray(valid_mask, dtype=bool)]
    matches = ranked_ids == query_id
    if not matches.any():
        raise ValidationError(f"query identity {query_id} has no valid gallery positive")
    positive_ranks = np.flatnonzero(matches) + 1  # 1-based
    hits = np.zeros(max_rank, dtype=np.float64)
    first = positive_ranks[0]
    if first <= max_rank:
        hits[first - 1:] = 1.0
    cum = np.arange(1, len(positive_ranks) + 1, dtype=np.float64)
    ap = float(np.mean(cum / positive_ranks))
    inp = float(len(positive_ranks) / positive_ranks[-1])
    return hits, ap, inp


def _evaluate_queries(query: EmbeddingSet, gallery: EmbeddingSet, max_rank: int,
                      excluded_pairs: dict | None = None) -> tuple[np.ndarray, float, float, int]:
    """Mean (CMC, AP, INP) over all evaluable queries plus exclusion tally."""
    order = rank(query.features, gallery.features)
    all_hits, all_ap, all_inp = [], [], []
    excluded = 0
    for qi in range(len(query)):
        ranked_ids = gallery.ids[order[qi]]
        valid = None
        if excluded_pairs:
            qcam = int(query.cameras[qi])
            drop_cam = excluded_pairs.get(qcam)
            if drop_cam is not None:
                valid = gallery.cameras[order[qi]] != drop_cam
        try:
            hits, ap, inp = cmc_map_minp(ranked_ids, int(query.ids[qi]), valid, max_rank)
        except ValidationError:
            excluded += 1
            continue
        all_hits.append(hits)
        all_ap.append(ap)
        all_inp.append(inp)
    if not all_hits:
        raise ValidationError("no query has a valid gallery positive")
    return (np.mean(all_hits, axis=0), float(np.mean(all_ap)), float(np.mean(all_inp)), excluded)


def _mean_report(per_trial: list, excluded: int, protocol: dict) -> MetricsReport:
    cmc = np.mean([t["cmc"] for t in per_trial], axis=0)
    trials = [{"cmc": [float(v) for v in t["cmc"]], "map": t["map"], "minp": t["minp"]}
              for t in per_trial]
    return MetricsReport(
        cmc=cmc,
        map=float(np.mean([t["map"] for t in per_trial])),
        minp=float(np.mean([t["minp"] for t in per_trial])),
        trials=trials,
        excluded_queries=excluded,
        protocol=protocol,
    )


def protocol_sysu(embeddings: EmbeddingSet, mode: str = "all", shot: str = "single",
                  trials: int = 10, seed: int = 0, max_rank: int = 20,
                  indoor_cameras=SYSU_INDOOR_CAMERAS,
                  excluded_pairs=None) -> MetricsReport:
    """Infrared-query / sampled-visible-gallery protocol.

    Per trial, the gallery takes 1 (single-shot) or 10 (multi-shot) visible
    images per identity per camera; indoor mode restricts the gallery to the
    indoor cameras; the same-location exclusion drops co-located gallery
    cameras per query. Metrics are averaged over trials.
    """
    if mode not in ("all", "indoor"):
        raise ValidationError(f"mode must be 'all' or 'indoor', got {mode!r}")
    if shot not in ("single", "multi"):
        raise ValidationError(f"shot must be 'single' or 'multi', got {shot!r}")
    if trials <= 0:
        raise ValidationError("trials must be positive")
    if embeddings.cameras is None:
        raise ValidationError("this protocol requires camera tags on every embedding")
    excluded_pairs = SYSU_EXCLUDED_PAIRS if excluded_pairs is None else excluded_pairs
    query = embeddings.by_modality("infrared")
    gallery_pool = embeddings.by_modality("visible")
    if len(query) == 0 or len(gallery_pool) == 0:
        raise ValidationError("need both infrared queries and visible gallery images")
    if mode == "indoor":
        gallery_pool = gallery_pool.subset(np.isin(gallery_pool.cameras, indoor_cameras))
        if len(gallery_pool) == 0:
            raise ValidationError("no visible images from indoor cameras")
    per_shot = 1 if shot == "single" else 10
    per_trial = []
    excluded = 0
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
        keep = []
        for ident in np.unique(gallery_pool.ids):
            for cam in np.unique(gallery_pool.cameras[gallery_pool.ids == ident]):
                pool = np.flatnonzero((gallery_pool.ids == ident) & (gallery_pool.cameras == cam))
                take = min(per_shot, len(pool))
                keep.extend(rng.choice(pool, size=take, replace=False))
                if take < per_shot:  # small pools resample with replacement
                    keep.extend(rng.choice(pool, size=per_shot - take, replace=True))
        gallery = gallery_pool.subset(np.sort(np.asarray(keep)))
        cmc, ap, inp, excl = _evaluate_queries(query, gallery, max_rank, excluded_pairs)
        per_trial.append({"cmc": cmc, "map": ap, "minp": inp})
        excluded += excl
    return _mean_report(per_trial, excluded, {
        "name": "sysu", "mode": mode, "shot": shot, "trials": trials, "seed": seed})


def protocol_regdb(embeddings: EmbeddingSet, direction: str = "ir2vis", repeats: int = 10,
                   seed: int = 0, max_rank: int = 20,
                   gallery_per_id: int | None = 10) -> MetricsReport:
    """Fixed-split protocol evaluated in one direction.

    Each repeat resamples ``gallery_per_id`` gallery images per identity
    (pass None to rank against the full gallery every repeat, in which case
    repeats are only meaningful across retrained splits).
    """
    if direction not in ("ir2vis", "vis2ir"):
        raise ValidationError(f"direction must be 'ir2vis' or 'vis2ir', got {direction!r}")
    if repeats <= 0:
        raise ValidationError("repeats must be positive")
    q_mod, g_mod = ("infrared", "visible") if direction == "ir2vis" else ("visible", "infrared")
    query = embeddings.by_modality(q_mod)
    gallery_pool = embeddings.by_modality(g_mod)
    if len(query) == 0 or len(gallery_pool) == 0:
        raise ValidationError(f"empty split: need both {q_mod} and {g_mod} embeddings")
    per_trial = []
    excluded = 0
    for r in range(repeats):
        if gallery_per_id is None:
            gallery = gallery_pool
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
            keep = []
            for ident in np.unique(gallery_pool.ids):
                pool = np.flatnonzero(gallery_pool.ids == ident)
                take = min(gallery_per_id, len(pool))
                keep.extend(rng.choice(pool, size=take, replace=False))
            gallery = gallery_pool.subset(np.sort(np.asarray(keep)))
        cmc, ap, inp, excl = _evaluate_queries(query, gallery, max_rank, excluded_pairs=None)
        per_trial.append({"cmc": cmc, "map": ap, "minp": inp})
        excluded += excl
    return _mean_report(per_trial, excluded, {
        "name": "regdb", "direction": direction, "repeats": repeats, "seed": seed,
        "gallery_per_id": gallery_per_id})


# ---- embedding dump ----------------------------------------------------


def save_embeddings(embeddings: EmbeddingSet, path) -> None:
    """Textual embedding dump: one CSV row per item, floats written with
    exact round-trip representations so re-runs are byte-identical."""
    dim = embeddings.features.shape[1]
    lines = ["id,camera,modality," + ",".join(f"f{i}" for i in range(dim))]
    cameras = embeddings.cameras
    for i in range(len(embeddings)):
        cam = "" if cameras is None else str(int(cameras[i]))
        values = ",".join(repr(float(v)) for v in embeddings.features[i])
        lines.append(f"{int(embeddings.ids[i])},{cam},{embeddings.modalities[i]},{values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path) -> EmbeddingSet:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text or not text[0].startswith("id,camera,modality,"):
        raise ValidationError(f"{path} is not an embedding dump")
    ids, cams, mods, feats = [], [], [], []
    has_cameras = True
    for lineno, line in enumerate(text[1:], start=2):
        parts = line.split(",")
        if len(parts) < 4:
            raise ValidationError(f"{path}: line {lineno}: too few fields")
        ids.append(int(parts[0]))
        if parts[1] == "":
            has_cameras = False
            cams.append(-1)
        else:
            cams.append(int(parts[1]))
        mods.append(parts[2])
        feats.append([float(v) for v in parts[3:]])
    return EmbeddingSet(
        features=np.asarray(feats, dtype=np.float64),
        ids=np.asarray(ids, dtype=np.int64),
        cameras=np.asarray(cams, dtype=np.int64) if has_cameras else None,
        modalities=np.asarray(mods),
    )
