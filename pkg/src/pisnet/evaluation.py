"""Single-query retrieval with query-conditioned gallery features, CMC and mAP."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data_pipeline import DatasetManifest
from .errors import ConfigError, ContractError, ProtocolError
from .model_core import PISNet, embed
from .training import FeatureBank, TrainConfig, load_images, pretrain_backbone, train_qgab

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "+QGAB", "+QGAB+MPSL", "+QGAB+GRAM", "full")
# variant -> (score with QGAB, train GRAM, train MPSL)
_VARIANT_FLAGS = {
    "baseline": (False, False, False),
    "+QGAB": (True, False, False),
    "+QGAB+MPSL": (True, False, True),
    "+QGAB+GRAM": (True, True, False),
    "full": (True, True, True),
}
# rank score offset that puts plain-scored entries below every re-scored one
_RERANK_OFFSET = 3.0


@dataclass
class RetrievalTable:
    """Ranked gallery of one query: parallel arrays, best first."""

    query_id: int
    order: np.ndarray  # gallery indices
    scores: np.ndarray
    matches: np.ndarray  # bool

    @property
    def ranked(self):
        return list(zip(self.order.tolist(), self.scores.tolist(), self.matches.tolist()))


@dataclass
class MetricsReport:
    cmc: np.ndarray
    map: float
    aps: list
    excluded: int = 0

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def summary(self) -> dict:
        return {"rank1": self.rank(1), "rank5": self.rank(min(5, len(self.cmc))),
                "rank10": self.rank(min(10, len(self.cmc))), "mAP": self.map}

    def to_dict(self) -> dict:
        return {"cmc": [float(c) for c in self.cmc], "map": float(self.map),
                "aps": [float(a) for a in self.aps], "excluded": self.excluded, **self.summary()}


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def _require_trained(model: PISNet):
    if not model.qgab_trained:
        raise ContractError("query-guided scoring needs a model whose attention block was trained")


def plain_scores(query_maps: torch.Tensor, gallery_maps: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of pooled embeddings, ``(Q, G)``."""
    q = F.normalize(embed(query_maps), dim=-1)
    g = F.normalize(embed(gallery_maps), dim=-1)
    return q @ g.T


@torch.no_grad()
def guided_scores(model: PISNet, query_map: torch.Tensor, gallery_maps: torch.Tensor,
                  chunk: int = 1024) -> torch.Tensor:
    """Cosine similarity of each gallery map refined under ``query_map`` with the query."""
    q = embed(query_map)
    out = []
    for s in range(0, len(gallery_maps), chunk):
        g = gallery_maps[s:s + chunk]
        refined = model.qgab.attend(g, query_map[None].expand(len(g), -1, -1, -1)).refined
        out.append(F.cosine_similarity(embed(refined), q[None], dim=-1))
    return torch.cat(out)


def pairwise_score(query_image, gallery_image, model: PISNet) -> float:
    """Query-conditioned similarity of one (query, gallery) image pair, in ``[-1, 1]``."""
    _require_trained(model)
    model.eval()
    with torch.no_grad():
        maps = model.features(torch.stack([torch.as_tensor(query_image),
                                           torch.as_tensor(gallery_image)]))
    return float(guided_scores(model, maps[0], maps[1:])[0])


def rank_scores(scores, query_id, gallery_ids, valid=None) -> RetrievalTable:
    """Stable descending sort; ties go to the lower gallery index."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(len(scores))
    if valid is not None:
        idx = idx[np.asarray(valid, dtype=bool)]
    if len(idx) == 0:
        raise ProtocolError("cannot rank an empty gallery")
    order = idx[np.lexsort((idx, -scores[idx]))]
    matches = np.array([query_id in gallery_ids[j] for j in order], dtype=bool)
    return RetrievalTable(query_id, order, scores[order], matches)


def query_scores(model: PISNet, query_map, gallery_maps, use_qgab=True, rerank_top=None) -> np.ndarray:
    """Scores of one query against all gallery maps.

    With ``rerank_top=N`` only the N best entries by plain similarity are
    re-scored with the attention block; the others keep their plain order
    below them (shifted by a constant so scores stay non-increasing).
    """
    plain = plain_scores(query_map[None], gallery_maps)[0]
    if not use_qgab:
        return plain.numpy().astype(np.float64)
    _require_trained(model)
    n = len(gallery_maps)
    if rerank_top is None or rerank_top >= n:
        return guided_scores(model, query_map, gallery_maps).numpy().astype(np.float64)
    p = plain.numpy().astype(np.float64)
    idx = np.arange(n)
    top = idx[np.lexsort((idx, -p))][:rerank_top]
    out = p - _RERANK_OFFSET
    out[top] = guided_scores(model, query_map, gallery_maps[torch.from_numpy(top)]).numpy()
    return out


def rank_gallery(query_image, gallery_images, model: PISNet, query_id, gallery_ids,
                 use_qgab=True, rerank_top=None) -> RetrievalTable:
    if len(gallery_images) == 0:
        raise ProtocolError("cannot rank an empty gallery")
    model.eval()
    with torch.no_grad():
        qmap = model.features(torch.as_tensor(query_image)[None])[0]
        gmaps = model.features(torch.stack([torch.as_tensor(g) for g in gallery_images]))
    scores = query_scores(model, qmap, gmaps, use_qgab, rerank_top)
    return rank_scores(scores, query_id, [tuple(i) for i in gallery_ids])


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _with_matches(tables):
    kept = [t for t in tables if t.matches.any()]
    dropped = len(tables) - len(kept)
    if dropped:
        log.warning("%d queries have no match in the gallery and are excluded", dropped)
    return kept, dropped


def compute_cmc(tables, max_rank: int) -> np.ndarray:
    """``cmc[k-1]`` = fraction of queries whose first match is at rank <= k."""
    kept, _ = _with_matches(tables)
    cmc = np.zeros(max_rank, dtype=np.float64)
    if not kept:
        return cmc
    counts = np.zeros(max_rank, dtype=np.int64)
    for t in kept:
        first = int(np.argmax(t.matches))
        if first < max_rank:
            counts[first:] += 1
    return counts / len(kept)


def average_precision(matches) -> float:
    """Mean over match positions of (matches so far / rank)."""
    m = np.asarray(matches, dtype=bool)
    hits = np.flatnonzero(m)
    if len(hits) == 0:
        return 0.0
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def compute_map(tables) -> float:
    kept, _ = _with_matches(tables)
    if not kept:
        return 0.0
    return float(np.mean([average_precision(t.matches) for t in kept]))


def metrics_report(tables, max_rank: int = 20) -> MetricsReport:
    kept, dropped = _with_matches(tables)
    aps = [average_precision(t.matches) for t in kept]
    cmc = compute_cmc(kept, max_rank)
    return MetricsReport(cmc, float(np.mean(aps)) if aps else 0.0, aps, dropped)


# ---------------------------------------------------------------------------
# Manifest-level protocol
# ---------------------------------------------------------------------------

@dataclass
class RetrievalSet:
    """Backbone maps of a manifest's queries and gallery (gallery + distractors)."""

    query_idx: list
    gallery_idx: list
    query_maps: torch.Tensor
    gallery_maps: torch.Tensor
    query_ids: list
    gallery_ids: list
    query_cams: list
    gallery_cams: list

    @classmethod
    def build(cls, model: PISNet, manifest: DatasetManifest, size):
        q = manifest.select("query")
        g = manifest.select("gallery", "distractor")
        if not g:
            raise ProtocolError("manifest has no gallery or distractor entries")
        if not q:
            raise ProtocolError("manifest has no query entries")
        bank = FeatureBank(model, manifest, q + g, size)
        e = manifest.entries
        return cls(q, g, bank[q], bank[g], [e[i].ids[0] for i in q], [e[i].ids for i in g],
                   [e[i].cam for i in q], [e[i].cam for i in g])


def evaluate(model: PISNet, manifest: DatasetManifest, size=(64, 32), use_qgab=True,
             rerank_top=None, max_rank=20, retrieval: RetrievalSet = None):
    """Run the single-query protocol; returns ``(MetricsReport, tables)``.

    Same-camera entries of the query identity are dropped from its ranking
    when camera ids are known.
    """
    model.eval()
    rs = retrieval or RetrievalSet.build(model, manifest, size)
    tables = []
    for k in range(len(rs.query_idx)):
        scores = query_scores(model, rs.query_maps[k], rs.gallery_maps, use_qgab, rerank_top)
        valid = None
        qcam, qid = rs.query_cams[k], rs.query_ids[k]
        if qcam is not None:
            valid = [not (c == qcam and qid in ids) for c, ids in zip(rs.gallery_cams, rs.gallery_ids)]
        tables.append(rank_scores(scores, qid, rs.gallery_ids, valid))
    return metrics_report(tables, max_rank), tables


# ---------------------------------------------------------------------------
# Ablation and parameter sweep
# ---------------------------------------------------------------------------

def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant not in _VARIANT_FLAGS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    _, gram, mpsl = _VARIANT_FLAGS[variant]
    return dataclasses.replace(cfg, use_gram=gram, use_mpsl=mpsl, stage="qgab")


def _fresh_attention(backbone_model: PISNet, cfg: TrainConfig) -> PISNet:
    """Copy of a pretrained model with a re-initialised attention block."""
    model = PISNet(backbone_model.num_classes, cfg.backbone, cfg.guidance_channels, cfg.head_scale)
    model.load_state_dict(backbone_model.state_dict())
    model.class_ids = backbone_model.class_ids
    torch.manual_seed(cfg.seed + 1)
    model.qgab.c1.reset_parameters()
    model.qgab.c2.reset_parameters()
    model.backbone_trained = True
    return model


def ablation_run(manifest: DatasetManifest, variants, cfg: TrainConfig, backbone_model: PISNet = None,
                 max_rank: int = 20, models: dict = None):
    """Train and evaluate each variant on one shared pretrained backbone.

    Returns an ordered dict ``variant -> MetricsReport`` in table row order.
    When ``models`` is a dict it also receives each variant's trained model.
    """
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ConfigError(f"unknown variants {sorted(unknown)}; choose from {VARIANTS}")
    if backbone_model is None:
        backbone_model = pretrain_backbone(manifest, cfg)
    backbone_model.backbone.freeze()
    retrieval = RetrievalSet.build(backbone_model, manifest, cfg.image_size)
    results = {}
    for v in VARIANTS:
        if v not in variants:
            continue
        use_qgab = _VARIANT_FLAGS[v][0]
        if use_qgab:
            model = _fresh_attention(backbone_model, cfg)
            train_qgab(manifest, model, variant_config(cfg, v))
        else:
            model = backbone_model
        if models is not None:
            models[v] = model
        results[v], _ = evaluate(model, manifest, cfg.image_size, use_qgab, None, max_rank, retrieval)
    return results


def sweep(manifest: DatasetManifest, alphas, betas, cfg: TrainConfig, backbone_model: PISNet = None,
          max_rank: int = 20) -> list:
    """Grid over the loss weights; one full-model training run per cell."""
    if backbone_model is None:
        backbone_model = pretrain_backbone(manifest, cfg)
    backbone_model.backbone.freeze()
    retrieval = RetrievalSet.build(backbone_model, manifest, cfg.image_size)
    cells = []
    for a in alphas:
        for b in betas:
            c = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, alpha=a, beta=b))
            model = _fresh_attention(backbone_model, c)
            train_qgab(manifest, model, variant_config(c, "full"))
            report, _ = evaluate(model, manifest, cfg.image_size, True, None, max_rank, retrieval)
            cells.append({"alpha": a, "beta": b, **report.summary()})
    return cells
