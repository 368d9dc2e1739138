"""Metrics, evaluation protocols, reports, and retrieval-grid rendering.

Two protocols are provided. The full protocol scores each test pair against
one seeded-random negative for AUC and ranks the positive against every
bottom of the test split for MRR. The sampled protocol draws 3 random
negatives per positive for AUC and 9 for MRR (without replacement), the
convention used by earlier compatibility work.

AUC counts strict wins: a tie contributes 0. MRR uses the 0-based rank of
the positive in the descending-score order, ties broken by ascending
bottom_id, and averages 1 / (rank + 1).

Per-query scoring is embarrassingly parallel and the metric reductions are
plain means, so any parallel evaluation must not depend on partitioning.
The implementation here is sequential.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .data import ItemImage, PairManifest
from .cigm import Template
from .util import stable_seed

PROTOCOL_FULL = "full"
PROTOCOL_MGCM = "mgcm"


class CatalogScorer(Protocol):
    """Anything that can score one top against a list of candidate bottoms."""

    def scores(self, top_id: str, bottom_ids: Sequence[str]) -> np.ndarray: ...


@dataclass
class ScoredQuery:
    top_id: str
    positive_bottom_id: str
    candidates: List[Tuple[str, float]]

    def validate(self) -> None:
        hits = sum(1 for cid, _ in self.candidates if cid == self.positive_bottom_id)
        if hits != 1:
            raise ValueError(
                f"query {self.top_id!r}: positive {self.positive_bottom_id!r} "
                f"appears {hits} times among candidates"
            )


@dataclass
class EvalReport:
    protocol: str
    auc: float
    mrr: float
    n_queries: int
    seed: int
    checkpoint_hash: str = ""
    config_hash: str = ""

    def validate(self) -> None:
        if not (0.0 <= self.auc <= 1.0):
            raise ValueError(f"auc {self.auc} out of [0, 1]")
        if not (0.0 < self.mrr <= 1.0):
            raise ValueError(f"mrr {self.mrr} out of (0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def auc_metric(queries: Sequence[ScoredQuery]) -> float:
    """Fraction of (positive, negative) comparisons won strictly.

    Every non-positive candidate of a query counts as one comparison; the
    mean is taken over all comparisons.
    """
    wins = 0
    total = 0
    for q in queries:
        q.validate()
        pos_score = next(s for cid, s in q.candidates if cid == q.positive_bottom_id)
        negs = [s for cid, s in q.candidates if cid != q.positive_bottom_id]
        if not negs:
            raise ValueError(f"query {q.top_id!r} has no negative candidate")
        wins += sum(1 for s in negs if pos_score > s)
        total += len(negs)
    if total == 0:
        raise ValueError("no comparisons")
    return wins / total


def positive_rank(query: ScoredQuery) -> int:
    """0-based rank of the positive, descending score, ties by ascending id."""
    query.validate()
    order = sorted(query.candidates, key=lambda kv: (-kv[1], kv[0]))
    for rank, (cid, _) in enumerate(order):
        if cid == query.positive_bottom_id:
            return rank
    raise ValueError(f"positive missing from candidates of {query.top_id!r}")


def mrr_metric(queries: Sequence[ScoredQuery]) -> float:
    """Mean of 1 / (rank + 1) over queries; a top-ranked positive scores 1."""
    if not queries:
        raise ValueError("no queries")
    return float(np.mean([1.0 / (positive_rank(q) + 1) for q in queries]))


def _sample_negatives(
    rng: np.random.Generator,
    pool: Sequence[str],
    positives: frozenset,
    k: int,
    top_id: str,
) -> List[str]:
    valid = [b for b in pool if b not in positives]
    if len(valid) < k:
        raise ValueError(
            f"top {top_id!r}: need {k} negatives but only {len(valid)} non-positive bottoms"
        )
    idx = rng.choice(len(valid), size=k, replace=False)
    return [valid[int(i)] for i in idx]


def evaluate_full(
    scorer: CatalogScorer,
    manifest: PairManifest,
    *,
    split: str = "test",
    seed: int = 0,
    checkpoint_hash: str = "",
    config_hash: str = "",
) -> Tuple[EvalReport, List[Tuple[str, int, float]]]:
    """Full-catalog protocol.

    AUC pairs each positive with one seeded uniform negative; MRR ranks each
    positive against every bottom of the split. Returns the report plus one
    (top_id, positive_rank, positive_score) record per query. Deterministic
    for a fixed seed.
    """
    pairs = manifest.pairs_of_split(split)
    if not pairs:
        raise ValueError(f"split {split!r} is empty")
    catalog = manifest.bottoms_of_split(split)
    rng = np.random.default_rng(stable_seed(seed, "full-auc"))

    auc_queries: List[ScoredQuery] = []
    mrr_queries: List[ScoredQuery] = []
    per_query: List[Tuple[str, int, float]] = []
    for p in pairs:
        positives = manifest.positives_of_top(p.top_id)
        neg = _sample_negatives(rng, catalog, positives, 1, p.top_id)[0]
        s_pos, s_neg = scorer.scores(p.top_id, [p.bottom_id, neg])
        auc_queries.append(ScoredQuery(p.top_id, p.bottom_id,
                                       [(p.bottom_id, float(s_pos)), (neg, float(s_neg))]))

        scores = scorer.scores(p.top_id, catalog)
        mrr_q = ScoredQuery(p.top_id, p.bottom_id, list(zip(catalog, scores.tolist())))
        mrr_queries.append(mrr_q)
        rank = positive_rank(mrr_q)
        pos_score = float(scores[catalog.index(p.bottom_id)])
        per_query.append((p.top_id, rank, pos_score))

    report = EvalReport(
        protocol=PROTOCOL_FULL,
        auc=auc_metric(auc_queries),
        mrr=mrr_metric(mrr_queries),
        n_queries=len(pairs),
        seed=seed,
        checkpoint_hash=checkpoint_hash,
        config_hash=config_hash,
    )
    report.validate()
    return report, per_query


def evaluate_mgcm(
    scorer: CatalogScorer,
    manifest: PairManifest,
    *,
    n_auc: int = 3,
    n_mrr: int = 9,
    seed: int = 0,
    split: str = "test",
    checkpoint_hash: str = "",
    config_hash: str = "",
) -> Tuple[EvalReport, List[Tuple[str, int, float]]]:
    """Sampled-negative protocol: n_auc negatives for AUC, n_mrr for MRR.

    Negatives are drawn uniformly without replacement per query, seeded.
    """
    pairs = manifest.pairs_of_split(split)
    if not pairs:
        raise ValueError(f"split {split!r} is empty")
    catalog = manifest.bottoms_of_split(split)
    rng = np.random.default_rng(stable_seed(seed, "mgcm"))

    auc_queries: List[ScoredQuery] = []
    mrr_queries: List[ScoredQuery] = []
    per_query: List[Tuple[str, int, float]] = []
    for p in pairs:
        positives = manifest.positives_of_top(p.top_id)
        negs_auc = _sample_negatives(rng, catalog, positives, n_auc, p.top_id)
        ids = [p.bottom_id] + negs_auc
        scores = scorer.scores(p.top_id, ids)
        auc_queries.append(ScoredQuery(p.top_id, p.bottom_id, list(zip(ids, scores.tolist()))))

        negs_mrr = _sample_negatives(rng, catalog, positives, n_mrr, p.top_id)
        ids = [p.bottom_id] + negs_mrr
        scores = scorer.scores(p.top_id, ids)
        mrr_q = ScoredQuery(p.top_id, p.bottom_id, list(zip(ids, scores.tolist())))
        mrr_queries.append(mrr_q)
        per_query.append((p.top_id, positive_rank(mrr_q), float(scores[0])))

    report = EvalReport(
        protocol=PROTOCOL_MGCM,
        auc=auc_metric(auc_queries),
        mrr=mrr_metric(mrr_queries),
        n_queries=len(pairs),
        seed=seed,
        checkpoint_hash=checkpoint_hash,
        config_hash=config_hash,
    )
    report.validate()
    return report, per_query


def write_eval_report(
    report: EvalReport,
    per_query: Sequence[Tuple[str, int, float]],
    out_dir: str | Path,
    *,
    stem: str = "eval",
) -> Tuple[Path, Path]:
    """Write the report JSON and the per-query CSV; byte-stable per seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / f"{stem}_report.json"
    queries_path = out_dir / f"{stem}_queries.csv"
    report_path.write_text(report.to_json() + "\n", encoding="utf-8")
    with open(queries_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["top_id", "positive_rank", "positive_score"])
        for top_id, rank, score in per_query:
            w.writerow([top_id, rank, f"{score:.8f}"])
    return report_path, queries_path


def _tile(pixels: np.ndarray) -> Image.Image:
    arr = np.clip((pixels.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    return Image.fromarray(arr)


def render_retrieval_grid(
    top: ItemImage,
    template: Template | ItemImage,
    ranked: Sequence[Tuple[ItemImage, float]],
    positive_id: str,
    out_path: str | Path,
    *,
    pad: int = 4,
    border: int = 3,
) -> Path:
    """Render a query and its ranked retrievals as one PNG.

    Row 1 is the input top, row 2 the generated template, row 3 the
    retrieved bottoms in rank order with the positive outlined in red.
    Layout and encoding are deterministic, so identical inputs produce
    byte-identical files.
    """
    if not ranked:
        raise ValueError("ranked list must be nonempty")
    size = top.pixels.shape[1]
    k = len(ranked)
    width = k * size + (k + 1) * pad
    height = 3 * size + 4 * pad
    canvas = Image.new("RGB", (width, height), (255, 255, 255))

    canvas.paste(_tile(top.pixels), (pad, pad))
    canvas.paste(_tile(template.pixels), (pad, size + 2 * pad))
    y = 2 * size + 3 * pad
    draw = ImageDraw.Draw(canvas)
    for col, (img, _) in enumerate(ranked):
        x = pad + col * (size + pad)
        canvas.paste(_tile(img.pixels), (x, y))
        if img.item_id == positive_id:
            for b in range(border):
                draw.rectangle([x + b, y + b, x + size - 1 - b, y + size - 1 - b],
                               outline=(255, 0, 0))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)
    return out_path
