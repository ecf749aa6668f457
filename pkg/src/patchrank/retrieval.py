"""Hierarchical retrieval: global shortlist, patch re-ranking, evaluation.

The global stage always uses full-map VLAD descriptors; the configured
pooling strategy only affects the patch descriptors used for re-ranking.
Candidates are scored independently (optionally by a thread pool sized from
the PATCHRANK_THREADS environment variable) and merged in candidate order,
so results do not depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from patchrank import tensorio
from patchrank.config import RunConfig
from patchrank.matching import mutual_nn
from patchrank.patches import extract_multiscale
from patchrank.scoring import ScoredPair, derive_seed, fuse_scores, score_match_set
from patchrank.types import DatasetManifest, FeatureMap, ImageEntry, VladModel
from patchrank.vlad import project, vlad_aggregate_features

RECALL_NS = (1, 5, 10, 20, 25)
RESULTS_SCHEMA = "patchrank-results-v1"

FmapProvider = Callable[[str], FeatureMap]


@dataclass(frozen=True)
class GlobalIndex:
    """Unit-norm full-map descriptors for every reference image."""

    image_ids: tuple[str, ...]
    descriptors: np.ndarray  # (M, D_proj) float32

    def __post_init__(self):
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("index image_ids must be unique")
        if self.descriptors.shape[0] != len(self.image_ids):
            raise ValueError("one descriptor row per image id required")


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    shortlist_ids: tuple[str, ...]
    shortlist_distances: tuple[float, ...]
    reranked_ids: tuple[str, ...]
    reranked_scores: tuple[float, ...]
    scored: tuple[ScoredPair, ...]  # in shortlist order, dropped candidates absent
    dropped: tuple[str, ...] = ()


@dataclass(frozen=True)
class EvalReport:
    recall_at: tuple[tuple[int, float], ...]
    verdicts: tuple[tuple[str, int | None], ...]  # (query_id, first correct rank)
    evaluated: int
    excluded: tuple[str, ...]
    pose_buckets: tuple[tuple[float, float, float], ...] | None = None

    def recall(self, n: int) -> float:
        for nn, pct in self.recall_at:
            if nn == n:
                return pct
        raise KeyError(n)

    def to_dict(self) -> dict:
        doc: dict = {
            "recall_at": [[n, pct] for n, pct in self.recall_at],
            "verdicts": [[qid, rank] for qid, rank in self.verdicts],
            "evaluated": self.evaluated,
            "excluded": list(self.excluded),
        }
        if self.pose_buckets is not None:
            doc["pose_buckets"] = [[m, d, pct] for m, d, pct in self.pose_buckets]
        return doc


def global_descriptor(fmap: FeatureMap, model: VladModel) -> np.ndarray:
    """Full-map aggregation (all H*W locations) projected to unit norm."""
    feats = fmap.data.reshape(-1, fmap.depth)
    raw = vlad_aggregate_features(feats, model)
    return project(raw, model).astype(np.float32)


def build_index(manifest: DatasetManifest, model: VladModel) -> GlobalIndex:
    ids = []
    rows = []
    for entry in manifest.references:
        fmap = tensorio.read_feature_map(entry.path, entry.image_id)
        if fmap.depth != model.feature_dim:
            raise ValueError(
                f"{entry.image_id}: depth {fmap.depth} != model dim "
                f"{model.feature_dim}")
        ids.append(entry.image_id)
        rows.append(global_descriptor(fmap, model))
    if not rows:
        raise ValueError("manifest has no reference entries")
    return GlobalIndex(image_ids=tuple(ids), descriptors=np.stack(rows))


def shortlist(
    query_descriptor: np.ndarray, index: GlobalIndex, k: int
) -> tuple[tuple[str, ...], tuple[float, ...]]:
    """k nearest reference ids by L2 distance, index-order tie-break."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index.image_ids) == 0:
        raise ValueError("index is empty")
    q = np.asarray(query_descriptor, dtype=np.float64).reshape(-1)
    refs = index.descriptors.astype(np.float64)
    dists = np.sqrt(np.maximum(((refs - q)**2).sum(axis=1), 0.0))
    order = np.argsort(dists, kind="stable")[:k]
    return (tuple(index.image_ids[i] for i in order),
            tuple(float(dists[i]) for i in order))


def default_thread_count() -> int:
    raw = os.environ.get("PATCHRANK_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _score_candidate(
    query_id: str,
    candidate_id: str,
    candidate_fmap: FeatureMap,
    query_sets,
    cfg: RunConfig,
    model: VladModel,
) -> ScoredPair:
    cand_sets = extract_multiscale(
        candidate_fmap, model, cfg.patch_config(), strategy=cfg.pooling)
    per_scale = []
    per_inliers = []
    for cand_set, query_set in zip(cand_sets, query_sets):
        matches = mutual_nn(cand_set, query_set)
        params = cfg.ransac_params(rng_seed=derive_seed(
            cfg.rng_seed, query_id, candidate_id, cand_set.patch_size))
        score, inliers = score_match_set(
            matches, cand_set.grid, query_set.grid, cfg.scorer, params,
            cfg.max_abs_displacement)
        per_scale.append(float(score))
        per_inliers.append(
            tuple(map(tuple, inliers)) if inliers is not None else ())
    fused = fuse_scores(per_scale, cfg.patch_config().fusion_weights)
    return ScoredPair(
        query_id=query_id,
        candidate_id=candidate_id,
        per_scale_scores=tuple(per_scale),
        fused_score=fused,
        per_scale_inliers=tuple(per_inliers) if cfg.scorer == "ransac" else None,
    )


def rerank(
    query_fmap: FeatureMap,
    shortlist_ids,
    shortlist_distances,
    cfg: RunConfig,
    model: VladModel,
    provider: FmapProvider,
) -> RetrievalResult:
    """Re-order a shortlist by fused patch spatial scores (descending).

    Ties keep the original shortlist order. Candidates whose feature map
    cannot be loaded are dropped and recorded.
    """
    query_sets = extract_multiscale(
        query_fmap, model, cfg.patch_config(), strategy=cfg.pooling)
    candidates = list(shortlist_ids)

    def load_and_score(candidate_id: str) -> ScoredPair | None:
        try:
            cand_fmap = provider(candidate_id)
        except (FileNotFoundError, KeyError):
            return None
        return _score_candidate(
            query_fmap.image_id, candidate_id, cand_fmap, query_sets, cfg, model)

    threads = default_thread_count()
    if threads > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(load_and_score, candidates))
    else:
        outcomes = [load_and_score(c) for c in candidates]

    scored = [s for s in outcomes if s is not None]
    dropped = tuple(c for c, s in zip(candidates, outcomes) if s is None)
    order = sorted(
        range(len(scored)), key=lambda i: (-scored[i].fused_score, i))
    return RetrievalResult(
        query_id=query_fmap.image_id,
        shortlist_ids=tuple(candidates),
        shortlist_distances=tuple(float(d) for d in shortlist_distances),
        reranked_ids=tuple(scored[i].candidate_id for i in order),
        reranked_scores=tuple(scored[i].fused_score for i in order),
        scored=tuple(scored),
        dropped=dropped,
    )


def manifest_provider(manifest: DatasetManifest) -> FmapProvider:
    by_id = manifest.reference_by_id()

    def load(image_id: str) -> FeatureMap:
        return tensorio.read_feature_map(by_id[image_id].path, image_id)

    return load


def retrieve_all(
    manifest: DatasetManifest,
    index: GlobalIndex,
    cfg: RunConfig,
    model: VladModel,
    provider: FmapProvider | None = None,
) -> list[RetrievalResult]:
    """Shortlist + rerank every query in the manifest."""
    if provider is None:
        provider = manifest_provider(manifest)
    results = []
    for entry in manifest.queries:
        fmap = tensorio.read_feature_map(entry.path, entry.image_id)
        ids, dists = shortlist(global_descriptor(fmap, model), index, cfg.k)
        results.append(rerank(fmap, ids, dists, cfg, model, provider))
    return results


# -- results files ---------------------------------------------------------------

def _result_to_dict(result: RetrievalResult) -> dict:
    return {
        "query_id": result.query_id,
        "shortlist": [
            {"image_id": i, "distance": d}
            for i, d in zip(result.shortlist_ids, result.shortlist_distances)],
        "reranked": [
            {"image_id": i, "fused_score": s}
            for i, s in zip(result.reranked_ids, result.reranked_scores)],
        "scored": [
            {
                "candidate_id": sp.candidate_id,
                "per_scale_scores": list(sp.per_scale_scores),
                "fused_score": sp.fused_score,
                "per_scale_inlier_counts": (
                    [len(pairs) for pairs in sp.per_scale_inliers]
                    if sp.per_scale_inliers is not None else None),
            }
            for sp in result.scored],
        "dropped": list(result.dropped),
    }


def _result_from_dict(data: dict) -> RetrievalResult:
    scored = tuple(
        ScoredPair(
            query_id=data["query_id"],
            candidate_id=sp["candidate_id"],
            per_scale_scores=tuple(sp["per_scale_scores"]),
            fused_score=sp["fused_score"],
        )
        for sp in data.get("scored", ()))
    return RetrievalResult(
        query_id=data["query_id"],
        shortlist_ids=tuple(e["image_id"] for e in data["shortlist"]),
        shortlist_distances=tuple(e["distance"] for e in data["shortlist"]),
        reranked_ids=tuple(e["image_id"] for e in data["reranked"]),
        reranked_scores=tuple(e["fused_score"] for e in data["reranked"]),
        scored=scored,
        dropped=tuple(data.get("dropped", ())),
    )


def save_results(results, path) -> None:
    import json
    from pathlib import Path

    doc = {
        "schema": RESULTS_SCHEMA,
        "results": [_result_to_dict(r) for r in results],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_results(path) -> list[RetrievalResult]:
    import json
    from pathlib import Path

    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != RESULTS_SCHEMA:
        raise ValueError(f"unsupported results schema {doc.get('schema')!r}")
    return [_result_from_dict(d) for d in doc["results"]]


# -- evaluation ----------------------------------------------------------------

def _positive_predicate(manifest: DatasetManifest):
    tol = manifest.tolerance
    refs = manifest.reference_by_id()

    def has_ground_truth(entry: ImageEntry) -> bool:
        if tol.kind == "frame_window":
            return entry.frame_index is not None
        return entry.pose is not None

    def is_positive(query: ImageEntry, candidate_id: str) -> bool:
        ref = refs.get(candidate_id)
        if ref is None:
            return False
        if tol.kind == "frame_window":
            if ref.frame_index is None or query.frame_index is None:
                return False
            return abs(query.frame_index - ref.frame_index) <= tol.frame_window
        if ref.pose is None or query.pose is None:
            return False
        terr = query.pose.translation_error(ref.pose)
        if tol.kind == "radius":
            return terr <= tol.radius_m
        if tol.kind == "radius_orientation":
            return (terr <= tol.radius_m
                    and query.pose.orientation_error_deg(ref.pose)
                    <= tol.orientation_deg)
        # pose_thresholds: the loosest bucket defines Recall@N correctness.
        max_m = max(m for m, _ in tol.pose_thresholds)
        max_d = max(d for _, d in tol.pose_thresholds)
        return (terr <= max_m
                and query.pose.orientation_error_deg(ref.pose) <= max_d)

    return has_ground_truth, is_positive


def evaluate(results, manifest: DatasetManifest) -> EvalReport:
    """Recall@N over re-ranked results, plus pose buckets in threshold mode.

    Queries without the ground truth required by the tolerance kind are
    excluded from percentages and listed in the report. A query whose
    shortlist contains no positive at all still counts as a miss.
    """
    queries = {e.image_id: e for e in manifest.queries}
    refs = manifest.reference_by_id()
    has_gt, is_positive = _positive_predicate(manifest)
    tol = manifest.tolerance

    verdicts: list[tuple[str, int | None]] = []
    excluded: list[str] = []
    bucket_hits = None
    if tol.kind == "pose_thresholds":
        bucket_hits = {pair: 0 for pair in tol.pose_thresholds}

    for result in results:
        query = queries.get(result.query_id)
        if query is None or not has_gt(query):
            excluded.append(result.query_id)
            continue
        first_rank = None
        for rank, candidate_id in enumerate(result.reranked_ids, start=1):
            if is_positive(query, candidate_id):
                first_rank = rank
                break
        verdicts.append((result.query_id, first_rank))
        if bucket_hits is not None and result.reranked_ids:
            # The query inherits the pose of its best-ranked reference.
            top = refs.get(result.reranked_ids[0])
            if top is not None and top.pose is not None:
                terr = query.pose.translation_error(top.pose)
                oerr = query.pose.orientation_error_deg(top.pose)
                for (m, d) in bucket_hits:
                    if terr <= m and oerr <= d:
                        bucket_hits[(m, d)] += 1

    evaluated = len(verdicts)
    recall = []
    for n in RECALL_NS:
        if evaluated:
            hits = sum(1 for _, rank in verdicts if rank is not None and rank <= n)
            recall.append((n, 100.0 * hits / evaluated))
        else:
            recall.append((n, 0.0))

    buckets = None
    if bucket_hits is not None:
        buckets = tuple(
            (m, d, (100.0 * bucket_hits[(m, d)] / evaluated) if evaluated else 0.0)
            for (m, d) in tol.pose_thresholds)

    return EvalReport(
        recall_at=tuple(recall),
        verdicts=tuple(verdicts),
        evaluated=evaluated,
        excluded=tuple(excluded),
        pose_buckets=buckets,
    )
