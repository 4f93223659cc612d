"""Merge chaincode: Multi-KRUM filtering, FoolsGold re-weighting, weighted FedAvg."""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics.pairwise import cosine_similarity

from app.core.errors import ConfigurationError, MergeAbortedError, RejectedInputError
from app.models.aggregation import FgHistory, KrumSelection, MergeOutcome, UpdateSet
from app.models.nn import ModelParams
from app.schemas.experiment import DefensePolicy

logger = logging.getLogger(__name__)

# 1 - cosine below this is rounding residue of identical directions
COSINE_TOLERANCE = 1e-9


def check_krum_bound(n: int, f: int) -> None:
    if 2 * f + 2 >= n:
        raise ConfigurationError(
            f"multi-krum requires 2f+2 < n, got 2*{f}+2={2 * f + 2} >= n={n}"
        )


def _squared_distances(matrix: np.ndarray) -> np.ndarray:
    n = matrix.shape[0]
    distances = np.zeros((n, n))
    for i in range(n):
        distances[i] = np.sum((matrix - matrix[i]) ** 2, axis=1)
    return distances


def multikrum_scores(s: UpdateSet, f: int) -> List[Tuple[str, float]]:
    """
    Score(V_i) = sum of squared L2 distances to the n - f - 2 nearest other updates.

    Args:
        s: Updates to score
        f: Byzantine bound

    Returns:
        (key, score) pairs in key order
    """
    n = len(s)
    check_krum_bound(n, f)
    keys = s.keys
    distances = _squared_distances(s.matrix())
    n_nearest = n - f - 2

    scores = []
    for i, key in enumerate(keys):
        others = sorted((distances[i, j], keys[j]) for j in range(n) if j != i)
        scores.append((key, float(sum(d for d, _ in others[:n_nearest]))))
    return sorted(scores, key=lambda item: item[0])


def multikrum_select(s: UpdateSet, f: int) -> KrumSelection:
    """Keep the n - f lowest-scoring updates."""
    scores = multikrum_scores(s, f)
    ranked = sorted(scores, key=lambda item: (item[1], item[0]))
    m = len(s) - f
    kept = [key for key, _ in ranked[:m]]
    rejected = sorted(key for key, _ in ranked[m:])
    return KrumSelection(selected=s.subset(kept), rejected=rejected, scores=dict(scores))


def foolsgold_weights(
    history: FgHistory,
    current_round_ids: Sequence[str],
    confidence: float = 1.0,
    current_round: Optional[int] = None,
) -> Dict[str, float]:
    """
    FoolsGold weights from the cosine similarity of accumulated updates.

    Zero-norm accumulators have cosine similarity 0 with everything.
    """
    ids = sorted(set(current_round_ids))
    if not ids:
        return {}
    for client_id in ids:
        history.ensure(client_id)
    if len(ids) == 1:
        return {ids[0]: 1.0}

    accumulated = np.stack([history.accumulated(cid, current_round) for cid in ids])
    n = len(ids)
    cs = cosine_similarity(accumulated)
    np.fill_diagonal(cs, 0.0)
    maxcs = np.max(cs, axis=1)

    # pardoning
    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j] and maxcs[j] > 0:
                cs[i][j] = cs[i][j] * maxcs[i] / maxcs[j]

    wv = np.clip(1.0 - np.max(cs, axis=1), 0.0, 1.0)
    wv[wv < COSINE_TOLERANCE] = 0.0
    if np.max(wv) == 0:
        return {cid: 0.0 for cid in ids}
    wv = wv / np.max(wv)
    wv[wv == 1] = 0.99

    with np.errstate(divide="ignore"):
        wv = confidence * (np.log(wv / (1.0 - wv)) + 0.5)
    wv[np.isinf(wv) & (wv > 0)] = 1.0
    wv = np.clip(wv, 0.0, 1.0)

    weights = {cid: float(w) for cid, w in zip(ids, wv)}
    logger.debug(f"FoolsGold weights: {weights}")
    return weights


def federated_average(
    s: UpdateSet,
    weights: Optional[Dict[str, float]],
    base: ModelParams,
    n_k_cap: Optional[int] = None,
) -> Tuple[ModelParams, Dict[str, float]]:
    """
    Weighted FedAvg step applied on top of the current global model.

    Args:
        s: Selected updates
        weights: client_id -> FoolsGold weight; None means 1 for everyone
        base: Latest global model
        n_k_cap: Optional ceiling on self-reported dataset sizes

    Returns:
        (new global params, normalized weight per update key)
    """
    if len(s) == 0:
        raise MergeAbortedError("no updates selected for averaging")
    if s.fingerprint != base.fingerprint:
        raise RejectedInputError("updates do not belong to the global model spec")

    raw = []
    for u in s:
        n_k = min(u.n_k, n_k_cap) if n_k_cap else u.n_k
        fg = 1.0 if weights is None else weights.get(u.client_id, 0.0)
        raw.append(n_k * fg)
    raw = np.asarray(raw, dtype=np.float64)
    total = raw.sum()
    if total <= 0:
        raise MergeAbortedError("all effective aggregation weights are zero")

    normalized = raw / total
    step = normalized @ s.matrix()
    return ModelParams(base.spec, base.values + step), dict(zip(s.keys, normalized.tolist()))


def model_aggregate(
    s: UpdateSet,
    base: ModelParams,
    defense: DefensePolicy,
    history: Optional[FgHistory] = None,
    current_round: Optional[int] = None,
) -> MergeOutcome:
    """
    Multi-KRUM filters first, FoolsGold re-weights the survivors, FedAvg merges.

    FoolsGold history is updated with every submitted update, rejected ones included.
    When FoolsGold zeroes every survivor the survivors are merged by n_k alone.
    An all-zero weighting yields an aborted outcome carrying `base` unchanged.
    """
    scores: Dict[str, float] = {}
    rejected: List[str] = []
    selected = s
    if defense.use_multikrum:
        selection = multikrum_select(s, defense.f)
        selected, rejected, scores = selection.selected, selection.rejected, selection.scores

    fg_weights: Optional[Dict[str, float]] = None
    if defense.use_foolsgold:
        if history is None:
            raise ConfigurationError("FoolsGold enabled without a history")
        for u in s:
            history.record(u.client_id, u.update, u.round)
        fg_weights = foolsgold_weights(history, s.client_ids, defense.fg_confidence, current_round)

    merge_weights = fg_weights
    fg_fallback = False
    if fg_weights is not None and all(fg_weights.get(u.client_id, 0.0) <= 0.0 for u in selected):
        logger.warning(
            f"FoolsGold zeroed all {len(selected)} surviving updates, merging them by dataset size"
        )
        merge_weights, fg_fallback = None, True

    try:
        params, weights = federated_average(selected, merge_weights, base, defense.n_k_cap)
    except MergeAbortedError as e:
        logger.warning(f"Merge aborted, keeping previous global model: {e}")
        return MergeOutcome(
            params=base, selected=sorted(selected.keys), rejected=rejected,
            scores=scores, fg_weights=fg_weights or {}, fg_fallback=fg_fallback, aborted=True,
        )
    return MergeOutcome(
        params=params, selected=sorted(selected.keys), rejected=rejected,
        scores=scores, fg_weights=fg_weights or {}, weights=weights, fg_fallback=fg_fallback,
    )
