"""Model-consistency defense and simplified baseline defenses.

The defense watches each client's uploaded models over a fixed period of
rounds, reduced to 2-D. Two statistics summarize a client: the centroid of
its reduced models and the footprint (mean distance to that centroid).
GAN-poisoned clients keep re-training on the same generated shard, so their
models cluster unusually tightly: centroids look normal but footprints
shrink. Abnormality combines both deviations against baseline values from a
neighborhood of a fully trusted reference client; clients above a
median-scaled threshold are flagged.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class DefenseConfigError(ValueError):
    """Invalid defense configuration or degenerate baseline."""


@dataclass(frozen=True)
class McdConfig:
    lambda1: float = 1.0
    lambda2: float = 2.0
    omega1: float = 4.0
    omega2: float = 2.0
    delta: float = 2.0
    t_prime: int = 80

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "omega1", "omega2"):
            if getattr(self, name) <= 0:
                raise DefenseConfigError(f"{name} must be positive")
        if not 1.0 < self.delta < 3.0:
            raise DefenseConfigError("delta must lie in (1, 3)")
        if self.t_prime < 1:
            raise DefenseConfigError("t_prime must be >= 1")


@dataclass(frozen=True)
class MetricPair:
    """Centroid and footprint of one client's reduced models in a period."""

    centroid: np.ndarray
    footprint: float
    sample_count: int

    def __post_init__(self):
        c = np.asarray(self.centroid, dtype=np.float64).reshape(2)
        object.__setattr__(self, "centroid", c)
        if self.footprint < 0:
            raise ValueError("footprint must be >= 0")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


@dataclass
class DetectionReport:
    period: int
    h: dict[int, float]
    h_median: float
    h_threshold: float
    flagged: list[int]
    surviving: list[int]
    baseline_ids: list[int]
    fallback_first_baseline: bool = False
    skipped: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "period": self.period,
            "h": {str(k): v for k, v in sorted(self.h.items())},
            "h_median": self.h_median,
            "h_threshold": self.h_threshold,
            "flagged": sorted(self.flagged),
            "surviving": sorted(self.surviving),
            "baseline_ids": sorted(self.baseline_ids),
            "fallback_first_baseline": self.fallback_first_baseline,
            "skipped": sorted(self.skipped),
        }


class ModelTraceStore:
    """Per-period, per-client sequences of 2-D reduced models.

    Entries are None for rounds in which the client was not selected. The
    shadow (fully trusted) trace is stored under client id -1.
    """

    SHADOW_ID = -1

    def __init__(self, t_prime: int):
        if t_prime < 1:
            raise ValueError("t_prime must be >= 1")
        self.t_prime = int(t_prime)
        self.periods: dict[int, dict[int, list[Optional[np.ndarray]]]] = {}

    def period_of(self, round_idx: int) -> int:
        return round_idx // self.t_prime

    def ensure(self, period: int, client_id: int) -> list:
        per = self.periods.setdefault(period, {})
        if client_id not in per:
            per[client_id] = [None] * self.t_prime
        return per[client_id]

    def record(self, round_idx: int, client_id: int, point) -> None:
        period = self.period_of(round_idx)
        slot = round_idx - period * self.t_prime
        trace = self.ensure(period, client_id)
        trace[slot] = np.asarray(point, dtype=np.float64).reshape(2)

    def traces(self, period: int) -> dict[int, list[Optional[np.ndarray]]]:
        return self.periods.get(period, {})

    def drop_client(self, period: int, client_id: int) -> None:
        self.periods.get(period, {}).pop(client_id, None)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["period", "client", "round", "x", "y", "null_flag"])
            for period in sorted(self.periods):
                for cid in sorted(self.periods[period]):
                    trace = self.periods[period][cid]
                    for slot, pt in enumerate(trace):
                        rnd = period * self.t_prime + slot
                        if pt is None:
                            w.writerow([period, cid, rnd, "", "", 1])
                        else:
                            w.writerow([period, cid, rnd,
                                        repr(float(pt[0])), repr(float(pt[1])), 0])

    @classmethod
    def from_csv(cls, path, t_prime: Optional[int] = None) -> "ModelTraceStore":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append(row)
        if not rows:
            raise ValueError("trace csv is empty")
        if t_prime is None:
            # rounds belonging to period 1 start exactly at t_prime
            later = [int(r["round"]) for r in rows if int(r["period"]) == 1]
            t_prime = min(later) if later else max(int(r["round"]) for r in rows) + 1
        store = cls(t_prime)
        for r in rows:
            if int(r["null_flag"]):
                store.ensure(int(r["period"]), int(r["client"]))
            else:
                store.record(int(r["round"]), int(r["client"]),
                             (float(r["x"]), float(r["y"])))
        return store


def metric_pair(trace) -> Optional[MetricPair]:
    """Centroid and footprint over the non-null entries; None if all null."""
    pts = [np.asarray(p, dtype=np.float64) for p in trace if p is not None]
    if not pts:
        return None
    pts = np.vstack(pts)
    centroid = pts.mean(axis=0)
    footprint = float(np.linalg.norm(pts - centroid, axis=1).mean())
    return MetricPair(centroid=centroid, footprint=footprint, sample_count=len(pts))


def select_baseline_set(pairs: dict[int, MetricPair], first_baseline: MetricPair,
                        omega1: float, omega2: float) -> set[int]:
    """Clients whose metrics fall in the (omega1, omega2)-neighborhood of the
    fully trusted reference pair (strict inequalities)."""
    d_hat = first_baseline.footprint
    if d_hat <= 0:
        raise DefenseConfigError("first baseline footprint must be positive")
    out = set()
    for cid, pair in pairs.items():
        centroid_ok = np.linalg.norm(pair.centroid - first_baseline.centroid) / d_hat < omega1
        footprint_ok = abs(pair.footprint - d_hat) / d_hat < omega2
        if centroid_ok and footprint_ok:
            out.add(cid)
    return out


def baseline_values(selected: list[MetricPair]) -> tuple[np.ndarray, float]:
    """Componentwise mean centroid and mean footprint of the baseline set."""
    if not selected:
        raise ValueError("baseline set is empty")
    centroid = np.mean([p.centroid for p in selected], axis=0)
    footprint = float(np.mean([p.footprint for p in selected]))
    return centroid, footprint


def abnormality(pair: MetricPair, theta_base: np.ndarray, d_base: float,
                lambda1: float, lambda2: float) -> float:
    """lambda1 * (centroid deviation / d_base) + lambda2 * |footprint deviation|."""
    if d_base <= 0:
        raise DefenseConfigError("d_base must be positive")
    term1 = np.linalg.norm(pair.centroid - np.asarray(theta_base)) / d_base
    term2 = abs(d_base - pair.footprint)
    return float(lambda1 * term1 + lambda2 * term2)


def detect(pairs: dict[int, MetricPair], config: McdConfig,
           first_baseline: MetricPair, period: int = 0,
           first_baseline_id: Optional[int] = None,
           skipped: Optional[list[int]] = None) -> DetectionReport:
    """One defense-period pass: baseline selection, abnormality scoring, and
    median-scaled thresholding. The first baseline is always part of the
    baseline average and is never flagged.
    """
    if len(pairs) < 3:
        raise DefenseConfigError("need at least 3 clients with usable traces")
    if first_baseline.footprint <= 0:
        raise DefenseConfigError("first baseline footprint must be positive")
    base_ids = select_baseline_set(pairs, first_baseline, config.omega1, config.omega2)
    fallback = False
    selected = [pairs[i] for i in sorted(base_ids)]
    if first_baseline_id is None or first_baseline_id not in base_ids:
        selected = [first_baseline] + selected
    if not base_ids:
        fallback = True  # neighborhood empty: reference pair alone
    theta_base, d_base = baseline_values(selected)
    if d_base <= 0:
        raise DefenseConfigError("degenerate baseline footprint")
    h = {cid: abnormality(pair, theta_base, d_base, config.lambda1, config.lambda2)
         for cid, pair in pairs.items()}
    h_med = float(np.median(list(h.values())))
    h_thr = config.delta * h_med
    flagged = sorted(cid for cid, val in h.items()
                     if val > h_thr and cid != first_baseline_id)
    surviving = sorted(set(pairs) - set(flagged))
    return DetectionReport(period=period, h=h, h_median=h_med, h_threshold=h_thr,
                           flagged=flagged, surviving=surviving,
                           baseline_ids=sorted(base_ids),
                           fallback_first_baseline=fallback,
                           skipped=sorted(skipped or []))


def detect_from_store(store: ModelTraceStore, config: McdConfig, period: int,
                      first_baseline_id: int = ModelTraceStore.SHADOW_ID) -> DetectionReport:
    """Run detection on a stored period, using the given client id (default:
    the shadow trace) as the fully trusted reference."""
    traces = store.traces(period)
    if first_baseline_id not in traces:
        raise DefenseConfigError(f"no trace for first baseline client {first_baseline_id}")
    first = metric_pair(traces[first_baseline_id])
    if first is None:
        raise DefenseConfigError("first baseline trace is all null")
    pairs = {}
    skipped = []
    for cid, trace in traces.items():
        if cid == ModelTraceStore.SHADOW_ID:
            continue
        pair = metric_pair(trace)
        if pair is None:
            skipped.append(cid)  # no evidence: never flagged
        else:
            pairs[cid] = pair
    fb_id = first_baseline_id if first_baseline_id != ModelTraceStore.SHADOW_ID else None
    return detect(pairs, config, first, period=period,
                  first_baseline_id=fb_id, skipped=skipped)


def write_reports_json(path, reports: list[DetectionReport]) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)


# --- simplified baseline defenses ---------------------------------------


def _mad(values: np.ndarray) -> float:
    med = np.median(values)
    return float(np.median(np.abs(values - med)))


def pca_outlier_defense(mean_points: dict[int, np.ndarray],
                        z_thresh: float = 3.5) -> list[int]:
    """Flag clients whose per-client mean 2-D point is a robust outlier
    (|x - median| / MAD above z_thresh) in either coordinate."""
    if len(mean_points) < 3:
        raise DefenseConfigError("need at least 3 clients")
    ids = sorted(mean_points)
    pts = np.vstack([mean_points[i] for i in ids])
    flagged = np.zeros(len(ids), dtype=bool)
    for dim in range(2):
        col = pts[:, dim]
        dev = np.abs(col - np.median(col))
        mad = _mad(col)
        if mad == 0.0:
            # a coordinate with zero MAD gives any deviant infinite z;
            # with every value identical nothing is flagged
            flagged |= dev > 0.0
        else:
            flagged |= dev / mad > z_thresh
    return [ids[i] for i in np.flatnonzero(flagged)]


def _pairwise_cosines(vectors: dict[int, np.ndarray]) -> tuple[list[int], np.ndarray]:
    ids = sorted(vectors)
    mat = np.vstack([np.asarray(vectors[i], dtype=np.float64).ravel() for i in ids])
    norms = np.linalg.norm(mat, axis=1)
    live = norms > 0
    if not np.all(live):
        import logging
        logging.getLogger(__name__).warning(
            "excluding zero-norm update vectors for clients %s",
            [ids[i] for i in np.flatnonzero(~live)])
    ids = [i for i, ok in zip(ids, live) if ok]
    mat = mat[live]
    norms = norms[live]
    unit = mat / norms[:, None]
    return ids, unit @ unit.T


def cosine_pairs_defense(vectors: dict[int, np.ndarray]) -> list[int]:
    """Flag clients whose mean pairwise cosine similarity to the others falls
    below median - 3*MAD. Zero-norm vectors are excluded from the pairs."""
    if len(vectors) < 3:
        raise DefenseConfigError("need at least 3 clients")
    ids, sims = _pairwise_cosines(vectors)
    if len(ids) < 3:
        return []
    n = len(ids)
    mean_sim = (sims.sum(axis=1) - 1.0) / (n - 1)
    cut = np.median(mean_sim) - 3.0 * _mad(mean_sim)
    return [ids[i] for i in np.flatnonzero(mean_sim < cut)]


def angle_deviation_defense(vectors: dict[int, np.ndarray]) -> list[int]:
    """Same scheme on angles: flag mean pairwise angle above median + 3*MAD."""
    if len(vectors) < 3:
        raise DefenseConfigError("need at least 3 clients")
    ids, sims = _pairwise_cosines(vectors)
    if len(ids) < 3:
        return []
    angles = np.arccos(np.clip(sims, -1.0, 1.0))
    n = len(ids)
    mean_angle = angles.sum(axis=1) / (n - 1)
    cut = np.median(mean_angle) + 3.0 * _mad(mean_angle)
    return [ids[i] for i in np.flatnonzero(mean_angle > cut)]


def kmeans2_defense(mean_points: dict[int, np.ndarray],
                    rng: np.random.Generator) -> list[int]:
    """2-means on per-client mean points with farthest-point init.

    The smaller cluster is flagged only when it holds at most 40% of the
    clients and the centroids sit clearly apart (distance above twice the
    pooled mean within-cluster distance); otherwise nobody is flagged.
    """
    if len(mean_points) < 3:
        raise DefenseConfigError("need at least 3 clients")
    ids = sorted(mean_points)
    pts = np.vstack([mean_points[i] for i in ids])
    first = int(rng.integers(len(ids)))
    second = int(np.argmax(np.linalg.norm(pts - pts[first], axis=1)))
    centers = pts[[first, second]].astype(np.float64)
    assign = None
    for _ in range(100):
        dists = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2)
        new_assign = dists.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(2):
            if np.any(assign == c):
                centers[c] = pts[assign == c].mean(axis=0)
    sizes = np.bincount(assign, minlength=2)
    if sizes.min() == 0:
        return []
    minority = int(np.argmin(sizes))
    # pooled within-cluster mean distance: size-weighted mean of each
    # cluster's mean pairwise distance (distance-to-centroid collapses for
    # the tiny clusters the farthest-point init likes to isolate)
    vals, weights = [], []
    for c in range(2):
        sub = pts[assign == c]
        if len(sub) > 1:
            dd = np.linalg.norm(sub[:, None, :] - sub[None, :, :], axis=2)
            vals.append(dd[np.triu_indices(len(sub), 1)].mean())
            weights.append(len(sub))
    if not vals:
        return []
    within = float(np.average(vals, weights=weights))
    separation = float(np.linalg.norm(centers[0] - centers[1]))
    if sizes[minority] <= 0.4 * len(ids) and separation > 2.0 * within:
        return [ids[i] for i in np.flatnonzero(assign == minority)]
    return []
