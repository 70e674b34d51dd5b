"""Federated round loop: client selection, local SGD, weighted averaging,
one-vs-rest evaluation, attack injection, and per-period trace reduction.

A full run is a pure function of (configs, seed): every randomized stage
draws from a named substream of the master seed, so re-runs are bit
identical and enabling a defense cannot perturb the attack-side streams.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import data as data_mod
from . import mcd, nn, stealth
from .data import Dataset
from .seeding import DEFENSE, INIT, SELECT, SHADOW, TRAIN, substream
from .vaguegan import (GanConfig, augment_poisongan, generate_poisoned,
                       generate_unsupervised, train_unsupervised, train_vaguegan)

ATTACKS = ("label_flip", "label_flip_augment", "gaussian_light", "gaussian_heavy",
           "sap", "cosine", "vaguegan", "vaguegan_unsupervised")

DEFENSES = ("mcd", "pca_outlier", "cosine_pairs", "angle_deviation", "kmeans2")

# reduced-trace coordinates are normalized to this RMS radius per period
TRACE_RMS_RADIUS = 10.0

# poisoning parameters for the fixed attack recipes
FLIP_SOURCE, FLIP_TARGET = 6, 0
AUGMENT_FRACTION = 0.1
GAUSS_LIGHT_VAR, GAUSS_HEAVY_VAR = 0.1, 0.3
SAP_PIXEL_FRAC, SAP_SALT_RATIO = 0.3, 0.5
COSINE_AMPLITUDE, COSINE_FREQUENCY = 2.0, 0.5


@dataclass
class ClientState:
    id: int
    local_dataset: Dataset
    is_malicious: bool = False
    attack: Optional[str] = None

    def __post_init__(self):
        if (self.attack is not None) != self.is_malicious:
            raise ValueError("attack tag must be present iff client is malicious")
        if self.attack is not None and self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}")


@dataclass(frozen=True)
class FlConfig:
    n_clients: int
    k_selected: int
    rounds: int
    arch: nn.ArchSpec
    seed: int
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    trace_period: int = 80
    # what the trace reduction projects: raw uploaded models, or their
    # deltas against the broadcast global. Deltas remove the shared drift
    # of a still-moving global model, which otherwise dominates short
    # desk-scale periods; at a converged global the two coincide.
    trace_kind: str = "updates"

    def __post_init__(self):
        if not 1 <= self.k_selected <= self.n_clients:
            raise ValueError("need 1 <= K <= N")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.trace_period < 1:
            raise ValueError("trace_period must be >= 1")
        if self.trace_kind not in ("models", "updates"):
            raise ValueError("trace_kind must be 'models' or 'updates'")


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    selected: tuple[int, ...]


@dataclass
class MetricsLog:
    attack_tag: str
    records: list[RoundRecord] = field(default_factory=list)

    def accuracies(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "accuracy", "selected_ids", "attack_tag"])
            for r in self.records:
                w.writerow([r.round, repr(r.accuracy),
                            " ".join(str(c) for c in r.selected), self.attack_tag])


def apply_attack(client: ClientState, gan_cfg: Optional[GanConfig] = None,
                 seed: int = 0) -> ClientState:
    """Poison the client's local dataset according to its attack tag.

    Happens once, before federated training starts. GAN attacks need a
    GanConfig (its seed should already be client-specific).
    """
    if not client.is_malicious or client.attack is None:
        raise ValueError("apply_attack requires a malicious client with an attack tag")
    ds = client.local_dataset
    kind = client.attack
    if kind in ("label_flip", "label_flip_augment"):
        if ds.num_classes <= max(FLIP_SOURCE, FLIP_TARGET):
            raise ValueError(
                f"label flip {FLIP_SOURCE}->{FLIP_TARGET} needs at least "
                f"{max(FLIP_SOURCE, FLIP_TARGET) + 1} classes")
        if kind == "label_flip_augment":
            ds = augment_poisongan(ds, AUGMENT_FRACTION, seed)
        poisoned = data_mod.flip_labels(ds, FLIP_SOURCE, FLIP_TARGET)
    elif kind == "gaussian_light":
        poisoned = data_mod.add_gaussian_noise(ds, 0.0, GAUSS_LIGHT_VAR, seed)
    elif kind == "gaussian_heavy":
        poisoned = data_mod.add_gaussian_noise(ds, 0.0, GAUSS_HEAVY_VAR, seed)
    elif kind == "sap":
        poisoned = data_mod.add_sap_noise(ds, SAP_PIXEL_FRAC, SAP_SALT_RATIO, seed)
    elif kind == "cosine":
        poisoned = data_mod.add_cosine_noise(ds, COSINE_AMPLITUDE, COSINE_FREQUENCY)
    elif kind == "vaguegan":
        if gan_cfg is None:
            raise ValueError("vaguegan attack needs a GanConfig")
        gan = train_vaguegan(ds, gan_cfg)
        poisoned = generate_poisoned(gan, ds)
    elif kind == "vaguegan_unsupervised":
        if gan_cfg is None or gan_cfg.code_spec is None:
            raise ValueError("unsupervised vaguegan needs a GanConfig with code_spec")
        gan = train_unsupervised(ds, gan_cfg)
        poisoned = generate_unsupervised(gan, ds)
    else:
        raise ValueError(f"unknown attack {kind!r}")
    return replace(client, local_dataset=poisoned)


def select_clients(n: int, k: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement, returned sorted."""
    if not 1 <= k <= n:
        raise ValueError("need 1 <= K <= N")
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def _select_from(pool: list[int], k: int, rng: np.random.Generator) -> list[int]:
    idx = select_clients(len(pool), min(k, len(pool)), rng)
    return [pool[i] for i in idx]


def local_train(global_pv: nn.ParamVector, ds: Dataset, epochs: int,
                lr: float, momentum: float, batch_size: int,
                rng: np.random.Generator) -> nn.ParamVector:
    """Mini-batch SGD from the broadcast model; the global model is unchanged."""
    if ds.feature_dim != global_pv.arch.input_dim:
        raise nn.ShapeError("dataset dimension does not match model architecture")
    pv = global_pv
    state = nn.OptimizerState.sgd(lr, momentum=momentum)
    for _ in range(epochs):
        perm = rng.permutation(ds.n)
        for start in range(0, ds.n, batch_size):
            idx = perm[start:start + batch_size]
            pv, _ = nn.train_batch(pv, state, ds.features[idx], ds.labels[idx],
                                   "cross_entropy")
    return pv


def aggregate(models: list[nn.ParamVector], weights=None) -> nn.ParamVector:
    """Elementwise weighted mean; weights default to uniform."""
    if not models:
        raise ValueError("nothing to aggregate")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch != arch:
            raise nn.ShapeError("cannot aggregate models with different architectures")
    if weights is None:
        weights = np.ones(len(models))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(models),) or np.any(weights < 0) or weights.sum() == 0:
        raise ValueError("weights must be nonnegative and not all zero")
    stacked = np.stack([m.values for m in models])
    return models[0].with_values((weights / weights.sum()) @ stacked)


def accuracy_one_vs_rest(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Pool per-class binary confusion counts over all classes:
    sum(TP_i + TN_i) / sum(TP_i + TN_i + FP_i + FN_i)."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("preds and labels must be matching 1-D arrays")
    correct_total = 0
    grand_total = 0
    for c in range(num_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        tn = int(np.sum((preds != c) & (labels != c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        correct_total += tp + tn
        grand_total += tp + tn + fp + fn
    return correct_total / grand_total


def evaluate(model: nn.ParamVector, test: Dataset) -> float:
    """One-vs-rest accuracy of argmax predictions on the test set."""
    if test.n == 0:
        raise ValueError("test set is empty")
    if model.arch.output_dim != test.num_classes:
        raise nn.ShapeError("model output dimension does not match class count")
    preds = nn.forward(model, test.features, train=False).argmax(axis=1)
    return accuracy_one_vs_rest(preds, test.labels, test.num_classes)


@dataclass
class RunResult:
    metrics: MetricsLog
    traces: mcd.ModelTraceStore
    reports: list[dict]
    final_model: nn.ParamVector
    excluded: list[int]


def _run_defense(kind: str, params: dict, store: mcd.ModelTraceStore, period: int,
                 mean_updates: dict[int, np.ndarray],
                 rng: np.random.Generator) -> tuple[list[int], dict]:
    """Dispatch one period-end defense pass; returns (flagged ids, report)."""
    if kind == "mcd":
        cfg = mcd.McdConfig(t_prime=store.t_prime, **params)
        report = mcd.detect_from_store(store, cfg, period)
        return list(report.flagged), report.to_dict()
    traces = store.traces(period)
    mean_points = {}
    for cid, trace in traces.items():
        if cid == mcd.ModelTraceStore.SHADOW_ID:
            continue
        pair = mcd.metric_pair(trace)
        if pair is not None:
            mean_points[cid] = pair.centroid
    if kind == "pca_outlier":
        flagged = mcd.pca_outlier_defense(mean_points, **params)
    elif kind == "kmeans2":
        flagged = mcd.kmeans2_defense(mean_points, rng)
    elif kind == "cosine_pairs":
        flagged = mcd.cosine_pairs_defense(mean_updates)
    elif kind == "angle_deviation":
        flagged = mcd.angle_deviation_defense(mean_updates)
    else:
        raise ValueError(f"unknown defense {kind!r}")
    return list(flagged), {"period": period, "defense": kind,
                           "flagged": sorted(int(c) for c in flagged)}


def run_federated(fl_cfg: FlConfig, clients: list[ClientState], test: Dataset,
                  server_shard: Optional[Dataset] = None,
                  defense: Optional[str] = None,
                  defense_params: Optional[dict] = None,
                  attack_tag: str = "none") -> RunResult:
    """Run the full round loop.

    Per round: broadcast the global model, select K of the trusted pool,
    train them locally, aggregate by shard size, evaluate. Uploads are
    buffered per defense period, reduced to 2-D jointly, and stored with
    None markers for unselected rounds. A shadow model is trained on the
    server shard every round (never aggregated) and its reduced trace serves
    as the fully trusted reference. Defenses run at complete period ends and
    exclude flagged clients from later selection and aggregation.
    """
    if len(clients) != fl_cfg.n_clients:
        raise ValueError("client list does not match configured count")
    if defense is not None and defense not in DEFENSES:
        raise ValueError(f"unknown defense {defense!r}")
    if defense == "mcd" and server_shard is None:
        raise ValueError("mcd needs a server shard for the shadow client")
    if server_shard is not None and server_shard.n == 0:
        raise ValueError("server shard is empty")
    defense_params = dict(defense_params or {})
    by_id = {c.id: c for c in clients}
    if sorted(by_id) != list(range(fl_cfg.n_clients)):
        raise ValueError("client ids must be 0..N-1")

    seed = fl_cfg.seed
    global_pv = nn.init_params(fl_cfg.arch, substream(seed, INIT))
    store = mcd.ModelTraceStore(fl_cfg.trace_period)
    log = MetricsLog(attack_tag=attack_tag)
    reports: list[dict] = []
    pool = list(range(fl_cfg.n_clients))
    excluded: list[int] = []

    period_rows: list[tuple[int, int, np.ndarray]] = []
    shadow_rows: list[tuple[int, np.ndarray]] = []
    update_sums: dict[int, np.ndarray] = {}
    update_counts: dict[int, int] = {}

    def reduce_period(period: int) -> bool:
        """Project the buffered uploads (and shadow rows) jointly and fill
        the trace store. Coordinates are rescaled to a fixed RMS radius so
        footprints and centroid deviations live on a stable scale across
        periods and dataset sizes (the abnormality weights assume it)."""
        if len(period_rows) + len(shadow_rows) < 3:
            return False
        X = np.vstack([row[2] for row in period_rows]
                      + [row[1] for row in shadow_rows])
        reduced = stealth.pca_2d(X)
        coords = reduced.coords
        rms = np.sqrt((coords ** 2).sum(axis=1).mean())
        if rms > 0:
            coords = coords * (TRACE_RMS_RADIUS / rms)
        for (t, cid, _), pt in zip(period_rows, coords[:len(period_rows)]):
            store.record(t, cid, pt)
        for cid in pool:
            store.ensure(period, cid)
        for (t, _), pt in zip(shadow_rows, coords[len(period_rows):]):
            store.record(t, mcd.ModelTraceStore.SHADOW_ID, pt)
        return True

    for t in range(fl_cfg.rounds):
        period = t // fl_cfg.trace_period
        selected = _select_from(pool, fl_cfg.k_selected, substream(seed, SELECT, t))
        locals_: dict[int, nn.ParamVector] = {}
        for cid in selected:
            locals_[cid] = local_train(
                global_pv, by_id[cid].local_dataset, fl_cfg.local_epochs,
                fl_cfg.lr, fl_cfg.momentum, fl_cfg.batch_size,
                substream(seed, TRAIN, t, cid))
            delta = locals_[cid].values - global_pv.values
            traced = locals_[cid].values if fl_cfg.trace_kind == "models" else delta
            period_rows.append((t, cid, traced))
            if cid in update_sums:
                update_sums[cid] += delta
                update_counts[cid] += 1
            else:
                update_sums[cid] = delta.copy()
                update_counts[cid] = 1
        if server_shard is not None:
            shadow = local_train(global_pv, server_shard, fl_cfg.local_epochs,
                                 fl_cfg.lr, fl_cfg.momentum, fl_cfg.batch_size,
                                 substream(seed, SHADOW, t))
            shadow_rows.append((t, shadow.values if fl_cfg.trace_kind == "models"
                                else shadow.values - global_pv.values))
        global_pv = aggregate([locals_[cid] for cid in selected],
                              [by_id[cid].local_dataset.n for cid in selected])
        log.records.append(RoundRecord(round=t, accuracy=evaluate(global_pv, test),
                                       selected=tuple(selected)))

        if (t + 1) % fl_cfg.trace_period == 0:
            reduced_ok = reduce_period(period)
            if defense is not None and reduced_ok:
                mean_updates = {cid: update_sums[cid] / update_counts[cid]
                                for cid in update_sums}
                flagged, report = _run_defense(defense, defense_params, store, period,
                                               mean_updates, substream(seed, DEFENSE, period))
                reports.append(report)
                for cid in flagged:
                    if cid in pool:
                        pool.remove(cid)
                        excluded.append(cid)
                    store.drop_client(period, cid)
            period_rows.clear()
            shadow_rows.clear()
            update_sums.clear()
            update_counts.clear()

    if period_rows:
        reduce_period((fl_cfg.rounds - 1) // fl_cfg.trace_period)

    return RunResult(metrics=log, traces=store, reports=reports,
                     final_model=global_pv, excluded=excluded)
