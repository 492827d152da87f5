"""Composition monitoring: infer per-class sample counts from weight deltas.

The monitor never touches client data. Once per round it feeds a small
auxiliary set, class by class, to the previous global model and records
the last-layer link-weight update each class would cause. Comparing those
per-class signatures against the actually observed global weight change
(plus the selected clients' total sample count) yields a linear equation
per link weight whose solution is the class's sample count that round.

Sign conventions: feeding class p pushes weight row p up and every other
class pushes it down, so the own/other update ratio on a row-p weight is
negative for a healthy model. The ratio is kept signed where it enters
the count algebra (the equation needs the true other-class mean update)
and used by absolute value where only relative magnitude matters (the
weight filter and the loss-scaling vector).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset, cosine_similarity
from .errors import ConfigError
from .federation import RoundDelta
from .losses import RatioVector

DENOM_EPS = 1e-12

DECISION_NO_ACTION = "no_action"
DECISION_LOAD_RATIO_LOSS = "load_ratio_loss"

STATUS_QUIET = "quiet"
STATUS_ALERTED = "alerted"


@dataclass
class MonitorConfig:
    ratio_filter_threshold: float = 1.25  # T_Ra
    detection_window: int = 3  # consecutive similar imbalanced rounds
    similarity_threshold: float = 0.95
    imbalance_threshold: float = 5.0  # max/min estimate ratio that counts as imbalanced
    # a weight whose own-class probe update is below this fraction of the
    # class's strongest one carries almost no signal and is dropped by the
    # count estimator even when its ratio clears the filter
    magnitude_floor: float = 0.05

    def __post_init__(self) -> None:
        if self.detection_window < 1:
            raise ConfigError("detection_window must be >= 1")
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ConfigError("similarity_threshold must be in [-1, 1]")
        if self.imbalance_threshold < 1.0:
            raise ConfigError("imbalance_threshold must be >= 1")
        if not 0.0 <= self.magnitude_floor < 1.0:
            raise ConfigError("magnitude_floor must be in [0, 1)")


@dataclass
class AuxiliaryData:
    """Small class-complete probe set, disjoint from all client shards."""

    features_by_class: list[np.ndarray]
    provenance: str = ""
    source_indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.features_by_class:
            raise ConfigError("auxiliary data must cover at least one class")
        for c, feats in enumerate(self.features_by_class):
            if feats.ndim != 2 or feats.shape[0] < 1:
                raise ConfigError(f"auxiliary data for class {c} must be a non-empty matrix")

    @property
    def class_count(self) -> int:
        return len(self.features_by_class)

    @property
    def counts(self) -> np.ndarray:
        return np.array([f.shape[0] for f in self.features_by_class], dtype=np.int64)

    @classmethod
    def from_dataset(
        cls, dataset: Dataset, indices: np.ndarray, provenance: str = ""
    ) -> "AuxiliaryData":
        indices = np.asarray(indices, dtype=np.int64)
        by_class = []
        for c in range(dataset.class_count):
            sel = indices[dataset.labels[indices] == c]
            if sel.size == 0:
                raise ConfigError(f"auxiliary data is missing class {c}")
            by_class.append(dataset.features[sel])
        return cls(by_class, provenance, indices)


@dataclass
class ProbeResult:
    """Per class p, the last-layer weight update its probe step would cause."""

    deltas: list[np.ndarray]  # Q matrices of shape (Q, s)

    @property
    def class_count(self) -> int:
        return len(self.deltas)


@dataclass
class CompositionEstimate:
    round_index: int
    counts: np.ndarray  # (Q,) estimated per-class sample counts, >= 0
    contributing: np.ndarray  # (Q,) surviving weights that fed each estimate
    low_confidence: np.ndarray  # (Q,) True where the uniform fallback was used
    clamped: np.ndarray  # (Q,) True where a negative solution was clamped to 0
    cs_vs_truth: float | None = None


@dataclass
class DetectionState:
    window: int = 3
    similarity_threshold: float = 0.95
    imbalance_threshold: float = 5.0
    consecutive_hits: int = 0
    status: str = STATUS_QUIET
    last_imbalanced: np.ndarray | None = None
    history: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_config(cls, cfg: MonitorConfig) -> "DetectionState":
        return cls(
            window=cfg.detection_window,
            similarity_threshold=cfg.similarity_threshold,
            imbalance_threshold=cfg.imbalance_threshold,
        )


def probe(
    g_t: nn.MlpModel,
    aux: AuxiliaryData,
    learning_rate: float,
    batch_size: int = 32,
) -> ProbeResult:
    """One averaged cross-entropy gradient step per class, model untouched.

    For class p the recorded update is -(lr / n_a^p) * sum of the
    last-layer gradients of its auxiliary samples. Samples are evaluated
    in chunks of ``batch_size``; by linearity the chunking cannot change
    the result.
    """
    if aux.class_count != g_t.class_count:
        raise ConfigError(
            f"auxiliary data covers {aux.class_count} classes, model has {g_t.class_count}"
        )
    deltas = []
    for p, feats in enumerate(aux.features_by_class):
        acc = np.zeros((g_t.class_count, g_t.hidden_width))
        for start in range(0, feats.shape[0], batch_size):
            chunk = feats[start : start + batch_size]
            trace = nn.forward(g_t, chunk)
            acc += nn.last_layer_gradient(trace, p) * chunk.shape[0]
        deltas.append(-(learning_rate / feats.shape[0]) * acc)
    return ProbeResult(deltas)


def ratio_matrix(probe_result: ProbeResult) -> np.ndarray:
    """Own-vs-other update ratio for every weight of every output node.

    Entry (p, i) is (Q-1) times class p's own update of weight (p, i)
    divided by the summed updates the other classes cause there, i.e. the
    own update over the mean other-class update. Entries whose
    denominator is numerically zero are returned as NaN and excluded
    downstream.
    """
    q = probe_result.class_count
    if q < 2:
        raise ValueError("ratio needs at least two classes")
    own = np.stack([probe_result.deltas[p][p, :] for p in range(q)])  # (Q, s)
    # stacked[j] is the full update matrix from feeding class j; summing
    # over j and removing the own-class term leaves the other-class total
    stacked = np.stack(probe_result.deltas)  # (Q, Q, s)
    others = stacked.sum(axis=0) - own  # (Q, s)
    ra = np.full_like(own, np.nan)
    valid = np.abs(others) >= DENOM_EPS
    ra[valid] = (q - 1) * own[valid] / others[valid]
    return ra


def filter_weights(ra: np.ndarray, threshold: float) -> list[np.ndarray]:
    """Per class, the ascending indices whose |ratio| clears the threshold."""
    out = []
    for p in range(ra.shape[0]):
        row = ra[p]
        keep = np.isfinite(row) & (np.abs(row) > threshold)
        out.append(np.flatnonzero(keep))
    return out


def solve_count(
    own_delta: float,
    ratio: float,
    sum_total_samples: float,
    aux_count: int,
    clients_selected: int,
    observed_delta: float,
) -> float:
    """Invert the per-weight accumulation equation for the class count.

    Solves  A * N + (T - N) * A / r = n_a * K * d  for N, where A is the
    probe's own-class update of the weight, r the own/other ratio there,
    T the selected clients' total sample count, and d the observed global
    change of that weight.
    """
    coeff = own_delta * (1.0 - 1.0 / ratio)
    if abs(coeff) < DENOM_EPS:
        raise ZeroDivisionError("degenerate coefficient")
    rhs = aux_count * clients_selected * observed_delta
    return (rhs - sum_total_samples * own_delta / ratio) / coeff


def estimate_counts(
    probe_result: ProbeResult,
    ra: np.ndarray,
    surviving: list[np.ndarray],
    round_delta: RoundDelta,
    aux: AuxiliaryData,
    learning_rate: float,
    cfg: MonitorConfig,
) -> CompositionEstimate:
    """Solve the accumulation equation per surviving weight and average.

    Both the probe deltas and the observed global delta are divided by
    the learning rate first, which cancels exactly and keeps the
    degenerate-coefficient cutoff scale-free. Negative solutions are
    clamped to zero; a class whose surviving set is empty falls back to
    total/Q and is flagged low-confidence.
    """
    if learning_rate <= 0:
        raise ConfigError("learning_rate must be > 0")
    q = probe_result.class_count
    t_total = float(round_delta.sum_total_samples)
    k = round_delta.clients_selected
    observed = round_delta.last_layer_delta / learning_rate
    aux_counts = aux.counts

    counts = np.zeros(q)
    contributing = np.zeros(q, dtype=np.int64)
    low_confidence = np.zeros(q, dtype=bool)
    clamped = np.zeros(q, dtype=bool)
    for p in range(q):
        own_row = np.abs(probe_result.deltas[p][p, :]) / learning_rate
        floor = cfg.magnitude_floor * own_row.max()
        solutions = []
        for i in surviving[p]:
            a = probe_result.deltas[p][p, i] / learning_rate
            r = ra[p, i]
            if not np.isfinite(r) or abs(a) < floor:
                continue
            try:
                n_hat = solve_count(a, r, t_total, int(aux_counts[p]), k, observed[p, i])
            except ZeroDivisionError:
                continue
            if n_hat < 0.0:
                clamped[p] = True
                n_hat = 0.0
            solutions.append(n_hat)
        if solutions:
            counts[p] = float(np.mean(solutions))
            contributing[p] = len(solutions)
        else:
            counts[p] = t_total / q
            low_confidence[p] = True
    return CompositionEstimate(
        round_index=round_delta.round_index,
        counts=counts,
        contributing=contributing,
        low_confidence=low_confidence,
        clamped=clamped,
    )


def update_detection(
    state: DetectionState, estimate: CompositionEstimate
) -> tuple[DetectionState, str]:
    """Advance the alarm state machine with this round's estimate.

    The hit counter grows only while the estimate is imbalanced (max/min
    at or above the threshold) and cosine-similar to the previous
    imbalanced estimate; any other shape resets it. Once the counter
    fills the window, the ratio-scaled loss is requested.
    """
    v = estimate.counts
    smallest = v.min()
    ratio = np.inf if smallest <= 0 else float(v.max() / smallest)
    imbalanced = ratio >= state.imbalance_threshold and v.max() > 0

    new = DetectionState(
        window=state.window,
        similarity_threshold=state.similarity_threshold,
        imbalance_threshold=state.imbalance_threshold,
        status=state.status,
        history=[*state.history[-(state.window - 1) :], v.copy()]
        if state.window > 1
        else [v.copy()],
    )
    if not imbalanced:
        new.consecutive_hits = 0
        new.last_imbalanced = None
        return new, DECISION_NO_ACTION

    if state.last_imbalanced is None:
        new.consecutive_hits = 1
    elif cosine_similarity(v, state.last_imbalanced) >= state.similarity_threshold:
        new.consecutive_hits = state.consecutive_hits + 1
    else:
        new.consecutive_hits = 1
    new.last_imbalanced = v.copy()

    if new.consecutive_hits >= state.window:
        new.status = STATUS_ALERTED
        return new, DECISION_LOAD_RATIO_LOSS
    return new, DECISION_NO_ACTION


def ratio_vector_from(ra: np.ndarray, round_index: int = 0) -> RatioVector:
    """Absolute per-class mean of the valid ratio entries.

    A class whose row has no valid entry gets the neutral value 1.
    """
    q = ra.shape[0]
    values = np.ones(q)
    for p in range(q):
        row = ra[p][np.isfinite(ra[p])]
        if row.size:
            values[p] = abs(float(row.mean()))
    return RatioVector(values, round_updated=round_index)


@dataclass
class HlClassStats:
    class_index: int
    mean_pairwise_cs: float
    dot_coefficient_of_variation: float
    pairs: int


def hl_similarity_diagnostic(
    model: nn.MlpModel, dataset: Dataset, batch_size: int = 32
) -> list[HlClassStats]:
    """Within-class concentration of the hidden output feeding the last layer.

    For every class, all pairs inside consecutive batches contribute one
    cosine similarity and one dot product; reported are the mean cosine
    similarity and the coefficient of variation (std over mean) of the
    dot products. Values near 1 and 0 respectively mean the class's
    hidden outputs are nearly interchangeable, which is what makes the
    per-class probe signatures representative.
    """
    stats = []
    for c, idx in enumerate(dataset.indices_by_class()):
        if idx.size == 0:
            continue
        cs_values: list[float] = []
        dots: list[float] = []
        for start in range(0, idx.size, batch_size):
            chunk = dataset.features[idx[start : start + batch_size]]
            if chunk.shape[0] < 2:
                continue
            y = nn.forward(model, chunk).hl_output
            gram = y @ y.T
            norms = np.sqrt(np.diag(gram))
            iu = np.triu_indices(chunk.shape[0], k=1)
            denom = norms[iu[0]] * norms[iu[1]]
            ok = denom > 0
            cs_values.extend((gram[iu][ok] / denom[ok]).tolist())
            dots.extend(gram[iu].tolist())
        if not dots:
            continue
        dots_arr = np.array(dots)
        mean_dot = dots_arr.mean()
        cov = float(dots_arr.std() / mean_dot) if mean_dot != 0 else float("inf")
        stats.append(HlClassStats(c, float(np.mean(cs_values)), cov, len(dots)))
    return stats


@dataclass
class MonitorReport:
    estimate: CompositionEstimate
    ratio_vector: RatioVector
    decision: str
    status: str


class Monitor:
    """Round-by-round composition watcher wired into the federation loop.

    Reads only the two global model snapshots, the aggregated delta, and
    the selected clients' summed sample totals.
    """

    def __init__(
        self,
        aux: AuxiliaryData,
        learning_rate: float,
        batch_size: int = 32,
        config: MonitorConfig | None = None,
    ) -> None:
        self.aux = aux
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.config = config or MonitorConfig()
        self.state = DetectionState.from_config(self.config)
        self.reports: list[MonitorReport] = []

    def __call__(
        self,
        prev_model: nn.MlpModel,
        new_model: nn.MlpModel,
        round_delta: RoundDelta,
    ) -> MonitorReport:
        probe_result = probe(prev_model, self.aux, self.learning_rate, self.batch_size)
        ra = ratio_matrix(probe_result)
        surviving = filter_weights(ra, self.config.ratio_filter_threshold)
        estimate = estimate_counts(
            probe_result, ra, surviving, round_delta, self.aux, self.learning_rate, self.config
        )
        self.state, decision = update_detection(self.state, estimate)
        ratio_vector = ratio_vector_from(ra, round_delta.round_index)
        report = MonitorReport(estimate, ratio_vector, decision, self.state.status)
        self.reports.append(report)
        return report
