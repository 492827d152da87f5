"""Experiment runner: seeded end-to-end runs, comparisons, and sweeps.

Every run derives all of its randomness from the config's master seed, so
identical configs produce identical reports (wall time aside). Outputs
are a JSON report plus per-round CSV; figures are rendered next to them.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import metrics, nn, report as report_io
from .config import DatasetConfig, ExperimentConfig
from .data import (
    Dataset,
    PartitionPlan,
    ClientShard,
    composition,
    cosine_similarity,
    global_imbalance,
    load_mnist_idx,
    make_synthetic,
    partition,
    split_indices,
)
from .errors import ConfigError
from .federation import FederationState, run_round
from .losses import RatioVector
from .monitor import AuxiliaryData, Monitor, hl_similarity_diagnostic

AUC_DEFINITION = "macro one-vs-rest, rank statistic with ties at 0.5"

# appendix-style calibration grids, shipped as presets
T_RA_GRID = (1.00, 1.05, 1.10, 1.15, 1.20, 1.25, 1.30, 1.40, 1.50, 2.00, 5.00)
ALPHA_GRID = (0.25, 0.50, 0.75, 1.00, 1.25, 1.50, 1.75, 2.00, 3.00, 5.00)
BETA_GRID = (0.02, 0.04, 0.06, 0.08, 0.10, 0.12, 0.15, 0.20, 0.30)

_SEED_DATASET = 1
_SEED_SPLIT = 2
_SEED_PARTITION = 3
_SEED_MODEL = 4
_SEED_BALANCED = 5


def derive_seed(master: int, tag: int) -> int:
    return int(np.random.SeedSequence([master, tag]).generate_state(1)[0])


@dataclass
class RunReport:
    config: dict
    rounds: list[dict]
    final: dict
    realized_gamma: float
    mean_client_cs: float
    detection_round: int | None
    auc_definition: str = AUC_DEFINITION
    wall_time_sec: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunArtifacts:
    """Everything a finished run produced, for callers beyond the report."""

    report: RunReport
    model: nn.MlpModel
    dataset: Dataset
    test_set: Dataset
    shards: list[ClientShard]
    aux: AuxiliaryData
    watcher: Monitor | None


def _build_dataset(cfg: DatasetConfig, seed: int) -> Dataset:
    if cfg.kind == "synthetic":
        return make_synthetic(
            cfg.class_count, cfg.feature_dim, cfg.per_class, cfg.separation, seed
        )
    return load_mnist_idx(cfg.images_path, cfg.labels_path)


def _assert_isolated(name_a: str, a: np.ndarray, name_b: str, b: np.ndarray) -> None:
    overlap = np.intersect1d(a, b)
    if overlap.size:
        raise AssertionError(
            f"{name_a} and {name_b} share {overlap.size} indices (e.g. {overlap[:5]})"
        )


def execute(cfg: ExperimentConfig) -> RunArtifacts:
    """One seeded federated run with optional monitoring and mitigation."""
    t0 = time.perf_counter()
    dataset = _build_dataset(cfg.dataset, derive_seed(cfg.seed, _SEED_DATASET))
    q = dataset.class_count
    train_idx, test_idx, aux_idx = split_indices(
        dataset,
        cfg.dataset.test_per_class,
        cfg.dataset.aux_per_class,
        derive_seed(cfg.seed, _SEED_SPLIT),
    )

    round_cfg = dataclasses.replace(cfg.rounds, seed=cfg.seed)
    plan = PartitionPlan(
        num_clients=round_cfg.clients_total,
        classes_per_client=cfg.partition.classes_per_client,
        samples_per_class=cfg.partition.samples_per_class,
        global_ratio=cfg.partition.global_ratio,
        minority_classes=cfg.partition.minority_classes,
        seed=derive_seed(cfg.seed, _SEED_PARTITION),
        feature_shift_sigma=cfg.partition.feature_shift_sigma,
    )
    shards = partition(dataset, plan, allowed_indices=train_idx)

    balanced_shards = None
    if cfg.acknowledgment_round is not None:
        balanced_plan = dataclasses.replace(
            plan,
            global_ratio=1.0,
            minority_classes=(),
            seed=derive_seed(cfg.seed, _SEED_BALANCED),
        )
        balanced_shards = partition(dataset, balanced_plan, allowed_indices=train_idx)

    shard_indices = np.concatenate([s.indices for s in shards])
    _assert_isolated("test set", test_idx, "auxiliary data", aux_idx)
    _assert_isolated("client shards", shard_indices, "test set", test_idx)
    _assert_isolated("client shards", shard_indices, "auxiliary data", aux_idx)

    test_set = Dataset(dataset.features[test_idx], dataset.labels[test_idx], q)
    aux = AuxiliaryData.from_dataset(dataset, aux_idx, provenance=cfg.dataset.kind)

    model = nn.init_model(
        nn.ModelSpec(
            input_dim=dataset.feature_dim,
            hidden_widths=list(cfg.model.hidden_widths),
            class_count=q,
            hidden_activation=cfg.model.hidden_activation,
        ),
        derive_seed(cfg.seed, _SEED_MODEL),
    )
    watcher = (
        Monitor(aux, round_cfg.learning_rate, round_cfg.batch_size, cfg.monitor)
        if cfg.monitor_enabled
        else None
    )
    state = FederationState(
        shards=shards,
        model=model,
        loss_cfg=cfg.loss,
        ratio_vector=RatioVector.neutral(q),
    )

    realized_gamma = global_imbalance(shards)
    total_composition = composition(shards)
    mean_client_cs = float(
        np.mean(
            [
                cosine_similarity(s.per_class_counts, total_composition)
                for s in shards
                if s.total > 0
            ]
        )
    )

    rows: list[dict] = []
    detection_round: int | None = None
    for r in range(1, round_cfg.rounds_total + 1):
        if cfg.acknowledgment_round is not None and r >= cfg.acknowledgment_round:
            state.shards = balanced_shards
        run_round(state, round_cfg, watcher)
        record = state.records[-1]
        truth = composition([state.shards[i] for i in record.selected])
        row: dict = {
            "round": r,
            "mean_client_loss": record.mean_client_loss,
            "loss_kind": record.loss_kind,
            "mitigation_active": record.mitigation_active,
            "decision": "",
            "status": "",
            "cs_estimate_truth": None,
            "true_counts": truth.tolist(),
            "est_counts": None,
            "surviving_counts": None,
        }
        if watcher is not None:
            mr = watcher.reports[-1]
            est = mr.estimate
            cs = (
                cosine_similarity(est.counts, truth)
                if est.counts.max() > 0 and truth.max() > 0
                else float("nan")
            )
            if mr.decision == "load_ratio_loss" and detection_round is None:
                detection_round = r
            row.update(
                decision=mr.decision,
                status=mr.status,
                cs_estimate_truth=cs,
                est_counts=est.counts.tolist(),
                surviving_counts=est.contributing.tolist(),
            )
        rows.append(row)

    final: dict = {
        "accuracy": metrics.class_mean_accuracy(state.model, test_set, tuple(range(q))),
        "auc": metrics.auc_macro_ovr(
            metrics.scores(state.model, test_set.features), test_set.labels
        ),
    }
    if cfg.partition.minority_classes:
        final["ac_minority"] = metrics.ac_minority(
            state.model, test_set, cfg.partition.minority_classes
        )
        final["ac_majority"] = metrics.ac_majority(
            state.model, test_set, cfg.partition.minority_classes
        )
    cs_values = [
        row["cs_estimate_truth"]
        for row in rows
        if row["cs_estimate_truth"] is not None and np.isfinite(row["cs_estimate_truth"])
    ]
    if cs_values:
        final["monitor_mean_cs"] = float(np.mean(cs_values))
        final["monitor_min_cs_after_round_2"] = float(np.min(cs_values[2:] or cs_values))

    run_report = RunReport(
        config=cfg.to_dict(),
        rounds=rows,
        final=final,
        realized_gamma=realized_gamma,
        mean_client_cs=mean_client_cs,
        detection_round=detection_round,
        wall_time_sec=time.perf_counter() - t0,
    )
    return RunArtifacts(run_report, state.model, dataset, test_set, shards, aux, watcher)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunReport:
    rep = execute(cfg).report
    if out_dir is not None:
        report_io.write_run_outputs(rep, out_dir)
    return rep


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of the config with ``section.leaf`` overrides applied."""
    d = cfg.to_dict()
    for key, value in changes.items():
        section, _, leaf = key.partition(".")
        if leaf:
            d[section][leaf] = value
        else:
            d[section] = value
    return ExperimentConfig.from_dict(d)


def _mean_of(rows: list[dict], keys: tuple[str, ...]) -> dict:
    out = {}
    for k in keys:
        vals = [r[k] for r in rows if r.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


METRIC_KEYS = ("ac_minority", "ac_majority", "auc", "accuracy")


def compare_losses(
    cfg_base: ExperimentConfig,
    loss_kinds: list[str],
    gamma_levels: list[float],
    n_seeds: int = 5,
    out_dir=None,
) -> list[dict]:
    """One run per (loss, imbalance level, seed) plus per-cell mean rows."""
    if len(loss_kinds) < 2:
        raise ConfigError("compare_losses needs at least two loss kinds")
    rows: list[dict] = []
    for gamma in gamma_levels:
        for kind in loss_kinds:
            cell: list[dict] = []
            for s in range(n_seeds):
                cfg = with_overrides(
                    cfg_base,
                    **{
                        "seed": cfg_base.seed + s,
                        "loss.kind": kind,
                        "partition.global_ratio": float(gamma),
                    },
                )
                rep = run_experiment(cfg)
                cell.append(
                    {
                        "loss": kind,
                        "gamma": gamma,
                        "seed": cfg.seed,
                        "realized_gamma": rep.realized_gamma,
                        **{k: rep.final.get(k) for k in METRIC_KEYS},
                    }
                )
            rows.extend(cell)
            rows.append(
                {
                    "loss": kind,
                    "gamma": gamma,
                    "seed": "mean",
                    "realized_gamma": float(np.mean([r["realized_gamma"] for r in cell])),
                    **_mean_of(cell, METRIC_KEYS),
                }
            )
    if out_dir is not None:
        report_io.write_comparison_outputs(rows, out_dir)
    return rows


def mismatch_study(
    cfg_base: ExperimentConfig,
    c_ranges: list[tuple[int, int]],
    loss_kinds: list[str] | None = None,
    n_seeds: int = 5,
    out_dir=None,
) -> list[dict]:
    """Metrics against the local/global composition mismatch level.

    The classes-per-client range is the mismatch knob; the mean client
    cosine similarity realized under it is recorded with each row. The
    default loss set includes the squared-error pair, where the
    false-error variant works from each client's local class counts.
    """
    loss_kinds = loss_kinds or ["ce", "ratio", "mse", "mfe"]
    rows: list[dict] = []
    for c_range in c_ranges:
        for kind in loss_kinds:
            cell = []
            for s in range(n_seeds):
                cfg = with_overrides(
                    cfg_base,
                    **{
                        "seed": cfg_base.seed + s,
                        "loss.kind": kind,
                        "partition.classes_per_client": list(c_range),
                    },
                )
                rep = run_experiment(cfg)
                cell.append(
                    {
                        "c_min": c_range[0],
                        "c_max": c_range[1],
                        "loss": kind,
                        "seed": cfg.seed,
                        "mean_client_cs": rep.mean_client_cs,
                        **{k: rep.final.get(k) for k in METRIC_KEYS},
                    }
                )
            rows.extend(cell)
            rows.append(
                {
                    "c_min": c_range[0],
                    "c_max": c_range[1],
                    "loss": kind,
                    "seed": "mean",
                    "mean_client_cs": float(np.mean([r["mean_client_cs"] for r in cell])),
                    **_mean_of(cell, METRIC_KEYS),
                }
            )
    if out_dir is not None:
        report_io.write_mismatch_outputs(rows, out_dir)
    return rows


def monitor_eval(cfg: ExperimentConfig, out_dir=None) -> RunReport:
    """Composition-tracking run: cross-entropy loss, monitor on."""
    cfg = with_overrides(cfg, **{"loss.kind": "ce", "monitor_enabled": True})
    return run_experiment(cfg, out_dir=out_dir)


def sweep_t_ra(
    cfg: ExperimentConfig, grid: tuple[float, ...] = T_RA_GRID, out_dir=None
) -> list[dict]:
    """Monitor accuracy (mean and variance of per-round CS) per threshold."""
    rows = []
    for value in grid:
        rep = run_experiment(
            with_overrides(cfg, **{"monitor.ratio_filter_threshold": value, "loss.kind": "ce"})
        )
        cs = [
            r["cs_estimate_truth"]
            for r in rep.rounds
            if r["cs_estimate_truth"] is not None and np.isfinite(r["cs_estimate_truth"])
        ]
        rows.append(
            {"t_ra": value, "mean_cs": float(np.mean(cs)), "var_cs": float(np.var(cs))}
        )
    if out_dir is not None:
        report_io.write_sweep_outputs(rows, "t_ra", ("mean_cs", "var_cs"), out_dir)
    return rows


def _sweep_loss_param(
    cfg: ExperimentConfig, param: str, grid: tuple[float, ...], out_dir
) -> list[dict]:
    rows = []
    for value in grid:
        rep = run_experiment(with_overrides(cfg, **{"loss.kind": "ratio", f"loss.{param}": value}))
        rows.append(
            {
                param: value,
                "ac_minority": rep.final.get("ac_minority"),
                "auc": rep.final["auc"],
            }
        )
    if out_dir is not None:
        report_io.write_sweep_outputs(rows, param, ("ac_minority", "auc"), out_dir)
    return rows


def sweep_alpha(
    cfg: ExperimentConfig, grid: tuple[float, ...] = ALPHA_GRID, out_dir=None
) -> list[dict]:
    return _sweep_loss_param(cfg, "alpha", grid, out_dir)


def sweep_beta(
    cfg: ExperimentConfig, grid: tuple[float, ...] = BETA_GRID, out_dir=None
) -> list[dict]:
    return _sweep_loss_param(cfg, "beta", grid, out_dir)


def diag_hl(cfg: ExperimentConfig, out_dir=None) -> list[dict]:
    """Train per the config, then measure per-class hidden-output concentration."""
    arts = execute(with_overrides(cfg, **{"monitor_enabled": False, "loss.kind": "ce"}))
    stats = hl_similarity_diagnostic(
        arts.model, arts.dataset, batch_size=cfg.rounds.batch_size
    )
    rows = [
        {
            "class": s.class_index,
            "mean_pairwise_cs": s.mean_pairwise_cs,
            "dot_cov": s.dot_coefficient_of_variation,
            "pairs": s.pairs,
        }
        for s in stats
    ]
    if out_dir is not None:
        report_io.write_hl_outputs(rows, out_dir)
    return rows


def validate_report(rep: RunReport) -> list[str]:
    """Acceptance-invariant violations in a finished report, if any."""
    problems = []
    rounds_total = rep.config["rounds"]["rounds_total"]
    seen = [r["round"] for r in rep.rounds]
    if seen != list(range(1, rounds_total + 1)):
        problems.append(f"rounds incomplete: got {len(seen)} records for {rounds_total} rounds")
    for key in ("ac_minority", "ac_majority", "accuracy"):
        v = rep.final.get(key)
        if v is not None and not 0.0 <= v <= 100.0:
            problems.append(f"{key}={v} outside [0, 100]")
    auc = rep.final.get("auc")
    if auc is not None and not 0.0 <= auc <= 1.0:
        problems.append(f"auc={auc} outside [0, 1]")
    if rep.realized_gamma < 1.0:
        problems.append(f"realized_gamma={rep.realized_gamma} below 1")
    return problems
