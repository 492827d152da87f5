"""Round-based FedAvg orchestration.

Each round: select K clients, broadcast the global model plus the current
ratio vector, train locally, aggregate the weight deltas with an
unweighted mean, then hand the before/after models to the monitor hook.
Clients upload only their weight delta and their total sample count;
per-class counts never cross the wire.

Client training tasks are independent (each works on an immutable
snapshot); they are executed sequentially here in ascending client id,
which is also the fixed reduction order that keeps runs bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import nn
from .data import ClientShard
from .errors import ConfigError, NumericError
from .losses import BatchLoss, LossConfig, RatioVector

SELECTION_MODES = ("uniform_random", "fixed_first_round")


@dataclass
class RoundConfig:
    clients_total: int = 100
    clients_selected: int = 20
    local_epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 0.001
    rounds_total: int = 30
    selection: str = "uniform_random"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.clients_selected <= self.clients_total:
            raise ConfigError(
                f"clients_selected {self.clients_selected} must be in [1, {self.clients_total}]"
            )
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be >= 0")
        if self.selection not in SELECTION_MODES:
            raise ConfigError(f"unknown selection mode {self.selection!r}")


@dataclass
class ClientUpdate:
    """What a client uploads: its delta and its total sample count only."""

    client_id: int
    weight_delta: list[np.ndarray]
    total_samples: int


@dataclass
class RoundDelta:
    """The aggregated global change of one round, as the monitor sees it."""

    round_index: int
    last_layer_delta: np.ndarray  # (Q, s) link-weight change of the global model
    sum_total_samples: int  # sum of the selected clients' totals
    clients_selected: int


def select_clients(round_index: int, cfg: RoundConfig) -> list[int]:
    """K distinct client ids; deterministic per (seed, round)."""
    effective_round = 1 if cfg.selection == "fixed_first_round" else round_index
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, effective_round]))
    ids = rng.choice(cfg.clients_total, size=cfg.clients_selected, replace=False)
    return sorted(int(i) for i in ids)


def _batch_seed(cfg: RoundConfig, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, round_index, client_id]))


def _local_mfe_config(loss_cfg: LossConfig, shard: ClientShard) -> LossConfig:
    """Resolve the false-error loss from the client's own class counts.

    Without a globally supplied minority set, a client can only treat its
    locally under-represented classes (under half its largest count) as
    the positives; with none, the loss degenerates to plain squared error.
    """
    counts = shard.per_class_counts
    local_minority = tuple(
        int(c) for c in np.flatnonzero((counts > 0) & (counts < counts.max() / 2))
    )
    if not local_minority:
        return replace(loss_cfg, kind="mse")
    return replace(loss_cfg, minority_set=local_minority)


def local_train(
    global_model: nn.MlpModel,
    shard: ClientShard,
    loss_cfg: LossConfig,
    ratios: RatioVector | None,
    cfg: RoundConfig,
    round_index: int = 0,
    metrics: dict | None = None,
) -> ClientUpdate:
    """Epochs of seeded mini-batch SGD starting from the global model.

    Returns the weight delta (trained - global). When ``metrics`` is
    given, the mean per-sample training loss is written into it; that is
    a simulation-side diagnostic, not part of the upload.
    """
    if shard.total == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    features, labels = shard.features_and_labels()
    if loss_cfg.kind == "mfe" and loss_cfg.minority_set is None:
        loss_cfg = _local_mfe_config(loss_cfg, shard)
    loss = BatchLoss(loss_cfg)
    rng = _batch_seed(cfg, round_index, shard.client_id)

    model = nn.copy_model(global_model)
    loss_sum = 0.0
    loss_count = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(features.shape[0])
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            trace = nn.forward(model, features[batch])
            losses, grad_logits = loss(trace.probs, labels[batch], ratios)
            if not np.isfinite(losses).all():
                raise NumericError(
                    f"non-finite loss (round {round_index}, client {shard.client_id}, "
                    f"batch starting at {start})"
                )
            loss_sum += float(losses.sum())
            loss_count += batch.size
            grads = nn.backward(model, trace, grad_logits)
            model = nn.sgd_step(model, grads, cfg.learning_rate)

    if metrics is not None:
        metrics["mean_loss"] = loss_sum / loss_count if loss_count else 0.0
    delta = [
        local - base
        for local, base in zip(nn.parameters(model), nn.parameters(global_model))
    ]
    return ClientUpdate(shard.client_id, delta, shard.total)


def fedavg(
    updates: list[ClientUpdate],
    global_model: nn.MlpModel,
    round_index: int = 0,
) -> tuple[nn.MlpModel, RoundDelta]:
    """Unweighted mean of the client deltas applied to the global model.

    Updates are reduced in ascending client id regardless of input order.
    """
    if not updates:
        raise ValueError("fedavg needs at least one update")
    base = nn.parameters(global_model)
    for u in updates:
        if len(u.weight_delta) != len(base) or any(
            d.shape != b.shape for d, b in zip(u.weight_delta, base)
        ):
            raise ValueError(f"update from client {u.client_id} is not shape-congruent")
    ordered = sorted(updates, key=lambda u: u.client_id)
    k = len(ordered)
    mean_delta = [np.zeros_like(b) for b in base]
    for u in ordered:
        for acc, d in zip(mean_delta, u.weight_delta):
            acc += d
    for acc in mean_delta:
        acc /= k

    new_model = nn.from_parameters(
        global_model, [b + d for b, d in zip(base, mean_delta)]
    )
    # the final layer's weight array sits second-to-last in the flat list
    last_w_slot = 2 * (len(global_model.layers) - 1)
    slice_check = sum(u.weight_delta[last_w_slot] for u in ordered) / k
    if not np.allclose(slice_check, mean_delta[last_w_slot], rtol=0, atol=1e-12):
        raise NumericError("aggregated last-layer delta failed its consistency check")
    delta = RoundDelta(
        round_index=round_index,
        last_layer_delta=mean_delta[last_w_slot].copy(),
        sum_total_samples=sum(u.total_samples for u in updates),
        clients_selected=k,
    )
    return new_model, delta


@dataclass
class RoundRecord:
    round_index: int
    selected: list[int]
    mean_client_loss: float
    loss_kind: str
    mitigation_active: bool


@dataclass
class FederationState:
    shards: list[ClientShard]
    model: nn.MlpModel
    loss_cfg: LossConfig
    prev_model: nn.MlpModel | None = None
    round_index: int = 0
    ratio_vector: RatioVector | None = None
    mitigation_active: bool = False
    last_delta: RoundDelta | None = None
    records: list[RoundRecord] = field(default_factory=list)

    def active_loss(self) -> LossConfig:
        """Ratio-scaled loss waits for detection unless configured otherwise."""
        cfg = self.loss_cfg
        if cfg.kind == "ratio" and not (cfg.ratio_from_start or self.mitigation_active):
            return LossConfig(kind="ce")
        return cfg


MonitorHook = Callable[[nn.MlpModel, nn.MlpModel, RoundDelta], object]


def run_round(
    state: FederationState,
    cfg: RoundConfig,
    monitor_hook: MonitorHook | None = None,
) -> FederationState:
    """Advance the federation by one round (select, train, aggregate, probe).

    The monitor hook, when present, receives the pre-round global model,
    the post-round one, and the aggregated delta; it may return an object
    with ``ratio_vector`` and ``decision`` attributes to steer mitigation
    from the next round on.
    """
    round_index = state.round_index + 1
    selected = select_clients(round_index, cfg)
    loss_cfg = state.active_loss()

    snapshot = nn.copy_model(state.model)
    updates = []
    losses = []
    for client_id in selected:
        shard = state.shards[client_id]
        metrics: dict = {}
        updates.append(
            local_train(
                state.model, shard, loss_cfg, state.ratio_vector, cfg, round_index, metrics
            )
        )
        losses.append(metrics["mean_loss"])

    new_model, round_delta = fedavg(updates, state.model, round_index)

    if monitor_hook is not None:
        outcome = monitor_hook(snapshot, new_model, round_delta)
        if outcome is not None:
            ratio_vector = getattr(outcome, "ratio_vector", None)
            if ratio_vector is not None:
                state.ratio_vector = ratio_vector
            if getattr(outcome, "decision", None) == "load_ratio_loss":
                state.mitigation_active = True

    state.prev_model = snapshot
    state.model = new_model
    state.last_delta = round_delta
    state.round_index = round_index
    state.records.append(
        RoundRecord(
            round_index=round_index,
            selected=selected,
            mean_client_loss=float(np.mean(losses)) if losses else 0.0,
            loss_kind=loss_cfg.kind,
            mitigation_active=state.mitigation_active,
        )
    )
    return state
