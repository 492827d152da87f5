"""Shared fixtures: the digit corpus in IDX form and heavyweight runs.

The handwritten-digit corpus (8x8 images) is expanded by pixel-shift
augmentation to desk scale and serialized through the IDX writer so every
experiment exercises the binary loading path. Expensive federated runs
used by several tests are session-scoped.
"""

from __future__ import annotations

import numpy as np
import pytest
from sklearn.datasets import load_digits

from fedbalance.config import DatasetConfig, ExperimentConfig, PartitionConfig
from fedbalance.data import write_idx
from fedbalance.federation import RoundConfig
from fedbalance.harness import RunArtifacts, execute, with_overrides

MINORITY = (2, 4, 7)


def build_digit_corpus(augment_copies: int = 9, seed: int = 12345) -> tuple[np.ndarray, np.ndarray]:
    """Digits scaled to [0, 1], optionally expanded by 1-px shifts plus noise."""
    digits = load_digits()
    feats = digits.data / 16.0
    labels = digits.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    blocks_f, blocks_l = [feats], [labels]
    imgs = feats.reshape(-1, 8, 8)
    for _ in range(augment_copies):
        axes = rng.integers(0, 2, size=imgs.shape[0])
        amounts = rng.choice([-1, 1], size=imgs.shape[0])
        shifted = np.stack(
            [np.roll(im, s, axis=ax) for im, s, ax in zip(imgs, amounts, axes)]
        )
        noisy = np.clip(
            shifted.reshape(-1, 64) + rng.normal(0, 0.03, (imgs.shape[0], 64)), 0.0, 1.0
        )
        blocks_f.append(noisy)
        blocks_l.append(labels)
    return np.concatenate(blocks_f), np.concatenate(blocks_l)


@pytest.fixture(scope="session")
def digits_idx(tmp_path_factory) -> tuple[str, str]:
    """Desk-scale digit corpus written as IDX image/label files."""
    out = tmp_path_factory.mktemp("digits")
    feats, labels = build_digit_corpus()
    images_path = str(out / "images.idx")
    labels_path = str(out / "labels.idx")
    write_idx(feats, labels, images_path, labels_path)
    return images_path, labels_path


@pytest.fixture(scope="session")
def imbalanced_base_config(digits_idx) -> ExperimentConfig:
    """Digit corpus at 100:1 global imbalance, 20 fixed clients."""
    images_path, labels_path = digits_idx
    return ExperimentConfig(
        seed=100,
        dataset=DatasetConfig(
            kind="idx",
            images_path=images_path,
            labels_path=labels_path,
            test_per_class=60,
            aux_per_class=25,
        ),
        partition=PartitionConfig(
            classes_per_client=(3, 6),
            samples_per_class=100,
            global_ratio=100.0,
            minority_classes=MINORITY,
        ),
        rounds=RoundConfig(
            clients_total=20,
            clients_selected=20,
            local_epochs=4,
            batch_size=32,
            learning_rate=0.1,
            rounds_total=40,
            selection="fixed_first_round",
        ),
    )


@pytest.fixture(scope="session")
def monitor_accuracy_config() -> ExperimentConfig:
    """Synthetic 10-class setup: 100 clients, 20 selected at random per round."""
    return ExperimentConfig(
        seed=3,
        dataset=DatasetConfig(
            kind="synthetic",
            class_count=10,
            feature_dim=32,
            per_class=3500,
            separation=8.0,
            test_per_class=40,
            aux_per_class=25,
        ),
        partition=PartitionConfig(classes_per_client=(1, 10), samples_per_class=50),
        rounds=RoundConfig(
            clients_total=100,
            clients_selected=20,
            local_epochs=2,
            batch_size=50,
            learning_rate=0.01,
            rounds_total=30,
            selection="uniform_random",
        ),
    )


@pytest.fixture(scope="session")
def monitor_accuracy_run(monitor_accuracy_config) -> RunArtifacts:
    return execute(monitor_accuracy_config)


@pytest.fixture(scope="session")
def mitigation_runs(imbalanced_base_config) -> dict[str, list[RunArtifacts]]:
    """Five seeded runs each for plain and ratio-scaled cross-entropy."""
    out: dict[str, list[RunArtifacts]] = {}
    for kind in ("ce", "ratio"):
        out[kind] = [
            execute(with_overrides(imbalanced_base_config, **{"seed": 100 + s, "loss.kind": kind}))
            for s in range(5)
        ]
    return out


@pytest.fixture(scope="session")
def imbalanced_snapshot(imbalanced_base_config) -> RunArtifacts:
    """A model that has learned 100:1 imbalance but is not yet saturated."""
    cfg = with_overrides(imbalanced_base_config, **{"loss.kind": "ce", "rounds.rounds_total": 8})
    return execute(cfg)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import CHECKLIST
    except ImportError:
        return
    if CHECKLIST:
        terminalreporter.section("acceptance checklist")
        for line in CHECKLIST:
            terminalreporter.write_line(line)
