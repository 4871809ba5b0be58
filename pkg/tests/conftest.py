import os

import numpy as np
import pytest

from astra_tda.attribution import source_damping
from astra_tda.data import split, synth_classification, synth_regression
from astra_tda.ekfac import fit_ekfac
from astra_tda.model import CLASSIFICATION, MlpSpec
from astra_tda.trainer import TrainConfig, segment_trajectory, train

# Acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


class Tiny:
    """Seeded 2-8-4-1 regression net on 64 examples, trained with the default recipe."""

    def __init__(self, seed=0):
        self.spec = MlpSpec((2, 8, 4, 1))
        self.data = synth_regression(64, 2, 0.1, seed=seed)
        self.traj = train(self.spec, self.data, TrainConfig())
        self.params = self.traj.final
        self.segments = segment_trajectory(self.traj, 3)
        self.damping = source_damping(self.segments)
        self.state = fit_ekfac(self.spec, self.params, self.data, seed=0)


class LdsTask:
    """Synthetic regression LDS task: 512 training examples, 32 queries."""

    def __init__(self):
        self.spec = MlpSpec((16, 32, 32, 1))
        full = synth_regression(544, 16, 0.1, seed=0)
        self.train_set, self.queries = split(full, 32, seed=0)
        self.config = TrainConfig()
        self.traj = train(self.spec, self.train_set, self.config)
        self.params = self.traj.final
        self.damping = source_damping(segment_trajectory(self.traj, 3))
        self.state = fit_ekfac(self.spec, self.params, self.train_set, seed=0)
        self._gt = None
        self.masks = None

    def ground_truth(self):
        if self._gt is None:
            from astra_tda.evaluation import compute_ground_truth, generate_masks

            self.masks = generate_masks(len(self.train_set), 0.5, 50, seed=1)
            self._gt = compute_ground_truth(
                self.spec, self.train_set, self.config, self.masks, 20, self.queries,
                base_seed=7, workers=min(8, os.cpu_count() or 1),
            )
        return self._gt


@pytest.fixture(scope="session")
def tiny():
    return Tiny()


@pytest.fixture(scope="session")
def tiny_cls():
    spec = MlpSpec((2, 8, 3), CLASSIFICATION)
    data = synth_classification(64, 2, 3, margin=2.0, seed=0)
    traj = train(spec, data, TrainConfig(epochs=10))
    return spec, data, traj.final


@pytest.fixture(scope="session")
def lds_task():
    return LdsTask()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
