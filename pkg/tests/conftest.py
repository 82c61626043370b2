import dataclasses
import time

import pytest

from mafnet import ablation
from mafnet.data import SynthSpec, generate_synthetic
from mafnet.model import MafConfig
from mafnet.train import TrainConfig

# Shared synthetic protocol for the training criteria: half the training
# faces carry an occluder, the held-out "occluded" split has occluders on
# half its samples.
TRAIN_SPEC = SynthSpec(count=640, seed=100, occlusion=0.5, noise_std=0.2)
CLEAN_SPEC = dataclasses.replace(TRAIN_SPEC, count=256, seed=200, occlusion=0.0)
OCCLUDED_SPEC = dataclasses.replace(TRAIN_SPEC, count=256, seed=300, occlusion=0.5)
SWEEP_SEEDS = (0, 1, 2, 3, 4)
SWEEP_TRAIN = TrainConfig(epochs=50, batch_size=16)

ACCEPTANCE_LINES: list[str] = []


@dataclasses.dataclass
class Sweep:
    results: list
    seconds: float


def run_protocol_sweep(max_jobs: int = 1) -> Sweep:
    train_set = generate_synthetic(TRAIN_SPEC)
    splits = {"clean": generate_synthetic(CLEAN_SPEC), "occluded": generate_synthetic(OCCLUDED_SPEC)}
    start = time.perf_counter()
    results = ablation.run_sweep(ablation.plan(MafConfig(), SWEEP_SEEDS), SWEEP_TRAIN, train_set, splits,
                                 max_jobs=max_jobs)
    return Sweep(results, time.perf_counter() - start)


@pytest.fixture(scope="session")
def sweep() -> Sweep:
    return run_protocol_sweep()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
