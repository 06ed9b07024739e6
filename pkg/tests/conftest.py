"""Shared fixtures: seeded generators, a tiny model for fast pipeline tests, and the trained toy model."""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from mtmtrack.bev import RegionSpec
from mtmtrack.bmp import BmpConfig
from mtmtrack.irm import IrmConfig
from mtmtrack.pipeline import ModelConfig
from mtmtrack.rim import RimConfig
from mtmtrack.sim import suite
from mtmtrack.train import TrainConfig, mean_probe_loss, probe_samples, train
from mtmtrack.weights_io import load_weights, save_weights

SRC = Path(__file__).resolve().parents[1] / "src" / "mtmtrack"

TRAIN_SEED = 0
PROBE_COUNT = 8

ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(criterion: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    """16 x 16 grid at 0.2 m cells; small enough that a training step takes well under a second."""
    return ModelConfig(
        region=RegionSpec(x_range=(-1.6, 1.6), y_range=(-1.6, 1.6), z_range=(-1.2, 0.8), voxel_size=(0.2, 0.2, 0.4)),
        bmp=BmpConfig(token_dim=16, heads=2, encoder_layers=1, decoder_layers=1, ffn_dim=16),
        rim=RimConfig(channels=8, heads=2, points=2),
        irm=IrmConfig(iterations=3, radius=2, hidden=8, head_hidden=4),
    )


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(SRC.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


class TrainedModel:
    """The default-config model trained for the default 500 steps on the four-kind suite."""

    def __init__(self, weights, mcfg: ModelConfig, tcfg: TrainConfig, tracklets, meta: dict):
        self.weights = weights
        self.mcfg = mcfg
        self.tcfg = tcfg
        self.tracklets = tracklets
        self.meta = meta


@pytest.fixture(scope="session")
def trained(request) -> TrainedModel:
    """Trains once per source revision; the result is cached under the pytest cache directory."""
    mcfg, tcfg = ModelConfig(), TrainConfig()
    tracklets = suite(seed=TRAIN_SEED, per_kind=2)
    cache = Path(request.config.cache.mkdir("mtmtrack-trained")) / _source_digest()
    wpath, mpath = cache / "weights.bin", cache / "meta.json"
    if wpath.exists() and mpath.exists():
        return TrainedModel(load_weights(wpath, requires_grad=False), mcfg, tcfg, tracklets,
                            json.loads(mpath.read_text()))

    clean = probe_samples(tracklets, mcfg, tcfg, TRAIN_SEED, PROBE_COUNT, augment=False)
    noisy = probe_samples(tracklets, mcfg, tcfg, TRAIN_SEED, PROBE_COUNT, augment=True)
    from mtmtrack.pipeline import init_weights
    w0 = init_weights(mcfg, TRAIN_SEED)
    meta = {"initial_clean": mean_probe_loss(w0, clean, mcfg), "initial_augmented": mean_probe_loss(w0, noisy, mcfg)}
    t0 = time.perf_counter()
    res = train(tracklets, mcfg, tcfg, TRAIN_SEED, weights=w0)
    meta["train_seconds"] = time.perf_counter() - t0
    meta["final_clean"] = mean_probe_loss(res.weights, clean, mcfg)
    meta["final_augmented"] = mean_probe_loss(res.weights, noisy, mcfg)
    meta["history"] = res.history
    cache.mkdir(parents=True, exist_ok=True)
    save_weights(wpath, res.weights)
    mpath.write_text(json.dumps(meta))
    return TrainedModel(load_weights(wpath, requires_grad=False), mcfg, tcfg, tracklets, meta)
