import numpy as np
import pytest
import torch

from illumid.augment import IlluminationConfig, build_augmented_manifest, synth_toy_dataset, write_manifest
from illumid.data import load_manifest

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    synth_toy_dataset(20, 10, 32, 2, seed=0, out_dir=d)
    return d


@pytest.fixture(scope="session")
def toy_ds(toy_dir):
    return load_manifest(toy_dir / "manifest.jsonl")


@pytest.fixture(scope="session")
def toy_test_ds(toy_dir):
    """Toy corpus with frozen random illumination on every record."""
    cfg = IlluminationConfig()
    recs = load_manifest(toy_dir / "manifest.jsonl").records
    write_manifest(build_augmented_manifest(recs, cfg, 99, "assign_random"), toy_dir / "test.jsonl")
    return load_manifest(toy_dir / "test.jsonl", cfg=cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cli_baseline_run(toy_dir, toy_test_ds, tmp_path_factory):
    """One full `train --preset toy --variant baseline` run through the CLI, shared across modules."""
    from illumid.cli import main

    out = tmp_path_factory.mktemp("cli_baseline")
    code = main(["--log-level", "WARNING", "train", "--manifest", str(toy_dir / "manifest.jsonl"),
                 "--variant", "baseline", "--preset", "toy", "--seed", "0", "--out", str(out)])
    assert code == 0
    return out
