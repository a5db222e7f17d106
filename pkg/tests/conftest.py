"""Session fixtures: synthetic datasets written to disk and models trained on them.

Training goes through the command line so the slow fixtures double as an
end-to-end check of ``gen-synth`` and ``train``.
"""

import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from protosanity.bundle import load_model
from protosanity.cli import main
from protosanity.data import read_manifest


@dataclass
class TrainedRun:
    manifest: Path
    bundle: Path
    out_dir: Path
    seconds: float

    @property
    def model(self):
        return load_model(self.bundle)

    def log_value(self, key):
        for line in (self.out_dir / "train_log.txt").read_text().splitlines():
            name, _, value = line.partition(" ")
            if name == key:
                return float(value)
        raise KeyError(key)


def generate(out_dir, *args):
    assert main(["gen-synth", str(out_dir), *args]) == 0
    return out_dir / "manifest.tsv"


def train(manifest, out_dir, *args):
    start = time.process_time()
    assert main(["train", str(manifest), "--out", str(out_dir), *args]) == 0
    return TrainedRun(manifest, out_dir / "model.psan", out_dir, time.process_time() - start)


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """Two classes, a handful of images, one epoch: for plumbing tests."""
    root = tmp_path_factory.mktemp("small")
    manifest = generate(root / "data", "--num-classes", "2", "--train", "16", "--test", "4", "--seed", "3")
    return train(manifest, root / "model", "--epochs", "1", "--prototypes-per-class", "2", "--seed", "3")


@pytest.fixture(scope="session")
def default_manifest(tmp_path_factory):
    return generate(tmp_path_factory.mktemp("synth") / "data", "--seed", "0")


@pytest.fixture(scope="session")
def border_manifest(tmp_path_factory):
    return generate(tmp_path_factory.mktemp("border") / "data", "--placement", "border", "--seed", "0")


@pytest.fixture(scope="session")
def prototree_run(default_manifest):
    return train(default_manifest, default_manifest.parent.parent / "prototree", "--similarity", "prototree", "--seed", "0")


@pytest.fixture(scope="session")
def protopnet_run(default_manifest):
    return train(default_manifest, default_manifest.parent.parent / "protopnet", "--similarity", "protopnet", "--seed", "0")


@pytest.fixture(scope="session")
def border_run(border_manifest):
    return train(border_manifest, border_manifest.parent.parent / "prototree", "--similarity", "prototree", "--seed", "0")


@pytest.fixture(scope="session")
def default_dataset(default_manifest):
    return read_manifest(default_manifest)


# --- acceptance summary ----------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then fail the test if the criterion failed."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
