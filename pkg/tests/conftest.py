"""Shared toy-scale fixtures and the acceptance summary printer."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from snowldm.cli import main
from snowldm.config import PipelineConfig
from snowldm.synthdata import gen_dataset

HELD_OUT_SEED = 10_000   # scene seeds 10000.. never overlap the training scenes 0..199


@dataclass
class ToyData:
    root: Path
    train: Path
    held_out: Path


@dataclass
class ToyRun:
    data: ToyData
    ae_ckpt: Path
    ldm_ckpt: Path
    ae_log: Path
    ldm_log: Path
    seconds: float


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory) -> ToyData:
    root = tmp_path_factory.mktemp("toy")
    cfg = PipelineConfig()
    gen_dataset(root / "train", 200, cfg.sensor(), cfg.snow(), seed=0)
    gen_dataset(root / "held_out", 50, cfg.sensor(), cfg.snow(), seed=HELD_OUT_SEED)
    return ToyData(root, root / "train", root / "held_out")


@pytest.fixture(scope="session")
def toy_run(toy_data) -> ToyRun:
    """Default-config autoencoder and denoiser trained through the CLI."""
    r = toy_data.root
    t0 = time.perf_counter()
    assert main(["train-ae", "--data", str(toy_data.train), "-o", str(r / "ae.ckpt"),
                 "--log", str(r / "ae.csv")]) == 0
    assert main(["train-ldm", "--data", str(toy_data.train), "--ae", str(r / "ae.ckpt"),
                 "-o", str(r / "ldm.ckpt"), "--log", str(r / "ldm.csv")]) == 0
    return ToyRun(toy_data, r / "ae.ckpt", r / "ldm.ckpt", r / "ae.csv", r / "ldm.csv",
                  time.perf_counter() - t0)


# ---------------------------------------------------------------- acceptance summary

_RESULTS: dict[str, tuple[str, float]] = {}
_NOTES: dict[str, str] = {}


@pytest.fixture
def note(request):
    """Attach a one-line measurement to this criterion's summary line."""
    def record(text: str) -> None:
        _NOTES[request.node.name] = text
    return record


def pytest_runtest_logreport(report):
    """Record each criterion's outcome; its time includes fixture setup such as training."""
    if "test_acceptance.py" not in report.nodeid or report.when == "teardown":
        return
    name = report.nodeid.split("::")[-1]
    _, spent = _RESULTS.get(name, ("", 0.0))
    if report.when == "call" or report.outcome != "passed":
        _RESULTS[name] = ("PASS" if report.passed else "FAIL", spent + report.duration)
    else:
        _RESULTS[name] = ("", spent + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS):
        status, secs = _RESULTS[name]
        if not status:
            continue
        label = name.removeprefix("test_criterion_").replace("_", " ")
        extra = f"  [{_NOTES[name]}]" if name in _NOTES else ""
        terminalreporter.write_line(f"{status}  criterion {label}  ({secs:.1f} s){extra}")
