"""Shared fixtures: synthetic toy datasets and small run configurations."""

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from sketchcolor.data import clear_listing_cache
from sketchcolor.edges import extract_sketch_dir


@pytest.fixture(autouse=True)
def _fresh_listing_cache():
    clear_listing_cache()
    yield


def make_color_dir(directory: Path, n: int, hw: int = 48, seed: int = 0,
                   structured: bool = False) -> Path:
    """Write n small RGB PNGs; structured mode draws colored blocks so a
    paired run has something learnable."""
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        if structured:
            arr = np.zeros((hw, hw, 3), np.uint8)
            for _ in range(6):
                y, x = rng.integers(0, max(1, hw - 16), 2)
                h, w = rng.integers(hw // 8, hw // 4, 2)
                arr[y:y + h, x:x + w] = rng.integers(0, 256, 3)
        else:
            arr = rng.integers(0, 256, size=(hw, hw, 3), dtype=np.uint8)
        Image.fromarray(arr).save(directory / f"img{i:03d}.png")
    return directory


def make_toy_dataset(root: Path, n_train: int = 8, n_test: int = 4,
                     hw: int = 48, seed: int = 0,
                     structured: bool = False) -> Path:
    """{root}/{trainA,trainB,testA,testB} with sketches extracted from the
    color side, so paired stems align by construction."""
    for split, n in (("train", n_train), ("test", n_test)):
        make_color_dir(root / f"{split}B", n, hw=hw, seed=seed + (split == "test"),
                       structured=structured)
        extract_sketch_dir(root / f"{split}B", root / f"{split}A")
    clear_listing_cache()
    return root


@pytest.fixture
def toy_dataset(tmp_path):
    return make_toy_dataset(tmp_path / "toy")


def toy_run_mapping(root: Path, run_dir: Path, **overrides) -> dict:
    """Flat config for a fast desk-scale run; override freely."""
    mapping = {
        "run_dir": str(run_dir),
        "data_root": str(root),
        "dataset": "toy",
        "scheme": "paired",
        "epochs": 1,
        "image_size": 32,
        "seed": 0,
        "ngf": 8,
        "ndf": 8,
        "n_blocks": 2,
        "num_classes": 6,
        "partition": "things:3",
        "seg_map_size": 32,
        "variant": "both",
        "checkpoint_interval": 1,
    }
    mapping.update({k: str(v) for k, v in overrides.items()})
    return mapping


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    marks = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    lines = []
    for status, mark in marks.items():
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            if status != "skipped" and getattr(rep, "when", "call") != "call":
                continue
            name = nodeid.split("::")[-1].removeprefix("test_").replace("_", " ")
            lines.append((name, mark))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, mark in sorted(lines):
            terminalreporter.write_line(f"{mark:5s} {name}")
