"""Rebuild the golden inputs and expected outputs.

Run only when an output format changes on purpose; the checked-in expected
files are the contract the golden test compares against byte for byte.
"""

import subprocess
import sys
from pathlib import Path

import numpy as np

from iqdet.formats import write_annotations, write_config, write_tensors
from iqdet.geometry import Box

HERE = Path(__file__).resolve().parent


def build_inputs():
    rng = np.random.default_rng(20240501)
    write_tensors(HERE / "features.iqt", {
        "P3": rng.normal(size=(4, 8, 8)).astype(np.float32),
        "P4": rng.normal(size=(4, 4, 4)).astype(np.float32),
    })
    write_annotations(HERE / "annotations.json", (64, 64),
                      [Box(4, 6, 30, 22), Box(36, 10, 60, 58), Box(8, 34, 19, 45)], [0, 1, 1])
    write_config(HERE / "assign.cfg", {"pyramid": "P3:8,P4:16", "k_s": 12, "draws_per_level": 12,
                                       "mode": "iqdet", "n_components": 2, "hidden": 16, "pool": 3,
                                       "samples_per_bin": 2, "encoder_seed": 7})
    (HERE / "gmm.json").write_text(
        '{"mu": [[-0.3, 0.2], [0.4, -0.1]], "sigma": [[0.35, 0.5], [0.6, 0.3]], "pi": [0.9, 0.6]}\n')


def build_outputs():
    cli = [sys.executable, "-m", "iqdet.cli"]
    subprocess.run(cli + ["assign", str(HERE / "features.iqt"), str(HERE / "annotations.json"),
                          "--config", str(HERE / "assign.cfg"), "--seed", "42",
                          "--out", str(HERE / "assignment.json")], check=True)
    subprocess.run(cli + ["viz", str(HERE / "gmm.json"), "--resolution", "32", "--count", "12",
                          "--seed", "5", "--out", str(HERE / "viz")], check=True)


if __name__ == "__main__":
    build_inputs()
    build_outputs()
