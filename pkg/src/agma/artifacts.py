"""Run manifests and prediction serialization shared by the command line."""

from __future__ import annotations

import json
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError


def atomic_write_text(path, text):
    """Write via a sibling temp file and rename, so readers never see halves."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    """Everything needed to reproduce one command's outputs."""

    command: str
    config: dict
    seed: int
    version: str
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    duration_s: float = 0.0
    started: float = field(default_factory=time.time)

    def finish(self):
        self.duration_s = round(time.time() - self.started, 3)

    def write(self, path):
        self.finish()
        payload = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "duration_s": self.duration_s,
        }
        atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


PREDICTIONS_HEADER = "scene_id,agent_id,sample_idx,t,x,y"


def write_predictions_csv(scenes, predictions, path):
    """One row per sampled point: scene_id, agent_id, sample_idx, t, x, y."""
    lines = [PREDICTIONS_HEADER]
    for scene, sets in zip(scenes, predictions):
        for agent, pset in zip(scene.agents, sets):
            for s_idx in range(pset.n):
                for t, (x, y) in enumerate(pset.samples[s_idx]):
                    lines.append(
                        f"{scene.scene_id},{agent.agent_id},{s_idx},{t},{repr(float(x))},{repr(float(y))}"
                    )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_predictions_csv(path):
    """Inverse of :func:`write_predictions_csv`.

    Returns an ordered dict mapping (scene_id, agent_id) as strings to a
    (N, T, 2) array of samples.
    """
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != PREDICTIONS_HEADER:
        raise ParseError(f"expected header {PREDICTIONS_HEADER!r}", line_number=1)
    cells_by_key = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 6:
            raise ParseError(f"expected 6 cells, got {len(cells)}", line_number=ln)
        try:
            key = (cells[0], cells[1])
            s_idx, t = int(cells[2]), int(cells[3])
            x, y = float(cells[4]), float(cells[5])
        except ValueError as exc:
            raise ParseError(str(exc), line_number=ln) from None
        cells_by_key.setdefault(key, {}).setdefault(s_idx, {})[t] = (x, y)
    out = {}
    for key, by_sample in cells_by_key.items():
        n = max(by_sample) + 1
        t_len = max(max(ts) for ts in by_sample.values()) + 1
        arr = np.zeros((n, t_len, 2))
        for s_idx, ts in by_sample.items():
            for t, xy in ts.items():
                arr[s_idx, t] = xy
        out[key] = arr
    return out
