"""Dataset on disk: manifest.json plus one CSV per trajectory.

The manifest declares the modalities, per-dimension raw bounds, and the
trajectory list; CSV files hold raw (unnormalized) values with header
``t,joint0..joint3,feat0..feat7``.  Loading rescales every dimension into
[-1, 1] with the manifest bounds; raw values outside their declared bounds
are a hard error naming file and line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_VERSION = 1


class DatasetError(Exception):
    pass


class Normalizer:
    """Linear map raw [lo, hi] <-> normalized [-1, 1], per dimension."""

    def __init__(self, bounds: dict):
        # bounds: modality name -> (dim, 2) array of [lo, hi]
        self.bounds = {k: np.asarray(v, dtype=np.float64) for k, v in bounds.items()}
        for name, b in self.bounds.items():
            if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 1] <= b[:, 0]):
                raise DatasetError(f"bad bounds for modality '{name}': {b.tolist()}")

    def normalize(self, name: str, raw):
        b = self.bounds[name]
        return 2.0 * (np.asarray(raw, dtype=np.float64) - b[:, 0]) / (b[:, 1] - b[:, 0]) - 1.0

    def denormalize(self, name: str, norm):
        b = self.bounds[name]
        return b[:, 0] + (np.asarray(norm, dtype=np.float64) + 1.0) * 0.5 * (b[:, 1] - b[:, 0])


@dataclass
class Trajectory:
    id: str
    door_type: str
    observations: dict   # modality -> (T, dim) array, normalized to [-1, 1]

    @property
    def length(self) -> int:
        return next(iter(self.observations.values())).shape[0]


def _column_names(modalities) -> list:
    cols = ["t"]
    for name, dim in modalities:
        cols += [f"{name}{i}" for i in range(dim)]
    return cols


def save_dataset(path, records, bounds: dict, modalities=None) -> None:
    """Write manifest + CSVs.

    records: iterable of (id, door_type, raw_observations) with
    raw_observations a modality->(T, dim) dict of raw values; bounds as for
    Normalizer.  Output is byte-deterministic for identical inputs.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if modalities is None:
        first = records[0][2]
        modalities = [(name, first[name].shape[1]) for name in first]
    manifest = {
        "version": DATASET_VERSION,
        "modalities": [
            {"name": name, "dim": dim,
             "bounds": [[float(lo), float(hi)] for lo, hi in np.asarray(bounds[name])]}
            for name, dim in modalities
        ],
        "trajectories": [],
    }
    cols = _column_names(modalities)
    for traj_id, door_type, obs in records:
        fname = f"{traj_id}.csv"
        manifest["trajectories"].append(
            {"id": traj_id, "door_type": door_type, "file": fname})
        T = next(iter(obs.values())).shape[0]
        lines = [",".join(cols)]
        for t in range(T):
            row = [str(t)]
            for name, dim in modalities:
                row += [f"{obs[name][t, i]:.9f}" for i in range(dim)]
            lines.append(",".join(row))
        (path / fname).write_text("\n".join(lines) + "\n")
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path):
    """Read a dataset directory.  Returns (list of Trajectory, Normalizer).

    Trajectories come back in manifest order with values normalized to
    [-1, 1]; any raw value outside its declared bounds is rejected.
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest in {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {manifest_path}: {e}") from e
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(
            f"unsupported dataset version {manifest.get('version')} "
            f"(expected {DATASET_VERSION}) in {manifest_path}")
    modalities = [(m["name"], int(m["dim"])) for m in manifest["modalities"]]
    bounds = {m["name"]: np.asarray(m["bounds"], dtype=np.float64)
              for m in manifest["modalities"]}
    norm = Normalizer(bounds)
    expect_cols = _column_names(modalities)

    trajectories = []
    for entry in manifest["trajectories"]:
        fpath = path / entry["file"]
        if not fpath.exists():
            raise DatasetError(f"missing trajectory file {fpath}")
        raw = _read_csv(fpath, expect_cols)
        obs = {}
        col = 1
        for name, dim in modalities:
            block = raw[:, col:col + dim]
            b = bounds[name]
            low_bad = block < b[:, 0] - 1e-9
            high_bad = block > b[:, 1] + 1e-9
            if np.any(low_bad | high_bad):
                r, c = np.argwhere(low_bad | high_bad)[0]
                raise DatasetError(
                    f"{fpath} line {r + 2}: {name}{c} value {block[r, c]} "
                    f"outside bounds [{b[c, 0]}, {b[c, 1]}]")
            obs[name] = norm.normalize(name, block)
            col += dim
        if raw.shape[0] < 2:
            raise DatasetError(f"{fpath}: trajectory shorter than 2 steps")
        trajectories.append(Trajectory(
            id=entry["id"], door_type=entry["door_type"], observations=obs))
    return trajectories, norm


def _read_csv(fpath: Path, expect_cols: list) -> np.ndarray:
    lines = fpath.read_text().splitlines()
    if not lines or lines[0].split(",") != expect_cols:
        raise DatasetError(
            f"{fpath} line 1: bad header {lines[0] if lines else '(empty)'!r}")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(expect_cols):
            raise DatasetError(
                f"{fpath} line {i}: expected {len(expect_cols)} fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as e:
            raise DatasetError(f"{fpath} line {i}: {e}") from e
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2:
        raise DatasetError(f"{fpath}: empty trajectory")
    expected_t = np.arange(arr.shape[0], dtype=np.float64)
    if not np.array_equal(arr[:, 0], expected_t):
        bad = int(np.argmax(arr[:, 0] != expected_t))
        raise DatasetError(f"{fpath} line {bad + 2}: non-sequential t column")
    return arr
