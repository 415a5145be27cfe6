"""File formats for datasets and pipeline artifacts.

* 1D curves: CSV whose first row holds the grid points and every further
  row one sample. A header cell that is not a number names the response
  column (as in the gasoline NIR table: wavelengths plus ``octane``).
* responses: one-column CSV without header.
* 3D volumes: flat little-endian float64 ``(n, H*V*Z)`` plus a JSON sidecar
  ``{n, H, V, Z, mask_path}``; the mask is one byte per voxel.
"""

from __future__ import annotations

import csv
import io as _io
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset1D, Dataset3D, FudosError, Grid1D, ValidationError
from .stability import FrequencyMap, TuningPair


class ArtifactIOError(FudosError, OSError):
    pass


def dumps(obj) -> str:
    """Canonical JSON (sorted keys, fixed indentation) for byte-stable artifacts."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    _write_text(path, dumps(obj))


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise ArtifactIOError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is not valid JSON: {e}") from e


def _write_text(path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}") from e


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as e:
        raise ArtifactIOError(f"cannot write {path}: {e}") from e


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise ArtifactIOError(f"cannot read {path}: {e}") from e


def _num(s: str) -> Optional[float]:
    try:
        return float(s)
    except ValueError:
        return None


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def write_curves_csv(path, data: Dataset1D) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([_fmt(v) for v in data.grid.raw])
    for row in data.X:
        w.writerow([_fmt(v) for v in row])
    _write_text(path, buf.getvalue())


def write_response_csv(path, Y) -> None:
    _write_text(path, "".join(_fmt(v) + "\n" for v in np.asarray(Y).ravel()))


def read_response_csv(path) -> np.ndarray:
    rows = [r for r in csv.reader(_io.StringIO(_read_text(path))) if r]
    vals = []
    for i, r in enumerate(rows):
        v = _num(r[0])
        if v is None:
            if i == 0:
                continue  # header
            raise ValidationError(f"{path}: non-numeric response in row {i + 1}")
        vals.append(v)
    return np.asarray(vals)


def read_curves_csv(path, response_path=None, response_column: Optional[str] = None) -> Dataset1D:
    """Load curves; the response comes from ``response_path`` or a named column."""
    rows = [r for r in csv.reader(_io.StringIO(_read_text(path))) if r]
    if len(rows) < 2:
        raise ValidationError(f"{path}: expected a grid row and at least one sample row")
    header = rows[0]
    y_col = None
    grid_cols = []
    for j, cell in enumerate(header):
        if _num(cell) is None:
            if response_column is not None and cell.strip() != response_column:
                continue  # e.g. an id column
            if y_col is not None:
                raise ValidationError(f"{path}: more than one non-numeric header cell")
            y_col = j
        else:
            grid_cols.append(j)
    try:
        body = np.array([[float(r[j]) for j in range(len(header))] for r in rows[1:] if len(r) == len(header)])
    except ValueError as e:
        raise ValidationError(f"{path}: non-numeric value ({e})") from e
    if body.shape[0] != len(rows) - 1:
        raise ValidationError(f"{path}: ragged rows")
    grid = Grid1D.from_points([float(header[j]) for j in grid_cols])
    Y = body[:, y_col] if y_col is not None else None
    if response_path is not None:
        Y = read_response_csv(response_path)
    return Dataset1D(body[:, grid_cols], Y=Y, grid=grid)


def write_volumes(prefix, data: Dataset3D) -> Path:
    """Writes ``prefix.bin``, ``prefix.mask`` and the sidecar ``prefix.json``."""
    prefix = Path(prefix)
    H, V, Z = data.dims
    _write_bytes(prefix.with_suffix(".bin"), np.ascontiguousarray(data.X, dtype="<f8").tobytes())
    _write_bytes(prefix.with_suffix(".mask"), data.mask.astype(np.uint8).tobytes())
    side = {"n": data.n, "H": H, "V": V, "Z": Z, "mask_path": prefix.with_suffix(".mask").name}
    write_json(prefix.with_suffix(".json"), side)
    return prefix.with_suffix(".json")


def read_volumes(sidecar, response_path=None) -> Dataset3D:
    sidecar = Path(sidecar)
    meta = read_json(sidecar)
    try:
        n, H, V, Z = (int(meta[k]) for k in ("n", "H", "V", "Z"))
    except KeyError as e:
        raise ValidationError(f"{sidecar}: missing field {e}") from e
    bin_path = sidecar.with_suffix(".bin")
    try:
        X = np.fromfile(bin_path, dtype="<f8")
    except OSError as e:
        raise ArtifactIOError(f"cannot read {bin_path}: {e}") from e
    if X.size != n * H * V * Z:
        raise ValidationError(f"{bin_path}: expected {n * H * V * Z} values, found {X.size}")
    mask = None
    if meta.get("mask_path"):
        mpath = sidecar.parent / meta["mask_path"]
        try:
            mask = np.fromfile(mpath, dtype=np.uint8).astype(bool)
        except OSError as e:
            raise ArtifactIOError(f"cannot read {mpath}: {e}") from e
    Y = read_response_csv(response_path) if response_path is not None else None
    return Dataset3D(X.reshape(n, H * V * Z), dims=(H, V, Z), mask=mask, Y=Y)


def read_dataset(path, response_path=None):
    """Dispatch on extension: ``.json`` sidecar for volumes, otherwise CSV curves."""
    if Path(path).suffix == ".json":
        return read_volumes(path, response_path)
    return read_curves_csv(path, response_path)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def write_labels(path, labels) -> None:
    _write_bytes(path, np.asarray(labels, dtype="<i4").tobytes())


def read_labels(path) -> np.ndarray:
    try:
        return np.fromfile(path, dtype="<i4").astype(int)
    except OSError as e:
        raise ArtifactIOError(f"cannot read {path}: {e}") from e


def frequency_map_csv(fmap: FrequencyMap) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point"] + [p.label() for p in fmap.pairs] + ["max"])
    freq, mx = fmap.freq, fmap.max_freq
    for j in range(freq.shape[1]):
        w.writerow([j] + [_fmt(v) for v in freq[:, j]] + [_fmt(mx[j])])
    return buf.getvalue()


def frequency_map_meta(fmap: FrequencyMap) -> dict:
    return {
        "reps": fmap.reps,
        "shape": list(fmap.shape),
        "master_seed": fmap.master_seed,
        "pairs": [p.to_dict() for p in fmap.pairs],
        "counts_dtype": "<i8",
        "mean_segments": None if fmap.n_segments is None else np.mean(fmap.n_segments, axis=0).tolist(),
    }


def write_frequency_map(prefix, fmap: FrequencyMap, extra: Optional[dict] = None) -> Path:
    """1D: ``prefix.csv`` (+ JSON with counts); 3D: counts ``prefix.bin`` + ``prefix.json``."""
    prefix = Path(prefix)
    meta = frequency_map_meta(fmap)
    meta.update(extra or {})
    if fmap.is_3d:
        _write_bytes(prefix.with_suffix(".bin"), np.ascontiguousarray(fmap.counts, dtype="<i8").tobytes())
        _write_bytes(prefix.with_suffix(".max.bin"), np.ascontiguousarray(fmap.max_freq, dtype="<f8").tobytes())
    else:
        _write_text(prefix.with_suffix(".csv"), frequency_map_csv(fmap))
        meta["counts"] = fmap.counts.tolist()
    write_json(prefix.with_suffix(".json"), meta)
    return prefix.with_suffix(".json")


def read_frequency_map(sidecar) -> FrequencyMap:
    sidecar = Path(sidecar)
    meta = read_json(sidecar)
    pairs = [TuningPair.from_dict(p) for p in meta["pairs"]]
    shape = tuple(meta["shape"])
    n_points = int(np.prod(shape))
    if "counts" in meta:
        counts = np.asarray(meta["counts"], dtype=np.int64)
    else:
        counts = np.fromfile(sidecar.with_suffix(".bin"), dtype="<i8").reshape(len(pairs), n_points)
    return FrequencyMap(counts=counts, reps=int(meta["reps"]), pairs=pairs, shape=shape, master_seed=int(meta["master_seed"]))


def write_clusters_csv(path, points, coords, assignment) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    coords = np.asarray(coords)
    ncol = 1 if coords.ndim == 1 else coords.shape[1]
    names = ["h", "v", "z"] if ncol == 3 else ["t"]
    w.writerow(["point", *names, "cluster"])
    for row in assignment.to_rows(points, coords):
        w.writerow(row)
    _write_text(path, buf.getvalue())


def write_predictions_csv(path, predictions) -> None:
    _write_text(path, "prediction\n" + "".join(_fmt(v) + "\n" for v in np.asarray(predictions).ravel()))
