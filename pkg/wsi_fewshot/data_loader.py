#!/usr/bin/env python3
"""
Data Loader Module
Few-Shot Slide Classification Pipeline

This module handles loading, validating and writing every on-disk artifact:
binary feature files (.fsf), label CSVs, slide manifests, model files and
posterior CSVs.
"""

from __future__ import annotations

import json
import logging
import re
from pathlib import Path

import numpy as np
import pandas as pd

from .core import ClassModel, FeatureMatrix, SupportSet, UNLABELED
from .errors import DataFormatError, NumericalError
from .windowing import SlideGrid

logger = logging.getLogger(__name__)

FSF_MAGIC = b"FSF1"
FSF_HEADER = np.dtype([("magic", "S4"), ("dim", "<u4"), ("n_samples", "<u8")])
FSF_VALUE = np.dtype("<f4")

MANIFEST_COLUMNS = ["row", "col", "feature_index", "true_class"]
_MANIFEST_HEADER = re.compile(r"^#\s*n_rows=(\d+)\s+n_cols=(\d+)\s+n_classes=(\d+)\s*$")


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

def write_features(matrix, path):
    """Write a feature matrix as an .fsf file (32-bit little-endian floats)."""
    values = matrix.values if isinstance(matrix, FeatureMatrix) else np.asarray(matrix)
    stored = values.astype(FSF_VALUE)
    if not np.all(np.isfinite(stored)):
        raise DataFormatError("feature values overflow 32-bit storage")
    header = np.array([(FSF_MAGIC, values.shape[1], values.shape[0])], dtype=FSF_HEADER)
    Path(path).write_bytes(header.tobytes() + stored.tobytes(order="C"))
    logger.info("✅ Wrote %d × %d features to %s", values.shape[0], values.shape[1], path)


def read_features(path):
    """Load an .fsf file into a FeatureMatrix.

    Raises:
        DataFormatError: bad magic, zero dim, truncated payload or a
            non-finite value; the message names the byte offset
    """
    payload = Path(path).read_bytes()
    if len(payload) < FSF_HEADER.itemsize:
        raise DataFormatError(f"{path}: truncated header", offset=len(payload))
    header = np.frombuffer(payload, dtype=FSF_HEADER, count=1)[0]
    if header["magic"] != FSF_MAGIC:
        raise DataFormatError(f"{path}: bad magic {header['magic']!r}", offset=0)
    dim = int(header["dim"])
    n_samples = int(header["n_samples"])
    if dim == 0:
        raise DataFormatError(f"{path}: dim = 0", offset=4)
    if n_samples == 0:
        raise DataFormatError(f"{path}: n_samples = 0", offset=8)

    expected = FSF_HEADER.itemsize + n_samples * dim * FSF_VALUE.itemsize
    if len(payload) < expected:
        raise DataFormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}",
            offset=len(payload),
        )
    if len(payload) > expected:
        raise DataFormatError(f"{path}: trailing bytes after payload", offset=expected)

    values = np.frombuffer(payload, dtype=FSF_VALUE, offset=FSF_HEADER.itemsize)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        offset = FSF_HEADER.itemsize + int(bad[0]) * FSF_VALUE.itemsize
        raise DataFormatError(f"{path}: non-finite value", offset=offset)

    matrix = FeatureMatrix(values.astype(np.float64).reshape(n_samples, dim))
    logger.info("✅ Loaded %d × %d features from %s", n_samples, dim, path)
    return matrix


# ---------------------------------------------------------------------------
# Label files
# ---------------------------------------------------------------------------

def _read_csv_strict(path, columns, skiprows=0):
    """Read a CSV as strings and check the header; data starts at line skiprows + 2."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skiprows=skiprows,
                            skip_blank_lines=False)
    except pd.errors.ParserError as exc:
        raise DataFormatError(f"{path}: malformed row: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise DataFormatError(f"{path}: empty file") from exc
    if list(frame.columns) != columns:
        raise DataFormatError(
            f"{path}: expected header {','.join(columns)}, got {','.join(frame.columns)}",
            line=skiprows + 1,
        )
    blank = np.flatnonzero((frame == "").all(axis=1).to_numpy())
    if blank.size:
        raise DataFormatError(f"{path}: blank row", line=skiprows + 2 + int(blank[0]))
    return frame


def _parse_int(text, path, line, column):
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(f"{path}: malformed row, {column}={text!r}", line=line) from None


def read_labels(path, n_classes=None):
    """Load an "index,class" CSV into a dict mapping sample index to class id.

    Args:
        path (str or Path): Label CSV
        n_classes (int, optional): When given, class ids must be < n_classes

    Returns:
        dict: index -> class id, in file order
    """
    frame = _read_csv_strict(path, ["index", "class"])
    labels = {}
    for offset, (index_text, class_text) in enumerate(frame.itertuples(index=False)):
        line = offset + 2
        index = _parse_int(index_text, path, line, "index")
        label = _parse_int(class_text, path, line, "class")
        if index < 0:
            raise DataFormatError(f"{path}: negative index {index}", line=line)
        if index in labels:
            raise DataFormatError(f"{path}: duplicate index {index}", line=line)
        if label < 0 or (n_classes is not None and label >= n_classes):
            raise DataFormatError(f"{path}: class out of range ({label})", line=line)
        labels[index] = label
    logger.info("✅ Loaded %d labels from %s", len(labels), path)
    return labels


def write_labels(path, labels):
    """Write a dict (or pair of arrays) of index -> class as an "index,class" CSV."""
    if isinstance(labels, dict):
        indices, classes = list(labels.keys()), list(labels.values())
    else:
        indices, classes = labels
    frame = pd.DataFrame({"index": np.asarray(indices, dtype=np.int64),
                          "class": np.asarray(classes, dtype=np.int64)})
    frame.to_csv(path, index=False, lineterminator="\n")


def support_from_labels(features, labels, n_classes=None):
    """Turn a label dict into the SupportSet over ``features``."""
    if not labels:
        raise DataFormatError("label file holds no support samples")
    indices = np.fromiter(labels.keys(), dtype=np.int64)
    classes = np.fromiter(labels.values(), dtype=np.int64)
    if indices.max() >= features.n_samples:
        raise DataFormatError(
            f"label index {int(indices.max())} beyond {features.n_samples} feature rows"
        )
    n_classes = int(n_classes if n_classes is not None else classes.max() + 1)
    return SupportSet.from_classes(features, indices, classes, n_classes)


# ---------------------------------------------------------------------------
# Slide manifests
# ---------------------------------------------------------------------------

def read_manifest(path, n_features=None):
    """Load a slide manifest into a SlideGrid.

    The first line is ``# n_rows=R n_cols=C n_classes=K``; the CSV body has
    the columns row,col,feature_index,true_class (true_class empty or -1 when
    unknown).
    """
    with open(path, encoding="utf-8") as handle:
        first = handle.readline().strip()
    match = _MANIFEST_HEADER.match(first)
    if match is None:
        raise DataFormatError(f"{path}: missing '# n_rows=.. n_cols=.. n_classes=..' header", line=1)
    n_rows, n_cols, n_classes = (int(g) for g in match.groups())

    frame = _read_csv_strict(path, MANIFEST_COLUMNS, skiprows=1)
    parsed = np.empty((len(frame), 4), dtype=np.int64)
    for offset, record in enumerate(frame.itertuples(index=False)):
        line = offset + 3
        row, col, feature_index = (
            _parse_int(text, path, line, name) for text, name in zip(record[:3], MANIFEST_COLUMNS)
        )
        truth = UNLABELED if record[3] == "" else _parse_int(record[3], path, line, "true_class")
        if truth != UNLABELED and not 0 <= truth < n_classes:
            raise DataFormatError(f"{path}: class out of range ({truth})", line=line)
        if n_features is not None and not 0 <= feature_index < n_features:
            raise DataFormatError(f"{path}: feature_index {feature_index} out of range", line=line)
        parsed[offset] = (row, col, feature_index, truth)

    grid = SlideGrid(
        n_rows=n_rows,
        n_cols=n_cols,
        rows=parsed[:, 0],
        cols=parsed[:, 1],
        feature_index=parsed[:, 2],
        true_class=parsed[:, 3],
        n_classes=n_classes,
    )
    logger.info("✅ Loaded manifest %s: %d × %d grid, %d cells", path, n_rows, n_cols, len(frame))
    return grid


def write_manifest(path, grid):
    """Write a SlideGrid in the manifest format read by read_manifest."""
    frame = pd.DataFrame({
        "row": grid.rows,
        "col": grid.cols,
        "feature_index": grid.feature_index,
        "true_class": grid.true_class,
    })
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# n_rows={grid.n_rows} n_cols={grid.n_cols} n_classes={grid.n_classes}\n")
        frame.to_csv(handle, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def write_model(path, models, lam=None, rho=None, class_rho=None):
    """Serialize class models to the JSON model file."""
    document = {
        "dim": int(models[0].dim),
        "n_classes": len(models),
        "lambda": lam,
        "rho": rho,
        "class_rho": None if class_rho is None else [float(r) for r in class_rho],
        "centroids": [m.centroid.tolist() for m in models],
        "precisions": [m.precision.ravel().tolist() for m in models],
        "log_dets": [m.log_det for m in models],
    }
    Path(path).write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    logger.info("✅ Wrote %d class models to %s", len(models), path)


def read_model(path):
    """Load the JSON model file.

    Returns:
        tuple: (list of ClassModel, metadata dict with lambda / rho / class_rho)
    """
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc.msg}", line=exc.lineno) from exc

    missing = {"dim", "n_classes", "centroids", "precisions", "log_dets"} - document.keys()
    if missing:
        raise DataFormatError(f"{path}: missing fields {sorted(missing)}")
    dim, n_classes = int(document["dim"]), int(document["n_classes"])
    models = []
    for k in range(n_classes):
        centroid = np.asarray(document["centroids"][k], dtype=np.float64)
        precision = np.asarray(document["precisions"][k], dtype=np.float64)
        if centroid.size != dim or precision.size != dim * dim:
            raise DataFormatError(f"{path}: class {k} arrays do not match dim {dim}")
        precision = precision.reshape(dim, dim)
        log_det = float(document["log_dets"][k])
        try:
            models.append(ClassModel(centroid, precision, log_det))
        except NumericalError as exc:
            raise NumericalError(f"{path}: {exc}", class_id=k) from exc
    meta = {key: document.get(key) for key in ("lambda", "rho", "class_rho")}
    logger.info("✅ Loaded %d class models (d=%d) from %s", n_classes, dim, path)
    return models, meta


# ---------------------------------------------------------------------------
# Posterior files
# ---------------------------------------------------------------------------

def posterior_frame(query_indices, posteriors):
    """Tabulate query posteriors as query_index,p_0..p_{K-1},argmax."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    frame = pd.DataFrame(posteriors, columns=[f"p_{k}" for k in range(posteriors.shape[1])])
    frame.insert(0, "query_index", np.asarray(query_indices, dtype=np.int64))
    frame["argmax"] = np.argmax(posteriors, axis=1)
    return frame


def write_posteriors(path, query_indices, posteriors):
    posterior_frame(query_indices, posteriors).to_csv(
        path, index=False, float_format="%.17g", lineterminator="\n"
    )


def read_posteriors(path):
    frame = pd.read_csv(path, float_precision="round_trip")
    if "query_index" not in frame.columns or "argmax" not in frame.columns:
        raise DataFormatError(f"{path}: not a posterior CSV")
    return frame


class SlideDatasetLoader:
    """Bundle loader for a feature file, its support labels and an optional manifest."""

    def __init__(self, features_path, labels_path, manifest_path=None, n_classes=None):
        """
        Initialize the dataset loader.

        Args:
            features_path (str): Path to the .fsf feature file
            labels_path (str): Path to the support "index,class" CSV
            manifest_path (str, optional): Path to a slide manifest
            n_classes (int, optional): Number of classes K; inferred otherwise
        """
        self.features_path = features_path
        self.labels_path = labels_path
        self.manifest_path = manifest_path
        self.n_classes = n_classes
        self.features = None
        self.support = None
        self.grid = None

    def load_data(self):
        """Load features, labels and manifest; returns self for chaining."""
        self.features = read_features(self.features_path)
        if self.manifest_path is not None:
            self.grid = read_manifest(self.manifest_path, n_features=self.features.n_samples)
            if self.n_classes is None:
                self.n_classes = self.grid.n_classes
        labels = read_labels(self.labels_path, self.n_classes)
        self.support = support_from_labels(self.features, labels, self.n_classes)
        self.n_classes = self.support.n_classes
        return self

    def default_query_indices(self):
        """All feature rows that are not support samples."""
        mask = np.ones(self.features.n_samples, dtype=bool)
        mask[self.support.indices] = False
        return np.flatnonzero(mask)

    def get_data_summary(self):
        """Generate a short dataset summary."""
        if self.features is None:
            raise DataFormatError("no data loaded")
        shots = np.bincount(self.support.classes, minlength=self.n_classes)
        summary = {
            "n_samples": self.features.n_samples,
            "dim": self.features.dim,
            "n_classes": self.n_classes,
            "n_support": int(self.support.indices.size),
            "shots_per_class": shots.tolist(),
        }
        if self.grid is not None:
            summary["grid"] = f"{self.grid.n_rows}x{self.grid.n_cols}"
            summary["cells"] = self.grid.n_cells
        return summary
