"""
Sliding Window Module
Few-Shot Slide Classification Pipeline

This module scans a tiled-slide grid with a square window, turns every
window into a transductive few-shot task whose query set is the cells inside
it, and fuses the overlapping per-window posteriors into a slide class map.

Grid units: one cell is one mini-patch position. Mini-patches of 1728 px on
an 864 px stride give 5 positions per axis inside a 5184 px window, hence
the default span of 5 cells (25 queries per window).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from matplotlib import image as mpimg
from tqdm import tqdm

from .baselines import simpleshot_posteriors
from .core import UNLABELED
from .errors import DataFormatError
from .solver import SolverConfig, solve
from .stain import write_ppm

logger = logging.getLogger(__name__)

# NT green, RE purple, AM orange, VE brown, AN yellow; unlabeled cells are black
PALETTE = np.array(
    [[0, 160, 0], [128, 0, 160], [255, 140, 0], [139, 69, 19], [255, 215, 0]],
    dtype=np.uint8,
)
SENTINEL_COLOR = np.array([0, 0, 0], dtype=np.uint8)


@dataclass(frozen=True)
class SlideGrid:
    """Cells of a tiled slide with their feature rows and optional true classes."""

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    feature_index: np.ndarray
    true_class: np.ndarray
    n_classes: int

    def __post_init__(self):
        for name in ("rows", "cols", "feature_index", "true_class"):
            array = np.array(getattr(self, name), dtype=np.int64, copy=True).ravel()
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        if not (self.rows.size == self.cols.size == self.feature_index.size == self.true_class.size):
            raise DataFormatError("slide grid columns have different lengths")
        outside = (self.rows < 0) | (self.rows >= self.n_rows) | (self.cols < 0) | (self.cols >= self.n_cols)
        if outside.any():
            i = int(np.flatnonzero(outside)[0])
            raise DataFormatError(f"cell ({self.rows[i]}, {self.cols[i]}) outside the grid")
        if np.any(self.feature_index < 0):
            raise DataFormatError("negative feature_index in slide grid")
        positions = self.rows * self.n_cols + self.cols
        values, counts = np.unique(positions, return_counts=True)
        if np.any(counts > 1):
            dup = int(values[counts > 1][0])
            raise DataFormatError(f"duplicate cell ({dup // self.n_cols}, {dup % self.n_cols})")

    @property
    def n_cells(self):
        return self.rows.size

    def cell_lookup(self):
        """(n_rows, n_cols) array of cell ids, -1 where no cell exists."""
        lookup = np.full((self.n_rows, self.n_cols), -1, dtype=np.int64)
        lookup[self.rows, self.cols] = np.arange(self.n_cells)
        return lookup

    def truth_map(self):
        truth = np.full((self.n_rows, self.n_cols), UNLABELED, dtype=np.int64)
        truth[self.rows, self.cols] = self.true_class
        return truth


@dataclass(frozen=True)
class WindowSpec:
    """Window side and stride, both in cells."""

    span: int = 5
    stride: int = 1

    def __post_init__(self):
        if self.span < 1 or not 1 <= self.stride <= self.span:
            raise DataFormatError(
                f"window needs 1 <= stride <= span, got span={self.span}, stride={self.stride}"
            )


@dataclass(frozen=True)
class Window:
    """One window: its anchor, the grid cells it covers and its task."""

    row: int
    col: int
    cell_ids: np.ndarray
    task: object


@dataclass
class ClassMap:
    """Per-cell fused posteriors, hard labels and window coverage counts."""

    posterior: np.ndarray
    argmax: np.ndarray
    coverage: np.ndarray

    @property
    def shape(self):
        return self.argmax.shape


def axis_anchors(extent, span, stride):
    """Window start positions along one axis, with a clamped final anchor."""
    if extent <= span:
        return [0]
    anchors = list(range(0, extent - span + 1, stride))
    if (extent - span) % stride:
        anchors.append(extent - span)
    return anchors


def build_windows(grid, spec, support):
    """Turn each window anchor into a few-shot task over the global support block.

    Args:
        grid (SlideGrid): Slide cells
        spec (WindowSpec): Window span and stride
        support (SupportSet): Labelled support block shared by every window

    Returns:
        tuple: (list of Window, list of skipped empty (row, col) anchors)
    """
    if grid.n_cells == 0:
        raise DataFormatError("slide grid has no cells")
    lookup = grid.cell_lookup()
    windows, skipped = [], []
    for r in axis_anchors(grid.n_rows, spec.span, spec.stride):
        for c in axis_anchors(grid.n_cols, spec.span, spec.stride):
            block = lookup[r:r + spec.span, c:c + spec.span].ravel()
            cell_ids = block[block >= 0]
            if cell_ids.size == 0:
                logger.warning("⚠️ Window at (%d, %d) holds no cells, skipped", r, c)
                skipped.append((r, c))
                continue
            task = support.task_for(grid.feature_index[cell_ids])
            windows.append(Window(r, c, cell_ids, task))
    logger.info("✅ Built %d windows (span %d, stride %d), %d skipped",
                len(windows), spec.span, spec.stride, len(skipped))
    return windows, skipped


def aggregate(window_results, grid, n_classes=None):
    """Fuse per-window query posteriors by their arithmetic mean per cell.

    Results are reduced in anchor order, so the map does not depend on the
    order in which windows finished.
    """
    n_classes = n_classes or grid.n_classes
    total = np.zeros((grid.n_rows, grid.n_cols, n_classes))
    coverage = np.zeros((grid.n_rows, grid.n_cols), dtype=np.int64)
    for window, posteriors in sorted(window_results, key=lambda item: (item[0].row, item[0].col)):
        posteriors = np.asarray(posteriors, dtype=np.float64)
        if posteriors.shape != (window.cell_ids.size, n_classes):
            raise DataFormatError(
                f"window ({window.row}, {window.col}) posteriors have shape {posteriors.shape}"
            )
        r, c = grid.rows[window.cell_ids], grid.cols[window.cell_ids]
        total[r, c] += posteriors
        coverage[r, c] += 1

    covered = coverage > 0
    posterior = np.full_like(total, np.nan)
    posterior[covered] = total[covered] / coverage[covered][:, None]
    argmax = np.full(coverage.shape, UNLABELED, dtype=np.int64)
    argmax[covered] = np.argmax(posterior[covered], axis=1)
    return ClassMap(posterior=posterior, argmax=argmax, coverage=coverage)


def class_map_frame(class_map):
    """Tabulate a class map as row,col,argmax,p_0..p_{K-1},coverage."""
    n_rows, n_cols, n_classes = class_map.posterior.shape
    rr, cc = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    frame = pd.DataFrame({"row": rr.ravel(), "col": cc.ravel(), "argmax": class_map.argmax.ravel()})
    flat = class_map.posterior.reshape(-1, n_classes)
    for k in range(n_classes):
        frame[f"p_{k}"] = flat[:, k]
    frame["coverage"] = class_map.coverage.ravel()
    return frame


def label_image(labels):
    """RGB image of a 2-D label map; classes beyond the palette wrap around."""
    labels = np.asarray(labels, dtype=np.int64)
    image = np.empty(labels.shape + (3,), dtype=np.uint8)
    labelled = labels != UNLABELED
    image[~labelled] = SENTINEL_COLOR
    image[labelled] = PALETTE[labels[labelled] % len(PALETTE)]
    return image


def class_map_image(class_map):
    """RGB image, one pixel per cell."""
    return label_image(class_map.argmax)


def render_class_map(class_map, csv_path, ppm_path, png_path=None):
    """Write the class map as CSV and as a binary PPM (plus an optional PNG preview)."""
    class_map_frame(class_map).to_csv(
        csv_path, index=False, float_format="%.17g", lineterminator="\n"
    )
    image = class_map_image(class_map)
    write_ppm(ppm_path, image)
    if png_path is not None:
        mpimg.imsave(png_path, image)
    logger.info("✅ Class map written to %s and %s", csv_path, ppm_path)


def read_class_map(csv_path):
    """Reload a class map CSV written by render_class_map."""
    frame = pd.read_csv(csv_path, float_precision="round_trip")
    prob_cols = [c for c in frame.columns if c.startswith("p_")]
    missing = {"row", "col", "argmax", "coverage"} - set(frame.columns)
    if missing or not prob_cols:
        raise DataFormatError(f"{csv_path}: not a class map CSV")
    n_rows, n_cols = int(frame["row"].max()) + 1, int(frame["col"].max()) + 1
    posterior = np.full((n_rows, n_cols, len(prob_cols)), np.nan)
    argmax = np.full((n_rows, n_cols), UNLABELED, dtype=np.int64)
    coverage = np.zeros((n_rows, n_cols), dtype=np.int64)
    r, c = frame["row"].to_numpy(), frame["col"].to_numpy()
    posterior[r, c] = frame[prob_cols].to_numpy(dtype=np.float64)
    argmax[r, c] = frame["argmax"].to_numpy()
    coverage[r, c] = frame["coverage"].to_numpy()
    return ClassMap(posterior=posterior, argmax=argmax, coverage=coverage)


class SlideSweep:
    """Sliding-window driver: windows -> per-window classification -> class map."""

    def __init__(self, grid, support, models=None, solver_config=None, window_spec=None,
                 method="paddle", variant="CL2N", n_jobs=1, progress=False):
        """
        Initialize the sweep.

        Args:
            grid (SlideGrid): Slide cells
            support (SupportSet): Global support block
            models (list of ClassModel): Class models for the transductive solver
            solver_config (SolverConfig): Solver settings
            window_spec (WindowSpec): Window span and stride
            method (str): "paddle" (transductive solver) or "simpleshot"
            variant (str): SimpleShot transform when method is "simpleshot"
            n_jobs (int): Worker threads for the per-window solves
            progress (bool): Show a progress bar on stderr
        """
        if method not in ("paddle", "simpleshot"):
            raise DataFormatError(f"unknown sweep method {method!r}")
        if method == "paddle" and models is None:
            raise DataFormatError("the transductive sweep needs class models")
        self.grid = grid
        self.support = support
        self.models = models
        self.solver_config = solver_config or SolverConfig()
        self.window_spec = window_spec or WindowSpec()
        self.method = method
        self.variant = variant
        self.n_jobs = n_jobs
        self.progress = progress
        self.windows = []
        self.skipped = []
        self.results = []

    def _classify(self, window):
        if self.method == "simpleshot":
            return simpleshot_posteriors(window.task, self.variant)
        result = solve(window.task, self.models, self.solver_config)
        return result.query_posteriors

    def run(self):
        """Classify every window and return the fused ClassMap."""
        self.windows, self.skipped = build_windows(self.grid, self.window_spec, self.support)
        iterator = tqdm(self.windows, desc="windows", disable=not self.progress, leave=False)
        posteriors = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(self._classify)(window) for window in iterator
        )
        self.results = list(zip(self.windows, posteriors))
        return aggregate(self.results, self.grid, self.support.n_classes)
