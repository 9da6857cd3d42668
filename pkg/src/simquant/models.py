"""Linear stochastic models and their grid-based finite-state abstractions.

The concrete system is x+ = A x + B u + B_w w, y = C x with w ~ N(0, I) on a
bounded state box. Partitioning the box into uniform half-open cells and
picking cell centers as representative points yields a finite Markov decision
process whose transition kernel integrates the Gaussian successor density
cell by cell; mass leaving the box is absorbed by a dedicated sink state.
"""

import json
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.special import ndtr


@dataclass(frozen=True)
class Box:
    """Axis-aligned box lo <= x <= hi with finite bounds."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-D arrays of equal length")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValueError("box bounds must be finite")
        if not (lo < hi).all():
            raise ValueError("box must have positive volume on every axis")

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def halfwidth(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool((x >= self.lo).all() and (x <= self.hi).all())

    def vertices(self) -> np.ndarray:
        """All 2^dim corner points, sign-ordered."""
        corners = list(product(*zip(self.lo, self.hi)))
        return np.array(corners, dtype=float)

    def sample(self, rng, size: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))


@dataclass(frozen=True)
class LtiModel:
    """Discrete-time LTI system x+ = A x + B u + B_w w, y = C x, w ~ N(0, I)."""

    A: np.ndarray
    B: np.ndarray
    B_w: np.ndarray
    C: np.ndarray
    state_box: Box
    input_box: Box

    def __post_init__(self):
        for name in ("A", "B", "B_w", "C"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ValueError(f"B has {self.B.shape[0]} rows, expected {n}")
        if self.B_w.shape[0] != n:
            raise ValueError(f"B_w has {self.B_w.shape[0]} rows, expected {n}")
        if self.C.shape[1] != n:
            raise ValueError(f"C has {self.C.shape[1]} columns, expected {n}")
        if self.state_box.dim != n:
            raise ValueError("state_box dimension does not match A")
        if self.input_box.dim != self.B.shape[1]:
            raise ValueError("input_box dimension does not match B")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def noise_dim(self) -> int:
        return self.B_w.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class GridSpec:
    """Uniform partition resolution and the finite input set."""

    cells_per_axis: tuple
    input_samples: np.ndarray

    def __post_init__(self):
        cells = tuple(int(c) for c in np.atleast_1d(self.cells_per_axis))
        object.__setattr__(self, "cells_per_axis", cells)
        if any(c < 1 for c in cells):
            raise ValueError("every axis needs at least one cell")
        samples = np.atleast_2d(np.asarray(self.input_samples, dtype=float))
        object.__setattr__(self, "input_samples", samples)
        if samples.shape[0] < 1:
            raise ValueError("input_samples must be nonempty")


@dataclass
class GridAbstraction:
    """Finite-state abstraction of an :class:`LtiModel` on a uniform grid.

    Cells are half-open boxes [lo, hi) (closed on the global upper boundary)
    so every in-domain point belongs to exactly one cell. ``beta_vertices``
    are the corners of the symmetric quantization-offset box; ``kernel`` maps
    (cell, input) pairs to a probability row over cells plus the sink.
    """

    model: LtiModel
    edges: tuple
    representatives: np.ndarray
    cell_halfwidths: np.ndarray
    beta_vertices: np.ndarray
    input_samples: np.ndarray
    kernel: np.ndarray | None = None
    _shape: tuple = field(init=False)

    def __post_init__(self):
        self._shape = tuple(len(e) - 1 for e in self.edges)

    @property
    def n_cells(self) -> int:
        return self.representatives.shape[0]

    @property
    def sink_index(self) -> int:
        return self.n_cells

    @property
    def n_inputs(self) -> int:
        return self.input_samples.shape[0]


def _axis_interval_probs(edges: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Mass of N(mean, std^2) in each interval between consecutive edges."""
    if std > 0.0:
        cdf = ndtr((edges - mean) / std)
        return np.diff(cdf)
    # degenerate axis: point mass in the containing cell
    probs = np.zeros(len(edges) - 1)
    if edges[0] <= mean <= edges[-1]:
        idx = min(int(np.searchsorted(edges, mean, side="right")) - 1, len(edges) - 2)
        probs[max(idx, 0)] = 1.0
    return probs


def probability_row(model: LtiModel, abstraction: GridAbstraction, x_hat, u_hat) -> np.ndarray:
    """Transition distribution of the abstract successor over cells + sink.

    The successor A x_hat + B u_hat + B_w w has Gaussian law with covariance
    B_w B_w^T, which must be diagonal for the exact per-axis factorization of
    cell probabilities; the entry for cell i is the product over axes of CDF
    differences and the sink entry absorbs the mass outside the state box.
    """
    cov = model.B_w @ model.B_w.T
    off = cov - np.diag(np.diag(cov))
    if np.abs(off).max(initial=0.0) > 1e-12:
        raise ValueError(
            "effective noise covariance B_w @ B_w.T is not diagonal; exact "
            "per-axis integration of the kernel is unsupported for correlated noise"
        )
    mean = model.A @ np.asarray(x_hat, dtype=float) + model.B @ np.asarray(u_hat, dtype=float)
    stds = np.sqrt(np.diag(cov))
    axis_probs = [
        _axis_interval_probs(abstraction.edges[k], mean[k], stds[k])
        for k in range(model.n)
    ]
    cell_probs = axis_probs[0]
    for probs in axis_probs[1:]:
        cell_probs = np.outer(cell_probs, probs)
    cell_probs = cell_probs.reshape(-1)
    row = np.empty(abstraction.n_cells + 1)
    row[:-1] = cell_probs
    row[-1] = max(0.0, 1.0 - cell_probs.sum())
    return row


def build_grid(model: LtiModel, spec: GridSpec, *, build_kernel: bool = True) -> GridAbstraction:
    """Partition the state box and assemble the finite-state abstraction.

    Representative points are cell centers, which minimizes the worst-case
    quantization offset. With ``build_kernel=False`` the transition kernel is
    skipped; deviation-bound computations only need the grid geometry.
    """
    if len(spec.cells_per_axis) != model.n:
        raise ValueError(
            f"grid has {len(spec.cells_per_axis)} axes but the model state dimension is {model.n}"
        )
    for u in spec.input_samples:
        if u.shape != (model.m,):
            raise ValueError("input sample dimension does not match the model input")
        if not model.input_box.contains(u):
            raise ValueError(f"input sample {u} lies outside the input box")

    box = model.state_box
    edges = tuple(
        np.linspace(box.lo[k], box.hi[k], spec.cells_per_axis[k] + 1)
        for k in range(model.n)
    )
    halfwidths = (box.hi - box.lo) / (2.0 * np.asarray(spec.cells_per_axis))
    if not (halfwidths > 0.0).all():
        raise ValueError("zero-volume cells; check box bounds and cell counts")

    centers_1d = [0.5 * (e[:-1] + e[1:]) for e in edges]
    mesh = np.meshgrid(*centers_1d, indexing="ij")
    representatives = np.stack([m.reshape(-1) for m in mesh], axis=-1)

    signs = np.array(list(product((-1.0, 1.0), repeat=model.n)))
    beta_vertices = signs * halfwidths

    abstraction = GridAbstraction(
        model=model,
        edges=edges,
        representatives=representatives,
        cell_halfwidths=halfwidths,
        beta_vertices=beta_vertices,
        input_samples=spec.input_samples,
    )
    if build_kernel:
        n_cells = abstraction.n_cells
        kernel = np.empty((n_cells, abstraction.n_inputs, n_cells + 1))
        for i in range(n_cells):
            for j in range(abstraction.n_inputs):
                kernel[i, j] = probability_row(
                    model, abstraction, representatives[i], spec.input_samples[j]
                )
        abstraction.kernel = kernel
    return abstraction


def project(abstraction: GridAbstraction, x) -> int:
    """Index of the cell containing x, or the sink index outside the box.

    Cells are lower-closed: a point on a shared boundary belongs to the cell
    whose lower edge it is; the global upper boundary belongs to the last cell.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    multi = []
    for k, e in enumerate(abstraction.edges):
        if x[k] < e[0] or x[k] > e[-1]:
            return abstraction.sink_index
        idx = int(np.searchsorted(e, x[k], side="right")) - 1
        multi.append(min(idx, len(e) - 2))
    return int(np.ravel_multi_index(multi, abstraction._shape))


def project_batch(abstraction: GridAbstraction, X: np.ndarray) -> np.ndarray:
    """Vectorized :func:`project` over rows of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n_rows = X.shape[0]
    multi = np.zeros((len(abstraction.edges), n_rows), dtype=np.intp)
    inside = np.ones(n_rows, dtype=bool)
    for k, e in enumerate(abstraction.edges):
        inside &= (X[:, k] >= e[0]) & (X[:, k] <= e[-1])
        idx = np.searchsorted(e, X[:, k], side="right") - 1
        multi[k] = np.clip(idx, 0, len(e) - 2)
    flat = np.ravel_multi_index(multi, abstraction._shape)
    flat[~inside] = abstraction.sink_index
    return flat


def load_model(path) -> tuple[LtiModel, GridSpec | None]:
    """Read a model (and optional grid block) from its JSON description."""
    with open(path) as fh:
        data = json.load(fh)
    try:
        model = LtiModel(
            A=np.array(data["A"], dtype=float),
            B=np.array(data["B"], dtype=float),
            B_w=np.array(data["Bw"], dtype=float),
            C=np.array(data["C"], dtype=float),
            state_box=Box(np.array(data["state_box"]["lo"]), np.array(data["state_box"]["hi"])),
            input_box=Box(np.array(data["input_box"]["lo"]), np.array(data["input_box"]["hi"])),
        )
    except KeyError as exc:
        raise ValueError(f"model file {path} is missing key {exc}") from exc
    grid = None
    if "grid" in data:
        grid = grid_spec_from_dict(data["grid"])
    return model, grid


def grid_spec_from_dict(data: dict) -> GridSpec:
    try:
        return GridSpec(
            cells_per_axis=tuple(data["cells_per_axis"]),
            input_samples=np.array(data["input_samples"], dtype=float),
        )
    except KeyError as exc:
        raise ValueError(f"grid block is missing key {exc}") from exc
