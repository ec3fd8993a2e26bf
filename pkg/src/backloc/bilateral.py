"""Edge-aware mask refinement with a fast bilateral solver.

Pixels are embedded in a five-dimensional position/color space
(x, y, luma, chroma-blue, chroma-red), quantized into a sparse grid of
vertices. A mask is smoothed by solving, in vertex space, the
confidence-weighted least-squares problem

    minimize  lam * sum_ij W_ij (x_i - x_j)^2 + sum_i c_i (x_i - t_i)^2

where W is the bistochastized splat/blur/slice affinity. The normal
equations are symmetric positive definite and solved with a
Jacobi-preconditioned conjugate gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import CgDivergenceError, ConfigError, DataError, SingularSystemError
from .shards import BinaryMask, RgbImage, SoftMask, binarize

GRID_DIMS = 5
BISTOCH_ITERS = 10


@dataclass(frozen=True)
class SolverParams:
    """Defaults follow the parameterization commonly shipped with public
    mask-refinement code; they are configuration, not ground truth."""

    sigma_spatial: float = 16.0
    sigma_luma: float = 16.0
    sigma_chroma: float = 8.0
    lam: float = 128.0
    cg_tol: float = 1e-5
    cg_max_iters: int = 25
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if min(self.sigma_spatial, self.sigma_luma, self.sigma_chroma) <= 0:
            raise ConfigError("solver sigmas must be positive")
        if self.lam <= 0 or self.cg_tol <= 0:
            raise ConfigError("lam and cg_tol must be positive")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError("binarize_threshold must lie in (0, 1)")


def rgb_to_ycbcr(values: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 full-range YCbCr from uint8 RGB."""
    r = values[..., 0].astype(np.float64)
    g = values[..., 1].astype(np.float64)
    b = values[..., 2].astype(np.float64)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


class BilateralGrid:
    """Sparse bilateral grid: pixel-to-vertex map plus blur adjacency.

    Vertices are the occupied integer cells of the quantized 5-D
    coordinates; the blur stencil is a [1, 2, 1] kernel per dimension,
    realized as neighbor pairs at offset +1 along each axis.
    """

    def __init__(self, reference: RgbImage, params: SolverParams):
        img = reference.values
        height, width = img.shape[:2]
        if height == 0 or width == 0:
            raise DataError("empty reference image")
        ycc = rgb_to_ycbcr(img)
        yy, xx = np.mgrid[:height, :width]
        coords = np.stack(
            [
                np.floor(xx / params.sigma_spatial),
                np.floor(yy / params.sigma_spatial),
                np.floor(ycc[..., 0] / params.sigma_luma),
                np.floor(ycc[..., 1] / params.sigma_chroma),
                np.floor(ycc[..., 2] / params.sigma_chroma),
            ],
            axis=-1,
        ).reshape(-1, GRID_DIMS).astype(np.int64)
        coords -= coords.min(axis=0)
        extents = coords.max(axis=0) + 1
        # encode each coordinate tuple as one integer key; strides are big
        # enough that distinct tuples cannot collide
        strides = np.ones(GRID_DIMS, dtype=np.int64)
        for d in range(GRID_DIMS - 2, -1, -1):
            strides[d] = strides[d + 1] * extents[d + 1]
        keys = coords @ strides

        unique_keys, pix2vert = np.unique(keys, return_inverse=True)
        self.shape = (height, width)
        self.npixels = height * width
        self.nvertices = len(unique_keys)
        self.pixel_to_vertex = pix2vert.astype(np.int64)

        # neighbor pairs (i, j) with coord_j = coord_i + e_d, per dimension
        vertex_coords = (unique_keys[:, None] // strides[None, :]) % extents[None, :]
        pairs = []
        for d in range(GRID_DIMS):
            neighbor_keys = unique_keys + strides[d]
            pos = np.searchsorted(unique_keys, neighbor_keys)
            pos = np.clip(pos, 0, self.nvertices - 1)
            valid = (unique_keys[pos] == neighbor_keys) & (
                vertex_coords[:, d] + 1 < extents[d]
            )
            pairs.append((np.nonzero(valid)[0], pos[valid]))
        self.neighbor_pairs = pairs

        i = np.concatenate([p[0] for p in pairs])
        j = np.concatenate([p[1] for p in pairs])
        self._adjacency = sp.csr_matrix(
            (np.ones(2 * len(i)), (np.r_[i, j], np.r_[j, i])),
            shape=(self.nvertices, self.nvertices),
        )
        self._splat = sp.csr_matrix(
            (np.ones(self.npixels), (self.pixel_to_vertex, np.arange(self.npixels))),
            shape=(self.nvertices, self.npixels),
        )

    def splat(self, pixel_values: np.ndarray) -> np.ndarray:
        return self._splat @ pixel_values

    def slice(self, vertex_values: np.ndarray) -> np.ndarray:
        return vertex_values[self.pixel_to_vertex]

    def blur(self, vertex_values: np.ndarray) -> np.ndarray:
        """[1, 2, 1] blur along every grid dimension, center weight summed."""
        return 2.0 * GRID_DIMS * vertex_values + self._adjacency @ vertex_values

    def blur_matrix(self) -> sp.csr_matrix:
        return (
            2.0 * GRID_DIMS * sp.identity(self.nvertices, format="csr")
            + self._adjacency
        )


def build_grid(reference: RgbImage, params: SolverParams) -> BilateralGrid:
    return BilateralGrid(reference, params)


def bistochastize(grid: BilateralGrid, iters: int = BISTOCH_ITERS):
    """Diagonal scalings (n, m) making the blur roughly bistochastic.

    m is re-derived from the final n so that the smoothness operator has
    exact zero row sums regardless of how far the fixed point ran.
    """
    m = grid.splat(np.ones(grid.npixels))
    n = np.ones(grid.nvertices)
    for _ in range(iters):
        n = np.sqrt(n * m / grid.blur(n))
    m = n * grid.blur(n)
    return n, m


def assemble_system(grid: BilateralGrid, confidence_flat: np.ndarray, params: SolverParams):
    """Normal equations A x = splat(c*t) of the smoothing objective.

    Returns (A, n, m) with A sparse CSR, symmetric positive definite
    whenever any confidence entry is positive.
    """
    n, m = bistochastize(grid)
    smooth = sp.diags(m) - sp.diags(n) @ grid.blur_matrix() @ sp.diags(n)
    data = sp.diags(grid.splat(confidence_flat))
    return (params.lam * smooth + data).tocsr(), n, m


def pcg_solve(A: sp.csr_matrix, b: np.ndarray, x0: np.ndarray, tol: float, max_iters: int):
    """Jacobi-preconditioned conjugate gradient keeping the best iterate.

    The raw CG residual can bump transiently; the accepted iterate is the
    lowest-residual one seen, so the returned residual trace is
    non-increasing. Stops once the accepted relative residual reaches
    ``tol`` or the iteration budget runs out. Raises on breakdown (final
    residual non-finite or worse than the start).
    """
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return np.zeros_like(b), [0.0]
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise SingularSystemError("system diagonal has non-positive entries")
    inv_diag = 1.0 / diag

    x = x0.copy()
    r = b - A @ x
    res = float(np.linalg.norm(r))
    best_x, best_res = x.copy(), res
    trace = [best_res]
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iters):
        if best_res / norm_b <= tol:
            break
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0 or not np.isfinite(pAp):
            raise CgDivergenceError("CG breakdown", residual=best_res / norm_b)
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        res = float(np.linalg.norm(r))
        if res < best_res:
            best_res = res
            best_x = x.copy()
        trace.append(best_res)
        z = inv_diag * r
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next
    if not np.isfinite(best_res) or best_res > trace[0]:
        raise CgDivergenceError("CG diverged", residual=best_res / norm_b)
    return best_x, trace


class Refiner:
    """Reusable confidence-1 solver for one reference image.

    Grid construction and system assembly dominate the cost of a single
    refinement, so training loops build one Refiner per image and call it
    with many targets.
    """

    def __init__(self, reference: RgbImage, params: SolverParams):
        self.params = params
        self.grid = build_grid(reference, params)
        ones = np.ones(self.grid.npixels)
        self.system, self._n, self._m = assemble_system(self.grid, ones, params)
        self._splat_ones = self.grid.splat(ones)

    def smooth(self, target: SoftMask) -> SoftMask:
        """Solve with confidence 1 and clamp to [0, 1]."""
        t = _flat_target(target, self.grid.shape)
        b = self.grid.splat(t)
        x0 = b / np.maximum(self._splat_ones, 1e-10)
        x, _ = pcg_solve(self.system, b, x0, self.params.cg_tol, self.params.cg_max_iters)
        out = np.clip(self.grid.slice(x), 0.0, 1.0)
        return SoftMask("pixel", out.reshape(self.grid.shape))

    def refine(self, mask: SoftMask) -> BinaryMask:
        return binarize(self.smooth(mask), self.params.binarize_threshold)


def _flat_target(mask: SoftMask, shape) -> np.ndarray:
    if mask.values.shape != shape:
        raise DataError(
            f"target shape {mask.values.shape} does not match reference {shape}"
        )
    return mask.values.astype(np.float64).ravel()


def solve(
    grid: BilateralGrid,
    target: SoftMask,
    confidence: SoftMask,
    params: SolverParams,
) -> SoftMask:
    """Smooth ``target`` along the grid, anchored where confidence is high.

    Output values are clamped to [0, 1]. A confidence map that is zero
    everywhere leaves the system singular and is rejected.
    """
    t = _flat_target(target, grid.shape)
    c = _flat_target(confidence, grid.shape)
    if not np.any(c > 0):
        raise SingularSystemError("confidence is zero everywhere")
    A, _, _ = assemble_system(grid, c, params)
    b = grid.splat(c * t)
    splat_c = grid.splat(c)
    x0 = b / np.maximum(splat_c, 1e-10)
    x, _ = pcg_solve(A, b, x0, params.cg_tol, params.cg_max_iters)
    out = np.clip(grid.slice(x), 0.0, 1.0)
    return SoftMask("pixel", out.reshape(grid.shape))


def refine(reference: RgbImage, mask: SoftMask, params: SolverParams) -> BinaryMask:
    """One-shot edge-aware refinement: smooth with confidence 1, threshold."""
    grid = build_grid(reference, params)
    ones = SoftMask("pixel", np.ones(grid.shape))
    return binarize(solve(grid, mask, ones, params), params.binarize_threshold)
