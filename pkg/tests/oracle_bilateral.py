"""Dense reference solver for bilateral-smoothing tests.

Everything here is assembled by brute force: per-pixel quantization into
coordinate tuples, an O(V^2) adjacency scan, dense bistochastization,
and a direct dense solve of the normal equations. It shares no code with
the package's sparse path.
"""

import numpy as np


def ycbcr_pixel(r, g, b):
    return (
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b,
    )


def quantize_coords(image, params):
    """Per-pixel 5-D integer cells, one python loop per pixel."""
    height, width = image.shape[:2]
    coords = []
    for y in range(height):
        for x in range(width):
            lum, cb, cr = ycbcr_pixel(*[float(c) for c in image[y, x]])
            coords.append(
                (
                    int(np.floor(x / params.sigma_spatial)),
                    int(np.floor(y / params.sigma_spatial)),
                    int(np.floor(lum / params.sigma_luma)),
                    int(np.floor(cb / params.sigma_chroma)),
                    int(np.floor(cr / params.sigma_chroma)),
                )
            )
    return coords


def dense_solve(image, target, confidence, params):
    """Direct solve of the bistochastized smoothing system, pixel output."""
    height, width = image.shape[:2]
    coords = quantize_coords(image, params)
    vertex_of = {}
    pix2vert = []
    for c in coords:
        if c not in vertex_of:
            vertex_of[c] = len(vertex_of)
        pix2vert.append(vertex_of[c])
    pix2vert = np.array(pix2vert)
    nv = len(vertex_of)
    cells = list(vertex_of)

    blur = np.zeros((nv, nv))
    for i in range(nv):
        blur[i, i] = 2.0 * 5
        for j in range(nv):
            if i == j:
                continue
            diff = [abs(a - b) for a, b in zip(cells[i], cells[j])]
            if sum(diff) == 1:
                blur[i, j] = 1.0

    splat = np.zeros((nv, height * width))
    splat[pix2vert, np.arange(height * width)] = 1.0

    m = splat @ np.ones(height * width)
    n = np.ones(nv)
    for _ in range(10):
        n = np.sqrt(n * m / (blur @ n))
    m = n * (blur @ n)

    smooth = np.diag(m) - np.diag(n) @ blur @ np.diag(n)
    c = confidence.ravel().astype(np.float64)
    t = target.ravel().astype(np.float64)
    A = params.lam * smooth + np.diag(splat @ c)
    b = splat @ (c * t)
    x = np.linalg.solve(A, b)
    return np.clip(x[pix2vert].reshape(height, width), 0.0, 1.0), pix2vert
