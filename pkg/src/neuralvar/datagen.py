"""Deterministic synthetic digit corpus in MNIST's IDX layout.

Digits 0-9 are stroke polylines rasterized at 28x28 after a per-image random
affine jitter (rotation, scale, shear, translation), then corrupted with
pixel noise. The result is a drop-in stand-in for environments where the
real MNIST files are not available: same shapes, same file names, same
value range, and difficult enough that label-noise memorization and
catastrophic forgetting behave qualitatively like they do on MNIST.
"""

import os

import numpy as np

from .data import save_idx_images, save_idx_labels

SIDE = 28

# polylines in unit-square coordinates (x right, y down), one list per digit
_STROKES = {
    0: [[(0.32, 0.14), (0.62, 0.14), (0.78, 0.32), (0.78, 0.68), (0.62, 0.86),
         (0.36, 0.86), (0.22, 0.68), (0.22, 0.32), (0.32, 0.14)]],
    1: [[(0.34, 0.28), (0.52, 0.12), (0.52, 0.88)]],
    2: [[(0.24, 0.30), (0.32, 0.14), (0.62, 0.12), (0.76, 0.28), (0.66, 0.50),
         (0.24, 0.86), (0.78, 0.86)]],
    3: [[(0.24, 0.14), (0.66, 0.13), (0.76, 0.28), (0.52, 0.47)],
        [(0.52, 0.47), (0.78, 0.64), (0.68, 0.86), (0.24, 0.87)]],
    4: [[(0.66, 0.88), (0.66, 0.12), (0.22, 0.62), (0.82, 0.62)]],
    5: [[(0.74, 0.13), (0.28, 0.13), (0.26, 0.46), (0.62, 0.44), (0.78, 0.60),
         (0.76, 0.78), (0.58, 0.88), (0.24, 0.84)]],
    6: [[(0.68, 0.13), (0.38, 0.32), (0.26, 0.58), (0.28, 0.78), (0.44, 0.88),
         (0.64, 0.84), (0.74, 0.68), (0.62, 0.52), (0.40, 0.54), (0.28, 0.66)]],
    7: [[(0.22, 0.13), (0.78, 0.13), (0.42, 0.88)]],
    8: [[(0.50, 0.12), (0.70, 0.22), (0.68, 0.40), (0.50, 0.48), (0.32, 0.40),
         (0.30, 0.22), (0.50, 0.12)],
        [(0.50, 0.48), (0.74, 0.60), (0.72, 0.80), (0.50, 0.88), (0.28, 0.80),
         (0.26, 0.60), (0.50, 0.48)]],
    9: [[(0.32, 0.87), (0.62, 0.68), (0.74, 0.42), (0.72, 0.22), (0.56, 0.12),
         (0.36, 0.16), (0.26, 0.32), (0.38, 0.48), (0.60, 0.46), (0.72, 0.34)]],
}


def _segments(digit):
    segs = []
    for line in _STROKES[digit]:
        for a, b in zip(line[:-1], line[1:]):
            segs.append((a, b))
    return np.array(segs)  # (s, 2, 2)


_SEGS = {d: _segments(d) for d in range(10)}


def _render_batch(digit, n, rng, noise_std):
    """(n, 28, 28) uint8 images of one digit with per-image affine jitter."""
    segs = _SEGS[digit]  # (s, 2, 2) endpoints in unit coords
    s = segs.shape[0]

    angle = rng.uniform(-0.30, 0.30, size=n)
    scale = rng.uniform(0.72, 1.08, size=n)
    shear = rng.uniform(-0.18, 0.18, size=n)
    tx = rng.uniform(-0.09, 0.09, size=n)
    ty = rng.uniform(-0.09, 0.09, size=n)
    thick = rng.uniform(0.045, 0.085, size=n)

    ca, sa = np.cos(angle), np.sin(angle)
    # rotate(scale(shear(p))) about the glyph center (0.5, 0.5), then translate
    rel = segs - 0.5  # (s, 2, 2)
    x = rel[..., 0][None, :, :]  # (1, s, 2)
    y = rel[..., 1][None, :, :]
    xs = x + shear[:, None, None] * y
    px = (scale * ca)[:, None, None] * xs - (scale * sa)[:, None, None] * y
    py = (scale * sa)[:, None, None] * xs + (scale * ca)[:, None, None] * y
    px = px + 0.5 + tx[:, None, None]
    py = py + 0.5 + ty[:, None, None]

    # pixel centers in unit coords
    grid = (np.arange(SIDE) + 0.5) / SIDE
    gx, gy = np.meshgrid(grid, grid)  # (28, 28), gx varies along columns
    gx = gx.ravel()
    gy = gy.ravel()

    ax, ay = px[:, :, 0], py[:, :, 0]  # (n, s)
    bx, by = px[:, :, 1], py[:, :, 1]
    dx = bx - ax
    dy = by - ay
    L2 = dx * dx + dy * dy + 1e-12

    img = np.zeros((n, SIDE * SIDE))
    # distance to each segment, accumulated as a max of stroke intensities
    for j in range(s):
        t = ((gx[None, :] - ax[:, j, None]) * dx[:, j, None]
             + (gy[None, :] - ay[:, j, None]) * dy[:, j, None]) / L2[:, j, None]
        t = np.clip(t, 0.0, 1.0)
        cx = ax[:, j, None] + t * dx[:, j, None]
        cy = ay[:, j, None] + t * dy[:, j, None]
        dist = np.sqrt((gx[None, :] - cx) ** 2 + (gy[None, :] - cy) ** 2)
        ink = np.clip((thick[:, None] - dist) / 0.02 + 1.0, 0.0, 1.0)
        img = np.maximum(img, ink)

    img *= 255.0
    img += rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8).reshape(n, SIDE, SIDE)


def generate(n, rng, noise_std=24.0):
    """n labelled digit images; labels are drawn uniformly, order shuffled."""
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = np.zeros((n, SIDE, SIDE), dtype=np.uint8)
    for d in range(10):
        idx = np.nonzero(labels == d)[0]
        if idx.size:
            images[idx] = _render_batch(d, idx.size, rng, noise_std)
    return images, labels


def write_corpus(out_dir, n_train=60000, n_test=10000, seed=12345, noise_std=24.0):
    """Write train/test IDX files with MNIST's file names; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = {}
    for split, n in (("train", n_train), ("t10k", n_test)):
        images, labels = generate(n, rng, noise_std=noise_std)
        ip = os.path.join(out_dir, f"{split}-images-idx3-ubyte")
        lp = os.path.join(out_dir, f"{split}-labels-idx1-ubyte")
        save_idx_images(ip, images)
        save_idx_labels(lp, labels)
        paths[split] = (ip, lp)
    return paths
