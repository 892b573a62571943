"""2-D slices of the loss surface around a set of weights.

A slice is the plane ``w(x, y) = w0 * (1 + x*d1 + y*d2)`` (coordinatewise), the
same multiplicative form used for population noise, with ``d1``, ``d2``
orthonormal random directions. Gradient arrows are expressed in the slice
coordinates: the arrow at ``(x, y)`` is ``(g . (w0*d1), g . (w0*d2))`` with
``g`` the full gradient there, i.e. the derivative of the loss along x and y.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericDivergenceError, UsageError


@dataclass(frozen=True)
class SliceSpec:
    x_min: float = -1.0
    x_max: float = 1.0
    y_min: float = -1.0
    y_max: float = 1.0
    resolution: int = 41
    arrow_count: int = 16
    arrow_radius: float = 0.1
    arrow_center: tuple = (0.5, 0.5)
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.resolution < 2:
            raise UsageError("slice resolution must be >= 2")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise UsageError("slice extents must be ordered")

    @property
    def xs(self):
        return np.linspace(self.x_min, self.x_max, self.resolution)

    @property
    def ys(self):
        return np.linspace(self.y_min, self.y_max, self.resolution)


def random_directions(params, seed, max_tries=8):
    """Two orthonormal random directions in parameter space."""
    n = np.asarray(params).size
    if n < 2:
        raise UsageError("need at least 2 parameters for a 2-D slice")
    rng = np.random.default_rng(seed)
    d1 = rng.standard_normal(n)
    d1 /= np.linalg.norm(d1)
    for _ in range(max_tries):
        d2 = rng.standard_normal(n)
        d2 -= np.dot(d2, d1) * d1
        norm = np.linalg.norm(d2)
        if norm > 1e-8:
            d2 /= norm
            # one more pass removes the residual left by rounding
            d2 -= np.dot(d2, d1) * d1
            d2 /= np.linalg.norm(d2)
            return d1, d2
    raise UsageError("could not draw a second direction independent of the first")


def slice_point(params, d1, d2, x, y):
    return params * (1.0 + x * d1 + y * d2)


@dataclass
class LossSlice:
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray  # shape (len(ys), len(xs)); NaN marks a non-finite value
    d1: np.ndarray
    d2: np.ndarray
    arrows: list = field(default_factory=list)
    arrow_points: list = field(default_factory=list)
    mean_arrow: tuple | None = None

    @property
    def finite(self):
        return np.isfinite(self.loss)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("x,y,loss\n")
            for j, y in enumerate(self.ys):
                for i, x in enumerate(self.xs):
                    v = self.loss[j, i]
                    fh.write(f"{x!r},{y!r},{v!r}\n" if np.isfinite(v) else f"{x!r},{y!r},nonfinite\n")
        return Path(path)

    def write_arrows(self, path):
        payload = {
            "points": [list(map(float, p)) for p in self.arrow_points],
            "arrows": [list(map(float, a)) for a in self.arrows],
            "mean_arrow": None if self.mean_arrow is None else list(map(float, self.mean_arrow)),
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")
        return Path(path)

    def write_ppm(self, path):
        """Binary PPM heatmap, low loss dark blue to high loss yellow; row 0 is y_max."""
        grid = self.loss[::-1]
        ok = np.isfinite(grid)
        lo = grid[ok].min() if ok.any() else 0.0
        hi = grid[ok].max() if ok.any() else 1.0
        t = np.zeros_like(grid) if hi == lo else (np.where(ok, grid, lo) - lo) / (hi - lo)
        rgb = np.stack([t, 0.2 + 0.6 * t, 0.6 * (1.0 - t)], axis=-1)
        img = (np.clip(rgb, 0, 1) * 255).astype(np.uint8)
        img[~ok] = (255, 0, 255)
        h, w = grid.shape
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(img.tobytes())
        return Path(path)


def _loss_at(model, params, batch):
    try:
        return model.loss(params, batch[0], batch[1], mode="eval")
    except (NumericDivergenceError, FloatingPointError):
        return np.nan


def loss_slice(model, params, batch, spec, directions=None):
    """Evaluate the eval-mode loss on the ``spec`` grid; ``params`` is never modified."""
    params = np.asarray(params, dtype=np.float64)
    d1, d2 = directions if directions is not None else random_directions(params, spec.seed)
    xs, ys = spec.xs, spec.ys
    grid = np.empty((len(ys), len(xs)))
    with np.errstate(all="ignore"):
        for j, y in enumerate(ys):
            for i, x in enumerate(xs):
                v = _loss_at(model, slice_point(params, d1, d2, x, y), batch)
                grid[j, i] = v if np.isfinite(v) else np.nan
    return LossSlice(xs, ys, grid, d1, d2)


def gradient_arrows(model, params, batch, center, radius, count, seed, directions):
    """Slice-coordinate gradients at ``count`` points uniform in a disc.

    Returns ``(points, arrows, mean_arrow)``.
    """
    if count < 1:
        raise UsageError("need at least one arrow")
    params = np.asarray(params, dtype=np.float64)
    d1, d2 = directions
    t1, t2 = params * d1, params * d2
    rng = np.random.default_rng(seed)
    rho = radius * np.sqrt(rng.random(count))
    theta = rng.uniform(0.0, 2.0 * np.pi, count)
    points = np.stack([center[0] + rho * np.cos(theta), center[1] + rho * np.sin(theta)], axis=1)
    arrows = []
    for x, y in points:
        _, g = model.loss_and_grad(slice_point(params, d1, d2, x, y), batch[0], batch[1], mode="eval")
        arrows.append((float(g @ t1), float(g @ t2)))
    arrows = np.asarray(arrows)
    return points, arrows, tuple(arrows.mean(axis=0))


def make_slice(model, params, batch, spec):
    """Loss grid plus arrows, as drawn in the population-gradient illustration."""
    sl = loss_slice(model, params, batch, spec)
    pts, arrows, mean_arrow = gradient_arrows(model, params, batch, spec.arrow_center,
                                              spec.arrow_radius, spec.arrow_count,
                                              spec.seed + 1, (sl.d1, sl.d2))
    sl.arrow_points, sl.arrows, sl.mean_arrow = list(pts), list(arrows), mean_arrow
    return sl
