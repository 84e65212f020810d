"""Camera ring and orthographic depth rendering of point clouds.

Conventions: the up axis is +z. A camera at azimuth ``a`` and elevation ``e``
sits in direction ``(cos e cos a, cos e sin a, sin e)`` and looks at the
origin. The image covers ``[-1, 1]^2`` of the view plane; row 0 is the top.
Depth is mapped so that nearer surfaces are brighter: a point at view depth
``d`` (``d = +1`` is closest to the camera) gets ``DEPTH_FLOOR + (1 -
DEPTH_FLOOR) * (d + 1) / 2``. Background is exactly 0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_ELEVATION = 20.0
FRONTAL_AZIMUTHS = (10.0, 20.0, 30.0, 340.0, 350.0, 0.0)
DEPTH_FLOOR = 0.05
MIN_SIZE = 8


@dataclass(frozen=True)
class Camera:
    azimuth: float
    elevation: float = DEFAULT_ELEVATION
    size: int = 64

    def __post_init__(self):
        az = float(self.azimuth) % 360.0
        # tiny negative inputs round up to exactly 360
        object.__setattr__(self, "azimuth", 0.0 if az == 360.0 else az)


@dataclass(frozen=True)
class DepthImage:
    pixels: np.ndarray  # (S, S) in [0, 1]
    camera: Camera

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def camera_ring(n_views: int, elevation: float = DEFAULT_ELEVATION, size: int = 64) -> list[Camera]:
    """Cameras at azimuths ``i * 360 / n_views`` for ``i = 1..n_views``."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    step = 360.0 / n_views
    return [Camera(i * step, elevation, size) for i in range(1, n_views + 1)]


def frontal_subset(cameras: list[Camera]) -> list[Camera]:
    """The six frontal cameras (10, 20, 30, 340, 350, 360 degrees) of a ring."""
    want = {a % 360.0 for a in FRONTAL_AZIMUTHS}
    return [c for c in cameras if any(np.isclose(c.azimuth, a, atol=1e-9) for a in want)]


def default_radius(size: int) -> float:
    return size / 64.0


def view_coordinates(points: np.ndarray, cam: Camera) -> np.ndarray:
    """Rotate points into the camera frame: columns are (depth, u, v)."""
    a, e = np.radians(cam.azimuth), np.radians(cam.elevation)
    ca, sa, ce, se = np.cos(a), np.sin(a), np.cos(e), np.sin(e)
    forward = np.array([ce * ca, ce * sa, se])  # towards the camera
    right = np.array([-sa, ca, 0.0])
    up = np.array([-se * ca, -se * sa, ce])
    return np.asarray(points, dtype=np.float64) @ np.stack([forward, right, up], axis=1)


def render_depth(points: np.ndarray, cam: Camera, size: int | None = None, point_radius: float | None = None) -> DepthImage:
    """Z-buffered disc splatting of a normalized cloud.

    Each point lights every pixel whose center lies within ``point_radius``
    pixels of its projection, plus the pixel it falls in.
    """
    size = cam.size if size is None else int(size)
    if size < MIN_SIZE:
        raise ValueError(f"image size must be >= {MIN_SIZE}, got {size}")
    if size != cam.size:
        cam = Camera(cam.azimuth, cam.elevation, size)
    radius = default_radius(size) if point_radius is None else float(point_radius)
    image = np.zeros(size * size)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return DepthImage(image.reshape(size, size), cam)

    view = view_coordinates(points, cam)
    value = DEPTH_FLOOR + (1 - DEPTH_FLOOR) * np.clip((view[:, 0] + 1) / 2, 0.0, 1.0)
    # pixel j is centered at continuous coordinate j
    col = (view[:, 1] + 1) / 2 * size
    row = (1 - view[:, 2]) / 2 * size
    base_c, base_r = np.rint(col).astype(np.int64), np.rint(row).astype(np.int64)

    reach = int(np.ceil(radius))
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            r, c = base_r + dr, base_c + dc
            hit = (r - row) ** 2 + (c - col) ** 2 <= radius**2
            if dr == 0 and dc == 0:
                hit[:] = True
            hit &= (r >= 0) & (r < size) & (c >= 0) & (c < size)
            np.maximum.at(image, r[hit] * size + c[hit], value[hit])
    return DepthImage(image.reshape(size, size), cam)


def render_views(points: np.ndarray, cameras: list[Camera], point_radius: float | None = None) -> list[DepthImage]:
    return [render_depth(points, cam, point_radius=point_radius) for cam in cameras]


def to_pgm(image: DepthImage) -> bytes:
    """Binary P5 PGM, 8-bit, value ``round(255 * depth)``."""
    s = image.size
    data = np.rint(255 * np.clip(image.pixels, 0, 1)).astype(np.uint8)
    return f"P5\n{s} {s}\n255\n".encode() + data.tobytes()


def write_pgm(image: DepthImage, path) -> None:
    Path(path).write_bytes(to_pgm(image))


def read_pgm(data: bytes) -> np.ndarray:
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if len(data) - m.end() < w * h:
        raise ValueError(f"PGM data truncated: need {w * h} bytes, have {len(data) - m.end()}")
    pixels = np.frombuffer(data[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return pixels / maxval
