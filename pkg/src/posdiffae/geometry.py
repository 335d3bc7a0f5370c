"""Positional targets of patches within a section.

Coordinates are image coordinates: ``x`` is the column, ``y`` the row, and
``y`` grows downwards. Angles are measured with ``atan2(y - c_y, x - c_x)`` in
degrees, so increasing angle runs clockwise on screen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

DEFAULT_FOREGROUND_THRESHOLD = 0.85
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SectionGeometry:
    centroid: tuple[float, float]
    r_max: float
    alignment_angle: float = 0.0
    section_id: str = ""

    def __post_init__(self):
        if not self.r_max > 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")

    def to_dict(self) -> dict:
        return {
            "centroid": [float(self.centroid[0]), float(self.centroid[1])],
            "r_max": float(self.r_max),
            "alignment_angle": float(self.alignment_angle),
            "section_id": self.section_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SectionGeometry":
        cx, cy = d["centroid"]
        return cls((float(cx), float(cy)), float(d["r_max"]),
                   float(d["alignment_angle"]), str(d["section_id"]))


@dataclass(frozen=True)
class PatchPosition:
    """Top-left corner plus normalised radius and angle in degrees."""

    corner: tuple[int, int]
    r0: float
    theta0: float

    def __post_init__(self):
        if not 0.0 <= self.r0 <= 1.0:
            raise ValueError(f"r0 must lie in [0, 1], got {self.r0}")
        if not 0.0 <= self.theta0 < 360.0:
            raise ValueError(f"theta0 must lie in [0, 360), got {self.theta0}")


def luminance(image: np.ndarray) -> np.ndarray:
    """Luma of an ``(H, W, 3)`` image; 2-D input is returned as float."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ LUMA_WEIGHTS
    if image.ndim == 3 and image.shape[-1] == 1:
        return image[..., 0]
    raise ValueError(f"unsupported image shape {image.shape}")


def foreground_mask(image: np.ndarray, threshold: float = DEFAULT_FOREGROUND_THRESHOLD) -> np.ndarray:
    """Tissue pixels: luminance strictly below ``threshold`` (dark on light)."""
    return luminance(image) < threshold


def compute_centroid(
    section: np.ndarray, foreground_threshold: float = DEFAULT_FOREGROUND_THRESHOLD
) -> tuple[float, float]:
    """Mean ``(x, y)`` of the foreground pixels."""
    fg = foreground_mask(section, foreground_threshold)
    if fg.size == 0 or not fg.any():
        raise ValueError("section has no foreground pixels")
    ys, xs = np.nonzero(fg)
    return float(xs.mean()), float(ys.mean())


def compute_r_max(fg: np.ndarray, centroid: tuple[float, float]) -> float:
    """Largest distance from ``centroid`` to any foreground pixel."""
    ys, xs = np.nonzero(fg)
    if xs.size == 0:
        raise ValueError("no foreground pixels")
    d2 = (xs - centroid[0]) ** 2 + (ys - centroid[1]) ** 2
    return float(math.sqrt(d2.max()))


def section_geometry(
    section: np.ndarray,
    alignment_angle: float = 0.0,
    section_id: str = "",
    foreground_threshold: float = DEFAULT_FOREGROUND_THRESHOLD,
) -> SectionGeometry:
    """Centroid and ``r_max`` of a section image, with a known alignment angle."""
    centroid = compute_centroid(section, foreground_threshold)
    r_max = compute_r_max(foreground_mask(section, foreground_threshold), centroid)
    return SectionGeometry(centroid, r_max, float(alignment_angle), section_id)


def radial_distance(corner, geom: SectionGeometry) -> float:
    """Distance from the centroid to ``corner = (x_p, y_p)`` divided by ``r_max``."""
    x_p, y_p = corner
    c_x, c_y = geom.centroid
    return math.sqrt((c_x - x_p) ** 2 + (c_y - y_p) ** 2) / geom.r_max


def wrap_degrees(angle: float) -> float:
    a = math.fmod(angle, 360.0)
    if a < 0:
        a += 360.0
    # fmod of a tiny negative number can round up to exactly 360
    return 0.0 if a >= 360.0 else a


def radial_angle(corner, geom: SectionGeometry) -> float:
    """Full-quadrant angle of the centroid-to-corner vector plus the alignment angle.

    Returns:
        Degrees in ``[0, 360)``.

    Raises:
        ValueError: if the corner coincides with the centroid.
    """
    x_p, y_p = corner
    c_x, c_y = geom.centroid
    dx, dy = x_p - c_x, y_p - c_y
    if dx == 0 and dy == 0:
        raise ValueError("angle undefined: corner coincides with the centroid")
    theta = math.degrees(math.atan2(dy, dx))
    return wrap_degrees(theta + geom.alignment_angle)


def patch_position(corner, geom: SectionGeometry) -> PatchPosition:
    """``PatchPosition`` for a corner; a corner on the centroid gets ``theta0 = alpha``."""
    r0 = radial_distance(corner, geom)
    if r0 == 0.0:
        theta0 = wrap_degrees(geom.alignment_angle)
    else:
        theta0 = radial_angle(corner, geom)
    corner = (int(corner[0]), int(corner[1]))
    return PatchPosition(corner, min(r0, 1.0), theta0)


def rotate_image(
    image: np.ndarray,
    degrees: float,
    center: Optional[tuple[float, float]] = None,
    order: int = 1,
    cval: float = 1.0,
) -> np.ndarray:
    """Rotate about ``center = (x, y)`` so that content at angle ``phi`` moves to ``phi - degrees``.

    With the clockwise angle convention above this is a counter-clockwise turn
    on screen. ``center`` defaults to the image centre.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if center is None:
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    # output (row, col) -> input (row, col)
    matrix = np.array([[c, s], [-s, c]])
    ctr = np.array([center[1], center[0]])
    offset = ctr - matrix @ ctr
    if image.ndim == 2:
        return ndimage.affine_transform(image, matrix, offset, order=order, cval=cval)
    return np.stack(
        [ndimage.affine_transform(image[..., k], matrix, offset, order=order, cval=cval)
         for k in range(image.shape[-1])],
        axis=-1,
    )


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    return float((a * b).sum()) / den if den > 0 else 0.0


def estimate_alignment_angle(
    reference: np.ndarray,
    moving: np.ndarray,
    search_range: float = 10.0,
    step: float = 1.0,
    smooth_sigma: float = 0.0,
    foreground_threshold: float = DEFAULT_FOREGROUND_THRESHOLD,
) -> float:
    """Rotation of ``moving`` relative to ``reference`` found by exhaustive search.

    Candidate angles ``0, step, ..., search_range`` are undone on ``moving``
    (about its foreground centroid) and scored by normalised cross-correlation
    of luminance against ``reference``.

    Args:
        reference: reference section.
        moving: section assumed to be ``reference`` rotated by an unknown angle.
        search_range: largest angle tried, degrees.
        step: grid spacing, degrees.
        smooth_sigma: optional Gaussian pre-smoothing, useful when the
            sections share only low-frequency structure.

    Returns:
        The best grid angle in degrees.
    """
    if reference.shape != moving.shape:
        raise ValueError("reference and moving must have the same shape")
    if step <= 0 or search_range < 0:
        raise ValueError("need step > 0 and search_range >= 0")
    ref = luminance(reference)
    mov = luminance(moving)
    if np.ptp(ref) == 0 or np.ptp(mov) == 0:
        raise ValueError("cannot align a constant image")
    if smooth_sigma > 0:
        ref = ndimage.gaussian_filter(ref, smooth_sigma)
        mov = ndimage.gaussian_filter(mov, smooth_sigma)
    center = compute_centroid(moving, foreground_threshold)
    fill = float(np.median(np.concatenate([mov[0], mov[-1], mov[:, 0], mov[:, -1]])))
    n = int(math.floor(search_range / step + 1e-9))
    best_angle, best_score = 0.0, -np.inf
    for k in range(n + 1):
        angle = k * step
        undone = rotate_image(mov, -angle, center, order=1, cval=fill)
        score = _ncc(ref, undone)
        if score > best_score + 1e-12:
            best_angle, best_score = angle, score
    return float(best_angle)
