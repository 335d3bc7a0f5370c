"""Synthetic density-banded sections, patch extraction and artifact simulators.

A section is a light background with a roughly circular tissue disk. The disk is
partitioned into bands (polar rectangles); each band scatters dark "cells" at
its own density and size. A smooth stain gradient across the tissue varies the
red and blue channels with the canonical (unrotated) position, which is what
makes the angle of a patch recoverable from its appearance.

Images are ``(H, W, 3)`` float arrays in [0, 1], quantised to multiples of
1/255 so that PNG storage is lossless.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import (
    DEFAULT_FOREGROUND_THRESHOLD,
    PatchPosition,
    SectionGeometry,
    luminance,
    patch_position,
    section_geometry,
)

BACKGROUND_RGB = (0.96, 0.95, 0.96)
TISSUE_RGB = (0.80, 0.70, 0.80)
CELL_RGB = (0.30, 0.16, 0.42)
TEAR_RGB = (0.97, 0.97, 0.97)
BLACKDOT_RGB = (0.02, 0.02, 0.03)

QF_PRESET_TABLES = (5, 10, 15)
QF_PRESET_DATASET = (5, 15, 25)
GAMMA_LEVELS = (1.2, 1.3, 1.4)


@dataclass(frozen=True)
class Band:
    """One region: a polar rectangle of the tissue disk with its cell statistics.

    Radii are fractions of the disk radius, angles are canonical degrees.
    ``density`` is in cells per 1000 px^2.
    """

    label: int
    density: float
    dot_radius_range: tuple[float, float]
    r_range: tuple[float, float] = (0.0, 1.0)
    theta_range: tuple[float, float] = (0.0, 360.0)
    name: str = ""

    def contains(self, r: np.ndarray, theta: np.ndarray) -> np.ndarray:
        r_lo, r_hi = self.r_range
        t_lo, t_hi = self.theta_range
        in_r = (r >= r_lo) & ((r < r_hi) | ((r_hi >= 1.0) & (r <= r_hi)))
        return in_r & (theta >= t_lo) & (theta < t_hi)


DEFAULT_BANDS = (
    Band(0, 3.0, (2.6, 3.4), (0.00, 0.25), name="sparse"),
    Band(1, 9.0, (2.0, 2.6), (0.25, 0.50), name="medium"),
    Band(2, 18.0, (1.5, 2.0), (0.50, 0.75), name="dense"),
    Band(3, 30.0, (1.1, 1.5), (0.75, 1.00), name="very dense"),
)


@dataclass(frozen=True)
class SyntheticSectionSpec:
    size: tuple[int, int] = (512, 512)
    bands: tuple[Band, ...] = DEFAULT_BANDS
    seed: int = 0
    rotation: float = 0.0
    disk_fraction: float = 0.47
    stain_gradient: float = 0.08
    pixel_noise: float = 0.01
    section_id: str = "s000"

    def __post_init__(self):
        if any(b.density < 0 for b in self.bands):
            raise ValueError("band densities must be non-negative")
        if not 0 < self.disk_fraction <= 0.5:
            raise ValueError("disk_fraction must lie in (0, 0.5]")
        check_band_partition(self.bands)


def check_band_partition(bands: Sequence[Band], n_r: int = 97, n_theta: int = 181) -> None:
    """Raise unless every polar sample point of the unit disk lies in exactly one band."""
    if not bands:
        raise ValueError("at least one band is required")
    r = (np.arange(n_r) + 0.5) / n_r
    theta = (np.arange(n_theta) + 0.5) * 360.0 / n_theta
    rr, tt = np.meshgrid(r, theta, indexing="ij")
    hits = sum(b.contains(rr, tt).astype(int) for b in bands)
    if np.any(hits != 1):
        raise ValueError("bands do not partition the tissue disk")
    if len({b.label for b in bands}) != len(bands):
        raise ValueError("band labels must be unique")


@dataclass
class Section:
    image: np.ndarray
    labels: np.ndarray
    geometry: SectionGeometry
    spec: SyntheticSectionSpec
    dot_counts: dict[int, int] = field(default_factory=dict)


@dataclass
class PatchRecord:
    image: np.ndarray
    position: PatchPosition
    region: int
    section_id: str
    artifact_kind: str = "none"
    seed: Optional[int] = None
    mask: Optional[np.ndarray] = None

    @property
    def corner(self) -> tuple[int, int]:
        return self.position.corner


def quantize(image: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _polar_grid(h: int, w: int, center, radius: float, rotation: float):
    """Canonical polar coordinates (r normalised by ``radius``, theta degrees) per pixel."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - center[0], ys - center[1]
    r = np.hypot(dx, dy) / radius
    # undo the section rotation: rotated angle phi - rotation -> canonical phi
    theta = (np.degrees(np.arctan2(dy, dx)) + rotation) % 360.0
    return r, theta, dx, dy


def generate_section(spec: SyntheticSectionSpec) -> Section:
    """Render a synthetic section.

    Cells are scattered uniformly inside each band with a Poisson-distributed
    count of mean ``density * band_area / 1000``. The rotation is applied to
    the finished canonical layout; since bands are polar and cells are discs,
    rendering directly in the rotated frame is equivalent and avoids
    resampling blur.

    Returns:
        :class:`Section` with image, label map (-1 outside tissue) and
        geometry (centroid and ``r_max`` measured on the image).
    """
    h, w = spec.size
    rng = np.random.default_rng(spec.seed)
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    radius = spec.disk_fraction * min(h, w)
    r, theta, dx, dy = _polar_grid(h, w, center, radius, spec.rotation)
    inside = r <= 1.0

    labels = np.full((h, w), -1, dtype=np.int16)
    for band in spec.bands:
        labels[inside & band.contains(r, theta)] = band.label

    # canonical offsets, used for the stain gradient
    rot = math.radians(spec.rotation)
    cx_can = (dx * math.cos(rot) - dy * math.sin(rot)) / radius
    cy_can = (dx * math.sin(rot) + dy * math.cos(rot)) / radius

    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = BACKGROUND_RGB
    tissue = np.array(TISSUE_RGB)
    g = spec.stain_gradient
    image[inside, 0] = tissue[0] + g * cx_can[inside]
    image[inside, 1] = tissue[1]
    image[inside, 2] = tissue[2] + g * cy_can[inside]

    dot_counts: dict[int, int] = {}
    cell = np.array(CELL_RGB)
    for band in spec.bands:
        band_px = int(np.count_nonzero(labels == band.label))
        n = int(rng.poisson(band.density * band_px / 1000.0)) if band_px else 0
        dot_counts[band.label] = n
        if n == 0:
            continue
        # uniform placement inside the band by sampling its pixels
        band_idx = np.flatnonzero(labels.ravel() == band.label)
        picks = band_idx[rng.integers(0, band_idx.size, size=n)]
        jitter = rng.uniform(-0.5, 0.5, size=(n, 2))
        cys = picks // w + jitter[:, 0]
        cxs = picks % w + jitter[:, 1]
        radii = rng.uniform(*band.dot_radius_range, size=n)
        shades = rng.uniform(0.85, 1.15, size=n)
        for cx_d, cy_d, rad, shade in zip(cxs, cys, radii, shades):
            x0, x1 = max(int(cx_d - rad) - 1, 0), min(int(cx_d + rad) + 2, w)
            y0, y1 = max(int(cy_d - rad) - 1, 0), min(int(cy_d + rad) + 2, h)
            yy, xx = np.mgrid[y0:y1, x0:x1]
            disc = ((xx - cx_d) ** 2 + (yy - cy_d) ** 2 <= rad * rad) & inside[y0:y1, x0:x1]
            patch = image[y0:y1, x0:x1]
            local = np.stack([cell[0] + 0.5 * g * cx_can[y0:y1, x0:x1],
                              np.full(disc.shape, cell[1]),
                              cell[2] + 0.5 * g * cy_can[y0:y1, x0:x1]], axis=-1)
            patch[disc] = np.clip(local[disc] * shade, 0.0, 1.0)

    if spec.pixel_noise > 0:
        image[inside] += rng.normal(0.0, spec.pixel_noise, size=(int(inside.sum()), 3))
    image = quantize(image)
    geom = section_geometry(image, spec.rotation, spec.section_id)
    return Section(image, labels, geom, spec, dot_counts)


def default_section_specs(
    n_sections: int,
    seed: int = 0,
    size: tuple[int, int] = (512, 512),
    max_rotation: float = 10.0,
    bands: tuple[Band, ...] = DEFAULT_BANDS,
) -> list[SyntheticSectionSpec]:
    """Specs for a stack of sections with integer rotations in ``[0, max_rotation]``."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_sections):
        rotation = float(rng.integers(0, int(max_rotation) + 1)) if max_rotation > 0 else 0.0
        specs.append(SyntheticSectionSpec(
            size=size, bands=bands, seed=int(rng.integers(0, 2**31 - 1)),
            rotation=rotation, section_id=f"s{i:03d}",
        ))
    return specs


@dataclass
class ExtractionStats:
    total: int = 0
    kept: int = 0
    rejected: int = 0


def extract_patches(
    section: np.ndarray,
    labels: np.ndarray,
    geom: SectionGeometry,
    patch_shape: tuple[int, int] = (32, 32),
    stride: int = 32,
    stats: Optional[ExtractionStats] = None,
) -> list[PatchRecord]:
    """Raster-tile a section, keeping windows that lie entirely in one region.

    Windows touching background (label -1) or spanning two regions are
    rejected. ``stats`` (if given) is updated with the tiling counts.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ph, pw = patch_shape
    h, w = labels.shape
    if ph > h or pw > w:
        raise ValueError("patch larger than section")
    stats = stats if stats is not None else ExtractionStats()
    records = []
    for y in range(0, h - ph + 1, stride):
        for x in range(0, w - pw + 1, stride):
            stats.total += 1
            window = labels[y:y + ph, x:x + pw]
            first = int(window[0, 0])
            if first < 0 or np.any(window != first):
                stats.rejected += 1
                continue
            stats.kept += 1
            records.append(PatchRecord(
                image=section[y:y + ph, x:x + pw].copy(),
                position=patch_position((x, y), geom),
                region=first,
                section_id=geom.section_id,
            ))
    return records


def split_alternate(section_ids: Sequence[str]) -> tuple[list[str], list[str]]:
    """Every alternate section (starting with the first) trains; the rest validate."""
    ids = list(section_ids)
    return ids[0::2], ids[1::2]


# --------------------------------------------------------------------------- artifacts

def _tissue_of(image: np.ndarray, threshold: float = DEFAULT_FOREGROUND_THRESHOLD) -> np.ndarray:
    return luminance(image) < threshold


def simulate_tear(
    image: np.ndarray,
    area_fraction: float,
    rng: np.random.Generator,
    tissue: Optional[np.ndarray] = None,
    center: Optional[tuple[float, float]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Whiten a random star-shaped blob covering about ``area_fraction`` of the tissue.

    The blob boundary is a radius function with a few random low harmonics,
    scaled by bisection until the whitened tissue area matches the target.

    Returns:
        ``(torn image, mask)`` where the mask marks whitened pixels.
    """
    if not 0.0 < area_fraction < 1.0:
        raise ValueError("area_fraction must lie in (0, 1)")
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    tissue = _tissue_of(image) if tissue is None else tissue.astype(bool)
    n_tissue = int(tissue.sum())
    if n_tissue == 0:
        return image.copy(), np.zeros((h, w), dtype=bool)
    if center is None:
        ys, xs = np.nonzero(tissue)
        k = int(rng.integers(0, xs.size))
        center = (float(xs[k]), float(ys[k]))
    amps = rng.uniform(0.0, 0.25, size=3)
    phases = rng.uniform(0.0, 2 * math.pi, size=3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - center[0], yy - center[1]
    phi = np.arctan2(dy, dx)
    shape = 1.0 + sum(a * np.cos((j + 2) * phi + p) for j, (a, p) in enumerate(zip(amps, phases)))
    dist = np.hypot(dx, dy) / shape
    target = area_fraction * n_tissue
    lo, hi = 0.0, float(np.hypot(h, w)) * 2
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if np.count_nonzero((dist <= mid) & tissue) < target:
            lo = mid
        else:
            hi = mid
    mask = (dist <= hi) & tissue
    out = image.copy()
    out[mask] = TEAR_RGB
    return quantize(out), mask


def simulate_jpeg(patch: np.ndarray, qf: int) -> np.ndarray:
    """Round-trip through baseline JPEG at quality ``qf``."""
    if not 1 <= int(qf) <= 100:
        raise ValueError("qf must lie in [1, 100]")
    arr = np.round(np.clip(patch, 0, 1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(qf))
    buf.seek(0)
    decoded = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return decoded.reshape(np.shape(patch)).astype(np.float32)


def adjust_gamma(patch: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return np.power(patch, gamma)


def simulate_blackdot(
    patch: np.ndarray,
    dot_count: int,
    dot_radius: float,
    rng: np.random.Generator,
    max_tries: int = 200,
) -> tuple[np.ndarray, np.ndarray]:
    """Paste opaque dark discs at random non-overlapping positions.

    Returns:
        ``(image, mask)`` with the mask covering the pasted pixels.
    """
    patch = np.asarray(patch, dtype=np.float32)
    h, w = patch.shape[:2]
    mask = np.zeros((h, w), dtype=bool)
    if dot_count <= 0:
        return patch.copy(), mask
    if 2 * dot_radius + 1 > min(h, w):
        raise ValueError("dots do not fit in the patch")
    yy, xx = np.mgrid[0:h, 0:w]
    centers: list[tuple[float, float]] = []
    for _ in range(dot_count):
        for _ in range(max_tries):
            cx = rng.uniform(dot_radius, w - 1 - dot_radius)
            cy = rng.uniform(dot_radius, h - 1 - dot_radius)
            if all(math.hypot(cx - a, cy - b) > 2 * dot_radius + 1 for a, b in centers):
                break
        else:
            raise ValueError("could not place non-overlapping dots")
        centers.append((cx, cy))
        mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= dot_radius ** 2
    out = patch.copy()
    out[mask] = BLACKDOT_RGB
    return quantize(out), mask


# --------------------------------------------------------------------------- disk format

def save_png(path: Path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    else:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode == "L":
        return np.asarray(img) > 127
    return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


INDEX_FIELDS = ("file", "x_p", "y_p", "r0", "theta0", "region", "section_id",
                "artifact_kind", "seed")


def write_section_dir(
    root: Path, section: Section, records: Iterable[PatchRecord],
    extra_files: Optional[dict[str, np.ndarray]] = None,
) -> Path:
    """Write one section: image, labels, geometry and patch files plus ``index.jsonl``."""
    d = Path(root) / section.geometry.section_id
    (d / "patches").mkdir(parents=True, exist_ok=True)
    save_png(d / "section.png", section.image)
    Image.fromarray((section.labels + 1).astype(np.uint8), mode="L").save(d / "labels.png")
    (d / "geometry.json").write_text(json.dumps(section.geometry.to_dict(), indent=2) + "\n")
    for name, arr in (extra_files or {}).items():
        if arr.dtype == bool:
            save_mask(d / name, arr)
        else:
            save_png(d / name, arr)
    lines = []
    for i, rec in enumerate(records):
        kind = rec.artifact_kind
        fname = f"patches/{i:05d}_{kind}.png"
        save_png(d / fname, rec.image)
        if rec.mask is not None:
            save_mask(d / f"patches/{i:05d}_{kind}_mask.png", rec.mask)
        x_p, y_p = rec.corner
        row = dict(zip(INDEX_FIELDS, (
            fname, x_p, y_p, rec.position.r0, rec.position.theta0, rec.region,
            rec.section_id, kind, rec.seed,
        )))
        lines.append(json.dumps(row))
    (d / "index.jsonl").write_text("".join(line + "\n" for line in lines))
    return d


def read_section_dir(d: Path, kinds: Optional[set[str]] = None) -> tuple[SectionGeometry, list[PatchRecord]]:
    """Load the geometry and the patch records (optionally filtered by artifact kind)."""
    d = Path(d)
    geom = SectionGeometry.from_dict(json.loads((d / "geometry.json").read_text()))
    records = []
    for line in (d / "index.jsonl").read_text().splitlines():
        row = json.loads(line)
        if kinds is not None and row["artifact_kind"] not in kinds:
            continue
        mask_path = d / row["file"].replace(".png", "_mask.png")
        records.append(PatchRecord(
            image=load_png(d / row["file"]),
            position=PatchPosition((int(row["x_p"]), int(row["y_p"])),
                                   float(row["r0"]), float(row["theta0"])),
            region=int(row["region"]),
            section_id=row["section_id"],
            artifact_kind=row["artifact_kind"],
            seed=row["seed"],
            mask=load_mask(mask_path) if mask_path.exists() else None,
        ))
    return geom, records


def load_section_image(d: Path, name: str = "section.png") -> np.ndarray:
    return load_png(Path(d) / name)


def load_labels(d: Path) -> np.ndarray:
    return np.asarray(Image.open(Path(d) / "labels.png")).astype(np.int16) - 1
