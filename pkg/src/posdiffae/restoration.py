"""Inference-time restoration: neighbourhood-conditioned tear inpainting and blind JPEG recovery."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from skimage.morphology import convex_hull_image

from .diffusion import NoiseSchedule, forward_noise, posterior_step, strided_timesteps
from .geometry import DEFAULT_FOREGROUND_THRESHOLD, luminance
from .networks import ModelBundle
from .training import images_to_tensor, tensor_to_images

log = logging.getLogger(__name__)

DEFAULT_INPAINT_STEPS = 50
DEFAULT_WHITENESS_THRESHOLD = 0.9
NO_NEIGHBOR = -1

# quality factor -> (noising timestep T', denoising steps N'')
JPEG_TABLE: dict[int, tuple[int, int]] = {5: (20, 50), 10: (20, 40), 15: (10, 40)}


# --------------------------------------------------------------------------- masks

def detect_tear_mask(
    section: np.ndarray,
    whiteness_threshold: float = DEFAULT_WHITENESS_THRESHOLD,
    tissue_threshold: float = DEFAULT_FOREGROUND_THRESHOLD,
    hull: Optional[np.ndarray] = None,
    hull_margin: int = 1,
) -> np.ndarray:
    """Blank pixels inside the tissue hull.

    A pixel is flagged when its luminance reaches ``whiteness_threshold`` and
    it lies inside ``hull``. By default the hull is the convex hull of the
    tissue pixels eroded by ``hull_margin`` pixels, which keeps the light
    rim of the tissue boundary out of the mask. The result is closed with a
    3x3 structuring element.
    """
    lum = luminance(section)
    if hull is None:
        tissue = lum < tissue_threshold
        if not tissue.any():
            return np.zeros(lum.shape, dtype=bool)
        hull = convex_hull_image(tissue)
        if hull_margin > 0:
            hull = ndimage.binary_erosion(hull, iterations=hull_margin)
    white = (lum >= whiteness_threshold) & hull
    if not white.any():
        return white
    closed = ndimage.binary_closing(white, structure=np.ones((3, 3), bool), border_value=0)
    return closed & hull


# --------------------------------------------------------------------------- window planning

@dataclass
class RestoreWindowPlan:
    roi_origin: tuple[int, int]
    grid: list[tuple[int, int]]
    window_shape: tuple[int, int]
    neighbor_map: list[dict[str, int]]
    n_rows: int
    n_cols: int

    def index(self, r: int, c: int) -> int:
        if 0 <= r < self.n_rows and 0 <= c < self.n_cols:
            return r * self.n_cols + c
        return NO_NEIGHBOR

    def window_slice(self, i: int) -> tuple[slice, slice]:
        r, c = self.grid[i]
        h, w = self.window_shape
        return slice(r * h, (r + 1) * h), slice(c * w, (c + 1) * w)


NEIGHBOR_OFFSETS = {"top": (-1, 0), "topleft": (-1, -1), "left": (0, -1), "topright": (-1, 1)}


def plan_windows(roi_shape: tuple[int, int], window_shape: tuple[int, int],
                 roi_origin: tuple[int, int] = (0, 0)) -> RestoreWindowPlan:
    """Non-overlapping raster-order windows covering the ROI's whole-window area."""
    h, w = roi_shape[:2]
    wh, ww = window_shape
    if h < wh or w < ww:
        raise ValueError("ROI is smaller than one window")
    n_rows, n_cols = h // wh, w // ww
    grid = [(r, c) for r in range(n_rows) for c in range(n_cols)]
    plan = RestoreWindowPlan(roi_origin, grid, (wh, ww), [], n_rows, n_cols)
    for r, c in grid:
        plan.neighbor_map.append(
            {k: plan.index(r + dr, c + dc) for k, (dr, dc) in NEIGHBOR_OFFSETS.items()}
        )
    return plan


# --------------------------------------------------------------------------- conditioning

def interpolate_condition(top: torch.Tensor, topleft: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    """Average of the latents of two neighbouring windows (``(C, h, w)`` or batched)."""
    batched = top.ndim == 4
    x = torch.stack([top, topleft]) if not batched else torch.cat([top, topleft])
    with torch.no_grad():
        z = bundle.encode(x)
    n = top.shape[0] if batched else 1
    out = 0.5 * (z[:n] + z[n:])
    return out if batched else out[0]


def choose_condition(plan: RestoreWindowPlan, i: int, artifact: Sequence[bool]) -> tuple[str, list[int]]:
    """Pick the conditioning windows for window ``i``.

    Fallback order: top + top-left, then left + top-right, then any single
    clean neighbour (top, top-left, left, top-right), then the window itself.
    """
    nb = plan.neighbor_map[i]

    def clean(k):
        j = nb[k]
        return j != NO_NEIGHBOR and not artifact[j]

    if clean("top") and clean("topleft"):
        return "top+topleft", [nb["top"], nb["topleft"]]
    if clean("left") and clean("topright"):
        return "left+topright", [nb["left"], nb["topright"]]
    for k in ("top", "topleft", "left", "topright"):
        if clean(k):
            return f"single:{k}", [nb[k]]
    return "self", [i]


# --------------------------------------------------------------------------- samplers

def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (x, True) if x.ndim == 4 else (x[None], False)


def inpaint_window(
    x: torch.Tensor,
    m: torch.Tensor,
    z_cond: torch.Tensor,
    bundle: ModelBundle,
    schedule: NoiseSchedule,
    n_steps: int = DEFAULT_INPAINT_STEPS,
    generator: Optional[torch.Generator] = None,
    clip_denoised: bool = True,
) -> torch.Tensor:
    """Mask-guided strided sampling of the masked pixels of ``x``.

    At every step the masked part follows the model's reverse trajectory while
    the unmasked part is replaced by a fresh forward-noised copy of ``x`` at
    the next level. The final output keeps unmasked pixels of ``x`` exactly.

    Args:
        x: image(s) in [-1, 1], ``(C, h, w)`` or ``(B, C, h, w)``.
        m: boolean mask, ``(h, w)``, ``(B, h, w)`` or broadcastable to ``x``;
            True marks pixels to regenerate.
        z_cond: conditioning latent(s), ``(f_dim,)`` or ``(B, f_dim)``.
        n_steps: number of strided timesteps over ``[1, T]``.

    Returns:
        The inpainted image(s), same shape as ``x``.
    """
    if n_steps > schedule.T:
        raise ValueError("n_steps exceeds the schedule length")
    xb, batched = _as_batch(x)
    m = torch.as_tensor(m, dtype=torch.bool)
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3 and (m.shape[0] == xb.shape[0] and m.shape[1:] == xb.shape[2:]):
        m = m[:, None]
    try:
        mb = torch.broadcast_to(m, xb.shape).to(xb.dtype)
    except RuntimeError as err:
        raise ValueError(f"mask shape {tuple(m.shape)} incompatible with image {tuple(xb.shape)}") from err
    z = z_cond if z_cond.ndim == 2 else z_cond[None].expand(xb.shape[0], -1)
    keep = 1.0 - mb
    gen = generator or torch.Generator().manual_seed(0)

    def noise():
        return torch.randn(xb.shape, generator=gen, dtype=xb.dtype)

    ts = strided_timesteps(n_steps, schedule.T)
    x_t = keep * forward_noise(xb, ts[0], noise(), schedule).x_t + mb * noise()
    with torch.no_grad():
        for i, t in enumerate(ts):
            x0_hat = bundle.denoise(x_t, t, z)
            if clip_denoised:
                x0_hat = x0_hat.clamp(-1.0, 1.0)
            if i == len(ts) - 1:
                x_t = x0_hat
                break
            t_prev = ts[i + 1]
            x_gen = posterior_step(x_t, x0_hat, t, schedule, t_prev)
            x_known = forward_noise(xb, t_prev, noise(), schedule).x_t
            x_t = keep * x_known + mb * x_gen
    out = keep * xb + mb * x_t
    return out if batched else out[0]


@dataclass
class TearRestoreReport:
    windows: list = field(default_factory=list)
    n_steps: int = DEFAULT_INPAINT_STEPS
    seed: int = 0
    uncovered_masked_pixels: int = 0

    def to_dict(self) -> dict:
        return {
            "windows": self.windows,
            "n_steps": self.n_steps,
            "seed": self.seed,
            "uncovered_masked_pixels": self.uncovered_masked_pixels,
        }


def restore_tear_roi(
    roi: np.ndarray,
    mask: np.ndarray,
    bundle: ModelBundle,
    schedule: NoiseSchedule,
    n_steps: int = DEFAULT_INPAINT_STEPS,
    seed: int = 0,
    window_shape: Optional[tuple[int, int]] = None,
) -> tuple[np.ndarray, TearRestoreReport]:
    """Restore the torn pixels of an ROI window by window.

    Windows are visited in raster order; each masked window is inpainted
    conditioned on the averaged latents of clean neighbouring windows (see
    :func:`choose_condition`). Neighbours are always taken from the input,
    never from restored output, so all masked windows are sampled together.

    Args:
        roi: ``(H, W, 3)`` image in [0, 1].
        mask: ``(H, W)`` boolean tear mask.
        window_shape: defaults to the bundle's patch size.

    Returns:
        ``(restored roi, report)``. Pixels outside whole windows are copied
        through; masked pixels there are counted in the report.
    """
    roi = np.asarray(roi, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != roi.shape[:2]:
        raise ValueError("mask shape does not match ROI")
    p = bundle.cfg.patch_size
    window_shape = window_shape or (p, p)
    plan = plan_windows(roi.shape[:2], window_shape)
    report = TearRestoreReport(n_steps=n_steps, seed=seed)
    covered = np.zeros(mask.shape, dtype=bool)
    covered[: plan.n_rows * window_shape[0], : plan.n_cols * window_shape[1]] = True
    report.uncovered_masked_pixels = int((mask & ~covered).sum())

    windows = [roi[plan.window_slice(i)] for i in range(len(plan.grid))]
    wmasks = [mask[plan.window_slice(i)] for i in range(len(plan.grid))]
    artifact = [bool(wm.any()) for wm in wmasks]
    out = roi.copy()
    todo = [i for i, a in enumerate(artifact) if a]
    if not todo:
        return out, report

    tensors = images_to_tensor(windows)
    with torch.no_grad():
        latents = bundle.encode(tensors)
    conds = []
    for i in todo:
        kind, sources = choose_condition(plan, i, artifact)
        if kind == "top+topleft":
            z = interpolate_condition(tensors[sources[0]], tensors[sources[1]], bundle)
        else:
            z = latents[sources].mean(dim=0)
        conds.append(z)
        r, c = plan.grid[i]
        report.windows.append({
            "row": r, "col": c, "condition": kind, "sources": [plan.grid[j] for j in sources],
            "masked_pixels": int(wmasks[i].sum()),
        })
    gen = torch.Generator().manual_seed(int(seed))
    restored = inpaint_window(
        tensors[todo], torch.from_numpy(np.stack([wmasks[i] for i in todo])),
        torch.stack(conds), bundle, schedule, n_steps, gen,
    )
    restored_np = tensor_to_images(restored)
    for k, i in enumerate(todo):
        sl = plan.window_slice(i)
        wm = wmasks[i][..., None]
        out[sl] = np.where(wm, restored_np[k], windows[i])
    return out, report


def extract_roi(mask: np.ndarray, window: int, image_shape: tuple[int, int]) -> tuple[slice, slice]:
    """Window-aligned bounding box of the mask, grown by one window for context."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty mask")
    h, w = image_shape[:2]
    y0 = max((ys.min() // window - 1) * window, 0)
    x0 = max((xs.min() // window - 1) * window, 0)
    y1 = min((ys.max() // window + 1) * window, (h // window) * window)
    x1 = min((xs.max() // window + 1) * window, (w // window) * window)
    return slice(int(y0), int(y1)), slice(int(x0), int(x1))


# --------------------------------------------------------------------------- JPEG

@dataclass(frozen=True)
class JpegRestoreConfig:
    qf: int
    t_prime: int
    n_steps: int

    def __post_init__(self):
        if self.t_prime < 0:
            raise ValueError("t_prime must be >= 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


def jpeg_config(qf: int, table: Optional[dict[int, tuple[int, int]]] = None,
                strict: bool = False) -> JpegRestoreConfig:
    """Look up ``(T', N'')`` for a quality factor, using the nearest row if needed."""
    table = JPEG_TABLE if table is None else table
    if not table:
        raise KeyError("no JPEG restoration rows configured")
    if qf in table:
        t_prime, n_steps = table[qf]
        return JpegRestoreConfig(qf, t_prime, n_steps)
    if strict:
        raise KeyError(f"no JPEG restoration row for QF {qf}")
    nearest = min(table, key=lambda k: (abs(k - qf), k))
    log.warning("QF %d not in table; using the row for QF %d", qf, nearest)
    t_prime, n_steps = table[nearest]
    return JpegRestoreConfig(qf, t_prime, n_steps)


def restore_jpeg(
    x_compr: torch.Tensor,
    cfg: JpegRestoreConfig,
    bundle: ModelBundle,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    clip_denoised: bool = True,
) -> torch.Tensor:
    """Noise a compressed image to level ``T'`` and denoise it back.

    The conditioning latent comes from the compressed image itself. Denoising
    uses ``N''`` strided steps over ``[1, T']``; when ``N'' > T'`` every
    timestep is visited once. ``T' = 0`` returns the input unchanged.

    Args:
        x_compr: image(s) in [-1, 1], ``(C, h, w)`` or ``(B, C, h, w)``.

    Returns:
        Restored image(s) clipped to [-1, 1].
    """
    if cfg.t_prime > schedule.T:
        raise ValueError("t_prime exceeds the schedule length")
    xb, batched = _as_batch(x_compr)
    if cfg.t_prime == 0:
        out = xb.clone()
        return out if batched else out[0]
    gen = generator or torch.Generator().manual_seed(0)
    with torch.no_grad():
        z = bundle.encode(xb)
        eps = torch.randn(xb.shape, generator=gen, dtype=xb.dtype)
        x_t = forward_noise(xb, cfg.t_prime, eps, schedule).x_t
        ts = strided_timesteps(cfg.n_steps, cfg.t_prime)
        for i, t in enumerate(ts):
            x0_hat = bundle.denoise(x_t, t, z)
            if clip_denoised:
                x0_hat = x0_hat.clamp(-1.0, 1.0)
            if i == len(ts) - 1:
                x_t = x0_hat
            else:
                x_t = posterior_step(x_t, x0_hat, t, schedule, ts[i + 1])
    out = x_t.clamp(-1.0, 1.0)
    return out if batched else out[0]


def restore_jpeg_images(images: Sequence[np.ndarray], qf: int, bundle: ModelBundle,
                        schedule: NoiseSchedule, seed: int = 0, chunk: int = 128) -> np.ndarray:
    """Convenience wrapper over :func:`restore_jpeg` for ``(h, w, 3)`` images in [0, 1]."""
    cfg = jpeg_config(qf)
    gen = torch.Generator().manual_seed(int(seed))
    outs = []
    for s in range(0, len(images), chunk):
        x = images_to_tensor(images[s:s + chunk])
        outs.append(tensor_to_images(restore_jpeg(x, cfg, bundle, schedule, gen)))
    return np.concatenate(outs) if outs else np.zeros((0,))
