"""Composite loss and the training loop.

``total = lambda1 * l_mse + lambda2 * l_r + lambda3 * l_theta`` where ``l_mse``
is the mean squared ``x0`` reconstruction error and ``l_r``/``l_theta`` are mean
absolute errors of the position heads against normalised targets
(``theta0 / 360``). The angular error is the plain absolute difference, so a
prediction of 0.99 against a target of 0.01 costs 0.98.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
import torch

from .datagen import PatchRecord
from .diffusion import NoiseSchedule, build_schedule, to_model_range
from .networks import ModelBundle

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.001
    lambda3: float = 0.001
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    T: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    l_mse: float
    l_r: float
    l_theta: float
    total: float

    @classmethod
    def from_parts(cls, l_mse: float, l_r: float, l_theta: float, cfg: TrainConfig) -> "LossBreakdown":
        total = cfg.lambda1 * l_mse + cfg.lambda2 * l_r + cfg.lambda3 * l_theta
        return cls(float(l_mse), float(l_r), float(l_theta), float(total))


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PatchBatch:
    """Collated patches: images in [-1, 1] plus normalised position targets."""

    images: torch.Tensor
    r0: torch.Tensor
    theta0: torch.Tensor

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "PatchBatch":
        return PatchBatch(self.images[idx], self.r0[idx], self.theta0[idx])

    def to(self, dtype: torch.dtype) -> "PatchBatch":
        return PatchBatch(self.images.to(dtype), self.r0.to(dtype), self.theta0.to(dtype))


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack ``(h, w, 3)`` images in [0, 1] into a ``(B, 3, h, w)`` tensor in [-1, 1]."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return to_model_range(torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous())


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`images_to_tensor`, clipped to [0, 1]."""
    out = ((x.detach().to(torch.float32) + 1.0) / 2.0).clamp(0.0, 1.0)
    return out.permute(0, 2, 3, 1).cpu().numpy()


def collate(records: Sequence[PatchRecord]) -> PatchBatch:
    if len(records) == 0:
        raise ValueError("empty batch")
    for rec in records:
        if rec.position is None or rec.position.r0 is None or rec.position.theta0 is None:
            raise ValueError("record is missing position fields")
    r0 = torch.tensor([rec.position.r0 for rec in records], dtype=torch.float32)
    theta0 = torch.tensor([rec.position.theta0 / 360.0 for rec in records], dtype=torch.float32)
    return PatchBatch(images_to_tensor([rec.image for rec in records]), r0, theta0)


def sample_timesteps(n: int, T: int, generator: torch.Generator) -> torch.Tensor:
    """``n`` timesteps drawn uniformly from ``{1, ..., T}``."""
    return torch.randint(1, T + 1, (n,), generator=generator)


def loss_terms(
    bundle: ModelBundle,
    batch: PatchBatch,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable ``(l_mse, l_r, l_theta)`` for one batch.

    One timestep and one noise image are drawn per example from ``generator``.
    """
    x0 = batch.images
    n = x0.shape[0]
    t = sample_timesteps(n, schedule.T, generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    ab = torch.tensor(schedule.alphas_bar, dtype=x0.dtype)[t - 1].view(n, 1, 1, 1)
    x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise
    x0_hat, r_p, theta_p = bundle(x0, x_t, t)
    l_mse = ((x0_hat - x0) ** 2).mean()
    l_r = (r_p - batch.r0).abs().mean()
    l_theta = (theta_p - batch.theta0).abs().mean()
    return l_mse, l_r, l_theta


def _weighted(cfg: TrainConfig, l_mse, l_r, l_theta):
    return cfg.lambda1 * l_mse + cfg.lambda2 * l_r + cfg.lambda3 * l_theta


def _as_batch(batch) -> PatchBatch:
    if isinstance(batch, PatchBatch):
        if len(batch) == 0:
            raise ValueError("empty batch")
        return batch
    return collate(list(batch))


def compute_loss(
    bundle: ModelBundle,
    batch: Union[PatchBatch, Sequence[PatchRecord]],
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    noise_source: Union[torch.Generator, int],
) -> LossBreakdown:
    """Evaluate the composite loss without building a graph.

    Args:
        noise_source: a torch generator, or an int seed for a fresh one.
    """
    batch = _as_batch(batch)
    gen = noise_source if isinstance(noise_source, torch.Generator) else _generator(noise_source)
    with torch.no_grad():
        l_mse, l_r, l_theta = loss_terms(bundle, batch, schedule, gen)
    return LossBreakdown.from_parts(l_mse.item(), l_r.item(), l_theta.item(), cfg)


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[LossBreakdown] = field(default_factory=list)


def train(
    bundle: ModelBundle,
    dataset: Union[PatchBatch, Sequence[PatchRecord]],
    cfg: TrainConfig,
    schedule: Optional[NoiseSchedule] = None,
    history_path: Optional[Union[str, Path]] = None,
    on_epoch: Optional[Callable[[int, LossBreakdown], None]] = None,
) -> TrainResult:
    """Optimise the bundle in place with Adam on the composite loss.

    Shuffling uses ``numpy.random.default_rng(cfg.seed)`` and the noise and
    timestep draws a torch generator seeded with ``cfg.seed + 1``, so a run is
    reproducible given the initial parameters.

    Args:
        history_path: if given, one JSON line per epoch is written there.
        on_epoch: optional callback ``(epoch, mean LossBreakdown)``.

    Raises:
        TrainingDiverged: on a non-finite loss.
    """
    data = _as_batch(dataset)
    schedule = schedule or build_schedule(cfg.T)
    if schedule.T != cfg.T:
        raise ValueError("schedule length does not match cfg.T")
    rng = np.random.default_rng(cfg.seed)
    gen = _generator(cfg.seed + 1)
    opt = torch.optim.Adam(bundle.parameters(), lr=cfg.learning_rate)
    bundle.train()
    history: list[LossBreakdown] = []
    fh = open(history_path, "w") if history_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(data))
            sums = np.zeros(3)
            seen = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = torch.from_numpy(order[start:start + cfg.batch_size])
                batch = data.subset(idx)
                l_mse, l_r, l_theta = loss_terms(bundle, batch, schedule, gen)
                total = _weighted(cfg, l_mse, l_r, l_theta)
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch starting {start}: "
                        f"l_mse={l_mse.item()}, l_r={l_r.item()}, l_theta={l_theta.item()}"
                    )
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                k = len(idx)
                sums += k * np.array([l_mse.item(), l_r.item(), l_theta.item()])
                seen += k
            means = sums / seen
            rec = LossBreakdown.from_parts(*means, cfg)
            history.append(rec)
            log.info("epoch %d: %s", epoch, rec)
            if fh:
                fh.write(json.dumps({"epoch": epoch, **asdict(rec)}) + "\n")
                fh.flush()
            if on_epoch:
                on_epoch(epoch, rec)
    finally:
        if fh:
            fh.close()
    bundle.eval()
    return TrainResult(bundle, history)


def flat_gradient(
    bundle: ModelBundle,
    batch: PatchBatch,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    seed: int = 0,
) -> dict[str, torch.Tensor]:
    """Gradient of the total loss w.r.t. every parameter, keyed by name."""
    bundle.zero_grad(set_to_none=True)
    total = _weighted(cfg, *loss_terms(bundle, batch, schedule, _generator(seed)))
    total.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in bundle.named_parameters()
    }
    bundle.zero_grad(set_to_none=True)
    return grads


def gradient_check(
    bundle: ModelBundle,
    micro_batch: Union[PatchBatch, Sequence[PatchRecord]],
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    n_coords: int = 200,
    eps: float = 1e-5,
    seed: int = 0,
    param_filter: Optional[Callable[[str], bool]] = None,
    atol: float = 1e-7,
) -> float:
    """Max relative error between autograd and central finite differences.

    Runs on a float64 copy of the bundle. Noise and timesteps are re-drawn from
    the same seed for every evaluation, so the loss is a deterministic function
    of the parameters. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, atol)``.

    ``eps = 1e-5`` is close to the cube root of float64 machine precision,
    which balances truncation and roundoff of the central difference. The
    ``atol`` floor matters for coordinates whose true gradient is zero (for
    example a convolution bias followed by group normalisation): there the
    finite difference is pure roundoff, around 1e-11.

    Args:
        n_coords: number of randomly chosen parameter coordinates to check.
        param_filter: restricts the candidate parameters by name.
    """
    model = copy.deepcopy(bundle).double()
    model.eval()
    batch = _as_batch(micro_batch).to(torch.float64)
    if sum(p.numel() for p in model.parameters()) > 50_000:
        log.warning("gradient_check on a bundle with more than 5e4 parameters")
    grads = flat_gradient(model, batch, schedule, cfg, seed)
    params = dict(model.named_parameters())
    names = [n for n in params if param_filter is None or param_filter(n)]
    if not names:
        raise ValueError("no parameters selected")
    sizes = np.array([params[n].numel() for n in names])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def total_loss() -> float:
        with torch.no_grad():
            return float(_weighted(cfg, *loss_terms(model, batch, schedule, _generator(seed))))

    worst = 0.0
    for fi in flat_idx:
        k = int(np.searchsorted(offsets, fi, side="right") - 1)
        name = names[k]
        p = params[name].data.view(-1)
        j = int(fi - offsets[k])
        orig = p[j].item()
        p[j] = orig + eps
        up = total_loss()
        p[j] = orig - eps
        down = total_loss()
        p[j] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[name].view(-1)[j].item()
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)
        worst = max(worst, rel)
    return worst


def evaluate_positions(bundle: ModelBundle, batch: PatchBatch, chunk: int = 256) -> dict[str, float]:
    """Held-out MSE of the radial and angular heads (normalised targets)."""
    r_pred, t_pred = predict_positions(bundle, batch.images, chunk)
    return {
        "mse_r": float(((r_pred - batch.r0) ** 2).mean()),
        "mse_theta": float(((t_pred - batch.theta0) ** 2).mean()),
    }


def predict_positions(bundle: ModelBundle, images: torch.Tensor, chunk: int = 256):
    rs, ts = [], []
    with torch.no_grad():
        for s in range(0, images.shape[0], chunk):
            r, t = bundle.regress_position(bundle.encode(images[s:s + chunk]))
            rs.append(r)
            ts.append(t)
    return torch.cat(rs), torch.cat(ts)


def encode_images(bundle: ModelBundle, images: torch.Tensor, chunk: int = 256) -> np.ndarray:
    """Latents of a ``(B, C, h, w)`` tensor as a float64 ``(B, f_dim)`` array."""
    out = []
    with torch.no_grad():
        for s in range(0, images.shape[0], chunk):
            out.append(bundle.encode(images[s:s + chunk]).to(torch.float64).numpy())
    return np.concatenate(out) if out else np.zeros((0, bundle.cfg.f_dim))
