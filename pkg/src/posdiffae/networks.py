"""Encoder, conditional denoiser and position heads.

The denoiser is a small U-shaped network predicting ``x0`` directly. The time
embedding and the semantic latent both enter every residual block as per-channel
affine modulation of the normalized features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class NetworkConfig:
    """Shape and width settings for a :class:`ModelBundle`.

    The defaults are the desk-scale configuration. ``NetworkConfig.full_scale()``
    gives the 256x256 / 512-dim configuration.
    """

    patch_size: int = 32
    channels: int = 3
    f_dim: int = 64
    base_channels: int = 16
    time_dim: int = 64
    encoder_stages: int = 4
    T: int = 1000

    def __post_init__(self):
        if self.patch_size < 4 or self.patch_size % 4:
            raise ValueError("patch_size must be a positive multiple of 4")
        if self.f_dim < 1 or self.channels < 1 or self.base_channels < 1:
            raise ValueError("f_dim, channels and base_channels must be positive")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError("time_dim must be an even integer >= 2")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @classmethod
    def full_scale(cls) -> "NetworkConfig":
        return cls(patch_size=256, f_dim=512, base_channels=64, time_dim=128)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.patch_size, self.patch_size)


def embed_time(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps.

    Args:
        t: timesteps, shape ``(B,)`` (or a scalar).
        dim: even embedding width.

    Returns:
        ``(B, dim)`` tensor, ``[sin(t w_k), cos(t w_k)]`` with geometric
        frequencies ``w_k`` from 1 down to 1/10000.
    """
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t[None]
    half = dim // 2
    k = torch.arange(half, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * k / max(half - 1, 1))
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb.to(torch.get_default_dtype())


def _norm(ch: int) -> nn.GroupNorm:
    groups = math.gcd(ch, 8)
    return nn.GroupNorm(groups, ch)


class Encoder(nn.Module):
    """Strided convolutional stack with global average pooling to ``f_dim``."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.base_channels
        widths = [c * min(2 ** i, 4) for i in range(cfg.encoder_stages)]
        layers: list[nn.Module] = [nn.Conv2d(cfg.channels, c, 3, padding=1)]
        ch = c
        for w in widths:
            layers += [_norm(ch), nn.SiLU(), nn.Conv2d(ch, w, 3, stride=2, padding=1)]
            ch = w
        layers += [_norm(ch), nn.SiLU()]
        self.features = nn.Sequential(*layers)
        self.proj = nn.Linear(ch, cfg.f_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.features(x).mean(dim=(2, 3)))


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, time_dim: int, f_dim: int):
        super().__init__()
        self.norm1 = _norm(ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.norm2 = _norm(ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.time_mod = nn.Linear(time_dim, 2 * ch_out)
        self.latent_mod = nn.Linear(f_dim, 2 * ch_out)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, t_emb, z):
        h = self.conv1(F.silu(self.norm1(x)))
        t_scale, t_shift = self.time_mod(t_emb)[:, :, None, None].chunk(2, dim=1)
        z_scale, z_shift = self.latent_mod(z)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + t_scale) + t_shift
        h = h * (1 + z_scale) + z_shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Two-level U-Net predicting ``x0`` from ``(x_t, t, z)``."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c, td, fd = cfg.base_channels, cfg.time_dim, cfg.f_dim
        self.time_dim = td
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.inp = nn.Conv2d(cfg.channels, c, 3, padding=1)
        self.down1 = ResBlock(c, c, td, fd)
        self.pool1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.down2 = ResBlock(2 * c, 2 * c, td, fd)
        self.pool2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * c, 2 * c, td, fd)
        self.unpool2 = nn.ConvTranspose2d(2 * c, 2 * c, 2, stride=2)
        self.up2 = ResBlock(4 * c, 2 * c, td, fd)
        self.unpool1 = nn.ConvTranspose2d(2 * c, c, 2, stride=2)
        self.up1 = ResBlock(2 * c, c, td, fd)
        self.out_norm = _norm(c)
        self.out = nn.Conv2d(c, cfg.channels, 3, padding=1)

    def forward(self, x_t, t, z):
        te = self.time_mlp(embed_time(t, self.time_dim).to(x_t.dtype))
        h0 = self.inp(x_t)
        h1 = self.down1(h0, te, z)
        h2 = self.down2(self.pool1(h1), te, z)
        m = self.mid(self.pool2(h2), te, z)
        u = self.up2(torch.cat([self.unpool2(m), h2], dim=1), te, z)
        u = self.up1(torch.cat([self.unpool1(u), h1], dim=1), te, z)
        return self.out(F.silu(self.out_norm(u)))


class ModelBundle(nn.Module):
    """Encoder, denoiser and the radial/angular regression heads."""

    def __init__(self, cfg: Optional[NetworkConfig] = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        self.encoder = Encoder(self.cfg)
        self.denoiser = Denoiser(self.cfg)
        self.radial_head = nn.Linear(self.cfg.f_dim, 1)
        self.angular_head = nn.Linear(self.cfg.f_dim, 1)

    def _check_image(self, x: torch.Tensor) -> None:
        if tuple(x.shape[1:]) != self.cfg.image_shape:
            raise ValueError(
                f"expected images of shape (B, {self.cfg.image_shape}), got {tuple(x.shape)}"
            )

    def encode(self, x0: torch.Tensor) -> torch.Tensor:
        """Semantic latent ``(B, f_dim)`` of images ``(B, C, h, w)`` in [-1, 1]."""
        self._check_image(x0)
        return self.encoder(x0)

    def denoise(self, x_t: torch.Tensor, t, z: torch.Tensor) -> torch.Tensor:
        """Predict ``x0`` from ``x_t`` at timestep(s) ``t`` conditioned on ``z``."""
        self._check_image(x_t)
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.cfg.T):
            raise ValueError(f"timesteps must lie in [1, {self.cfg.T}]")
        if z.shape != (x_t.shape[0], self.cfg.f_dim):
            raise ValueError(f"latent shape {tuple(z.shape)} does not match batch")
        return self.denoiser(x_t, t, z)

    def regress_position(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Radial and angular head outputs, each of shape ``(B,)``."""
        if z.shape[-1] != self.cfg.f_dim:
            raise ValueError(f"latent width {z.shape[-1]} != f_dim {self.cfg.f_dim}")
        return self.radial_head(z).squeeze(-1), self.angular_head(z).squeeze(-1)

    def forward(self, x0, x_t, t):
        z = self.encode(x0)
        r_p, theta_p = self.regress_position(z)
        return self.denoise(x_t, t, z), r_p, theta_p

    def parameter_count(self) -> dict[str, int]:
        counts = {
            name: sum(p.numel() for p in getattr(self, name).parameters())
            for name in ("encoder", "denoiser", "radial_head", "angular_head")
        }
        counts["total"] = sum(counts.values())
        return counts


def build_bundle(cfg: Optional[NetworkConfig] = None, seed: int = 0) -> ModelBundle:
    """Construct a bundle with parameters initialised from ``seed``."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        bundle = ModelBundle(cfg)
    finally:
        torch.random.set_rng_state(state)
    return bundle


def save_checkpoint(
    bundle: ModelBundle, path: Union[str, Path], manifest: Optional[dict] = None
) -> None:
    """Write parameters plus a manifest (network config and caller metadata)."""
    payload = {
        "manifest": {"network": asdict(bundle.cfg), **(manifest or {})},
        "state_dict": {k: v.detach().clone() for k, v in bundle.state_dict().items()},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelBundle, dict]:
    """Rebuild a bundle from :func:`save_checkpoint` output.

    Returns:
        ``(bundle, manifest)``; the bundle is in eval mode.
    """
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    manifest = payload["manifest"]
    bundle = ModelBundle(NetworkConfig(**manifest["network"]))
    state = payload["state_dict"]
    if state and next(iter(state.values())).dtype != torch.get_default_dtype():
        bundle = bundle.to(next(iter(state.values())).dtype)
    bundle.load_state_dict(state)
    bundle.eval()
    return bundle, manifest
