"""Time-conditioned consistency encoder-decoder and the fusion head."""
import math
from typing import NamedTuple

import torch
from torch import nn
from torch import Tensor
import torch.nn.functional as F

from .errors import ValidationError
from .schedule import consistency_apply


class EncoderFeatures(NamedTuple):
    """Feature maps at full, half and quarter resolution."""

    f1: Tensor
    f2: Tensor
    f3: Tensor


def _check_spatial(x):
    if x.ndim != 4:
        raise ValidationError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 4 or w % 4:
        raise ValidationError(f"spatial size {h}x{w} must be divisible by 4")


def _as_time(t, x):
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if t.ndim == 0:
        t = t.expand(x.shape[0])
    return t.reshape(-1)


class TimeEmbedding(nn.Module):
    """Sinusoidal features of log(t) followed by a small MLP."""

    def __init__(self, dim=64, freq_dim=32):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
        arg = (0.25 * torch.log(t))[:, None] * freqs[None, :]
        return self.mlp(torch.cat([torch.cos(arg), torch.sin(arg)], dim=1))


class TimeConvStage(nn.Module):
    """conv -> GroupNorm -> (1 + scale) * h + shift -> SiLU -> conv -> SiLU."""

    def __init__(self, cin, cout, emb_dim, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(min(8, cout), cout)
        self.film = nn.Linear(emb_dim, 2 * cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x, emb):
        h = self.norm(self.conv1(x))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.act(h * (1 + scale) + shift)
        return self.act(self.conv2(h))


class ConsistencyNetwork(nn.Module):
    """F(x_t, t): 2-channel U-shaped network with three encoder and three decoder stages.

    Encoder features come out at H x W, H/2 x W/2 and H/4 x W/4 with the
    configured widths; decoder features mirror them. The input is scaled by
    1 / sqrt(t^2 + sigma_data^2) so noise levels up to T stay well conditioned.
    """

    def __init__(self, widths=(16, 32, 64), emb_dim=64, sigma_data=0.5, in_channels=2):
        super().__init__()
        w1, w2, w3 = widths
        self.widths = tuple(widths)
        self.sigma_data = sigma_data
        self.embed = TimeEmbedding(emb_dim)
        self.enc1 = TimeConvStage(in_channels, w1, emb_dim)
        self.enc2 = TimeConvStage(w1, w2, emb_dim, stride=2)
        self.enc3 = TimeConvStage(w2, w3, emb_dim, stride=2)
        self.dec3 = TimeConvStage(w3, w3, emb_dim)
        self.dec2 = TimeConvStage(w3 + w2, w2, emb_dim)
        self.dec1 = TimeConvStage(w2 + w1, w1, emb_dim)
        self.out = nn.Conv2d(w1, in_channels, 3, padding=1)

    def run(self, x, t):
        """Return (output, encoder features, decoder features)."""
        _check_spatial(x)
        t = _as_time(t, x)
        emb = self.embed(t)
        c_in = 1.0 / torch.sqrt(t * t + self.sigma_data ** 2)
        h = x * c_in[:, None, None, None]
        f1 = self.enc1(h, emb)
        f2 = self.enc2(f1, emb)
        f3 = self.enc3(f2, emb)
        d3 = self.dec3(f3, emb)
        d2 = self.dec2(torch.cat([F.interpolate(d3, scale_factor=2, mode="nearest"), f2], 1), emb)
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), f1], 1), emb)
        return self.out(d1), EncoderFeatures(f1, f2, f3), EncoderFeatures(d1, d2, d3)

    def forward(self, x, t):
        out, enc, _ = self.run(x, t)
        return out, enc


def consistency_forward(net, x_t, t):
    return net(x_t, t)


def extract_features(net, x0, schedule, source="encoder"):
    """Features of the frozen consistency network at (x_eps, eps), taking x_eps = x0."""
    if source not in ("encoder", "decoder"):
        raise ValidationError(f"source must be 'encoder' or 'decoder', got {source!r}")
    with torch.no_grad():
        _, enc, dec = net.run(x0, schedule.epsilon)
    return enc if source == "encoder" else dec


def denoise(net, x_t, t, schedule):
    """Consistency function D(x_t, t) for a ConsistencyNetwork."""
    return consistency_apply(net, x_t, t, schedule)


class SCSE(nn.Module):
    """Concurrent spatial and channel squeeze-excitation: u * cSE(u) + u * sSE(u)."""

    def __init__(self, channels, reduction=2):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ValidationError(f"channels {channels} not divisible by reduction {reduction}")
        self.cse = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, channels // reduction, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // reduction, channels, 1),
            nn.Sigmoid(),
        )
        self.sse = nn.Sequential(nn.Conv2d(channels, 1, 1), nn.Sigmoid())

    def forward(self, u):
        return u * self.cse(u) + u * self.sse(u)


def scse_block(u, reduction=2, module=None):
    """Apply scSE to ``u``; builds a fresh module when none is given."""
    if module is None:
        module = SCSE(u.shape[1], reduction).to(u)
    return module(u)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True))


class SCABlock(nn.Module):
    """3x3 conv, ReLU, scSE, then 2x nearest upsampling."""

    def __init__(self, cin, cout, reduction=2):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.scse = SCSE(cout, reduction)

    def forward(self, x):
        h = self.scse(F.relu(self.conv(x)))
        return F.interpolate(h, scale_factor=2, mode="nearest")


class FusionNetwork(nn.Module):
    """Three ConvBlocks, two SCABlocks and a Tanh output conv.

    f3 -> ConvBlock -> SCABlock(up) -> concat ConvBlock(f2) -> SCABlock(up)
    -> concat ConvBlock(f1) -> ConvT.
    """

    def __init__(self, widths=(16, 32, 64), reduction=2):
        super().__init__()
        w1, w2, w3 = widths
        self.widths = tuple(widths)
        self.cb1 = ConvBlock(w1, w1)
        self.cb2 = ConvBlock(w2, w2)
        self.cb3 = ConvBlock(w3, w3)
        self.sca3 = SCABlock(w3, w2, reduction)
        self.sca2 = SCABlock(2 * w2, w1, reduction)
        self.conv_t = nn.Conv2d(2 * w1, 1, 3, padding=1)

    def forward(self, features):
        f1, f2, f3 = features
        for c, f, k in zip(self.widths, (f1, f2, f3), (1, 2, 4)):
            if f.ndim != 4 or f.shape[1] != c:
                raise ValidationError(f"feature at 1/{k} scale has shape {tuple(f.shape)}, want {c} channels")
        h, w = f1.shape[-2:]
        if tuple(f2.shape[-2:]) != (h // 2, w // 2) or tuple(f3.shape[-2:]) != (h // 4, w // 4):
            raise ValidationError(
                f"feature scales {tuple(f1.shape[-2:])}, {tuple(f2.shape[-2:])}, {tuple(f3.shape[-2:])} "
                "are not full/half/quarter"
            )
        x = self.sca3(self.cb3(f3))
        x = self.sca2(torch.cat([x, self.cb2(f2)], 1))
        x = torch.cat([x, self.cb1(f1)], 1)
        return torch.tanh(self.conv_t(x))


def fusion_forward(head, features):
    return head(features)
