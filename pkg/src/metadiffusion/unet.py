"""Space-time U-Net noise predictor conditioned on stress-strain tokens.

Feature maps are laid out as (batch, channels, frames, height, width).
Convolutions and spatial attention act on every frame independently (frames
behave like a batch axis); temporal blocks attend across frames at every
pixel. Each scalar effective stress becomes one token: a frame cross-attends
to its own token in the spatial blocks and to all tokens, with relative
position encodings, in the temporal blocks. The mean token also shifts the
diffusion-step embedding fed to every residual block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import DivergenceError


@dataclass
class DenoiserConfig:
    image_size: int = 96
    frames: int = 11
    in_channels: int = 3
    base_channels: int = 64
    channel_mults: tuple = (1, 2, 4, 8)
    attention_heads: int = 8
    head_dim: int = 32
    token_dim: int = 64
    time_embed_dim: int = 256
    groups: int = 8
    temporal: bool = True
    relative_positions: bool = True
    zero_init_attention: bool = False
    seed: int = 0

    def __post_init__(self):
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        levels = len(self.channel_mults)
        if levels < 1:
            raise ValueError("need at least one resolution level")
        if self.image_size % 2 ** (levels - 1):
            raise ValueError(f"image_size {self.image_size} cannot be halved {levels - 1} times")
        for ch in self.channels:
            if ch % self.groups:
                raise ValueError(f"{ch} channels not divisible into {self.groups} groups")

    @property
    def channels(self) -> list:
        return [self.base_channels] + [self.base_channels * m for m in self.channel_mults]

    @property
    def resolutions(self) -> list:
        return [self.image_size // 2**i for i in range(len(self.channel_mults))]

    @property
    def inner_dim(self) -> int:
        return self.attention_heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {f for f in cls.__dataclass_fields__}
        d = {k: v for k, v in d.items() if k in known}
        if "channel_mults" in d and not isinstance(d["channel_mults"], (list, tuple)):
            d["channel_mults"] = (d["channel_mults"],)
        return cls(**d)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, ...) tensors."""

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        var, mean = torch.var_mean(x, dim=1, unbiased=False, keepdim=True)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return (x - mean) * torch.rsqrt(var + self.eps) * self.gain.view(shape)


def frame_conv(dim_in, dim_out, k=3, **kw):
    return nn.Conv3d(dim_in, dim_out, (1, k, k), padding=(0, k // 2, k // 2), **kw)


class ResnetBlock(nn.Module):
    def __init__(self, dim_in, dim_out, time_dim, groups):
        super().__init__()
        self.time = nn.Sequential(nn.SiLU(), nn.Linear(time_dim, 2 * dim_out))
        self.conv1 = frame_conv(dim_in, dim_out)
        self.norm1 = nn.GroupNorm(groups, dim_out)
        self.conv2 = frame_conv(dim_out, dim_out)
        self.norm2 = nn.GroupNorm(groups, dim_out)
        self.skip = nn.Conv3d(dim_in, dim_out, 1) if dim_in != dim_out else nn.Identity()

    def forward(self, x, emb):
        scale, shift = self.time(emb)[:, :, None, None, None].chunk(2, dim=1)
        h = self.norm1(self.conv1(x))
        h = F.silu(h * (scale + 1) + shift)
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


def _frames_as_batch(x):
    b, c, f, h, w = x.shape
    return x.permute(0, 2, 1, 3, 4).reshape(b * f, c, h * w)


def _restore_frames(y, b, f, h, w):
    return y.reshape(b, f, -1, h, w).permute(0, 2, 1, 3, 4)


class SpatialSelfAttention(nn.Module):
    """Self-attention over the pixels of each frame.

    ``linear=True`` uses the elu+1 feature-map kernel (cost linear in the
    number of pixels); otherwise full softmax attention.
    """

    def __init__(self, dim, heads, dim_head, linear=True):
        super().__init__()
        self.heads, self.dim_head, self.linear = heads, dim_head, linear
        inner = heads * dim_head
        self.norm = ChannelLayerNorm(dim)
        self.to_qkv = nn.Conv1d(dim, 3 * inner, 1, bias=False)
        self.to_out = nn.Conv1d(inner, dim, 1)

    def forward(self, x):
        b, c, f, h, w = x.shape
        y = _frames_as_batch(self.norm(x))
        q, k, v = self.to_qkv(y).reshape(b * f, 3, self.heads, self.dim_head, h * w).unbind(1)
        if self.linear:
            q, k = F.elu(q) + 1, F.elu(k) + 1
            context = torch.einsum("bhdn,bhen->bhde", k, v)
            norm = torch.einsum("bhdn,bhd->bhn", q, k.sum(-1)).clamp_min(1e-6)
            out = torch.einsum("bhdn,bhde->bhen", q, context) / norm[:, :, None]
        else:
            logits = torch.einsum("bhdi,bhdj->bhij", q, k) / math.sqrt(self.dim_head)
            out = torch.einsum("bhij,bhdj->bhdi", logits.softmax(-1), v)
        out = self.to_out(out.reshape(b * f, -1, h * w))
        return _restore_frames(out, b, f, h, w)


class FrameTokenCrossAttention(nn.Module):
    """Pixels of frame k attend to the conditioning token of strain step k."""

    def __init__(self, dim, token_dim, heads, dim_head):
        super().__init__()
        self.heads, self.dim_head = heads, dim_head
        inner = heads * dim_head
        self.norm = ChannelLayerNorm(dim)
        self.to_q = nn.Conv1d(dim, inner, 1, bias=False)
        self.to_kv = nn.Linear(token_dim, 2 * inner, bias=False)
        self.to_out = nn.Conv1d(inner, dim, 1)

    def forward(self, x, tokens):
        b, c, f, h, w = x.shape
        q = self.to_q(_frames_as_batch(self.norm(x))).reshape(b * f, self.heads, self.dim_head, h * w)
        k, v = self.to_kv(tokens.reshape(b * f, 1, -1)).reshape(b * f, 1, 2, self.heads, self.dim_head).unbind(2)
        logits = torch.einsum("bhdn,bjhd->bhnj", q, k) / math.sqrt(self.dim_head)
        out = torch.einsum("bhnj,bjhd->bhdn", logits.softmax(-1), v)
        out = self.to_out(out.reshape(b * f, -1, h * w))
        return _restore_frames(out, b, f, h, w)


class RelativePositions(nn.Module):
    """Learned vectors for clipped relative offsets j - i (Shaw-style)."""

    def __init__(self, max_distance, dim_head):
        super().__init__()
        self.max_distance = max_distance
        self.keys = nn.Parameter(torch.randn(2 * max_distance + 1, dim_head) * 0.02)
        self.values = nn.Parameter(torch.randn(2 * max_distance + 1, dim_head) * 0.02)

    def forward(self, n_q, n_k):
        pos_q = torch.arange(n_q, device=self.keys.device)
        pos_k = torch.arange(n_k, device=self.keys.device)
        rel = (pos_k[None] - pos_q[:, None]).clamp(-self.max_distance, self.max_distance) + self.max_distance
        return self.keys[rel], self.values[rel]


class TemporalBlock(nn.Module):
    """Attention across strain steps at every pixel.

    Keys and values are the frame features concatenated with the projected
    conditioning tokens; both carry relative position encodings.
    """

    def __init__(self, dim, token_dim, heads, dim_head, frames, relative_positions=True):
        super().__init__()
        self.heads, self.dim_head = heads, dim_head
        inner = heads * dim_head
        self.norm = ChannelLayerNorm(dim)
        self.to_qkv = nn.Linear(dim, 3 * inner, bias=False)
        self.token_kv = nn.Linear(token_dim, 2 * inner, bias=False)
        self.to_out = nn.Linear(inner, dim)
        self.relative_positions = relative_positions
        self.frame_pos = RelativePositions(max(frames - 1, 1), dim_head)
        self.token_pos = RelativePositions(max(frames - 1, 1), dim_head)

    def forward(self, x, tokens):
        b, c, f, h, w = x.shape
        y = self.norm(x).permute(0, 3, 4, 2, 1).reshape(b, h * w, f, c)
        q, k, v = self.to_qkv(y).reshape(b, h * w, f, 3, self.heads, self.dim_head).unbind(3)
        tk, tv = self.token_kv(tokens).reshape(b, tokens.shape[1], 2, self.heads, self.dim_head).unbind(2)
        scale = 1.0 / math.sqrt(self.dim_head)
        logits_f = torch.einsum("bpihd,bpjhd->bphij", q, k)
        logits_t = torch.einsum("bpihd,bjhd->bphij", q, tk)
        if self.relative_positions:
            fk, fv = self.frame_pos(f, f)
            tkp, tvp = self.token_pos(f, tokens.shape[1])
            logits_f = logits_f + torch.einsum("bpihd,ijd->bphij", q, fk)
            logits_t = logits_t + torch.einsum("bpihd,ijd->bphij", q, tkp)
        attn = (torch.cat([logits_f, logits_t], dim=-1) * scale).softmax(-1)
        a_f, a_t = attn[..., :f], attn[..., f:]
        out = torch.einsum("bphij,bpjhd->bpihd", a_f, v) + torch.einsum("bphij,bjhd->bpihd", a_t, tv)
        if self.relative_positions:
            out = out + torch.einsum("bphij,ijd->bpihd", a_f, fv) + torch.einsum("bphij,ijd->bpihd", a_t, tvp)
        out = self.to_out(out.reshape(b, h * w, f, -1))
        return out.reshape(b, h, w, f, c).permute(0, 4, 3, 1, 2)


class SpatialStage(nn.Module):
    """Two residual blocks, pixel self-attention, then per-frame token cross-attention."""

    def __init__(self, dim_in, dim_out, cfg: DenoiserConfig):
        super().__init__()
        self.res1 = ResnetBlock(dim_in, dim_out, cfg.time_embed_dim, cfg.groups)
        self.res2 = ResnetBlock(dim_out, dim_out, cfg.time_embed_dim, cfg.groups)
        self.attn = SpatialSelfAttention(dim_out, cfg.attention_heads, cfg.head_dim, linear=True)
        self.cross = FrameTokenCrossAttention(dim_out, cfg.token_dim, cfg.attention_heads, cfg.head_dim)

    def forward(self, x, emb, tokens):
        x = self.res2(self.res1(x, emb), emb)
        x = x + self.attn(x)
        return x + self.cross(x, tokens)


class TimeConditioning(nn.Module):
    """Diffusion-step embedding plus a latent of the mean conditioning token."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.sin_dim = cfg.base_channels
        self.time_mlp = nn.Sequential(
            nn.Linear(self.sin_dim, cfg.time_embed_dim), nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim))
        self.cond_mlp = nn.Sequential(
            nn.Linear(cfg.token_dim, cfg.time_embed_dim), nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim))
        self.null_latent = nn.Parameter(torch.randn(cfg.time_embed_dim) * 0.02)

    def time_embedding(self, t):
        return self.time_mlp(sinusoidal_embedding(t, self.sin_dim).to(self.null_latent.dtype))

    def forward(self, t, tokens, null_mask=None):
        cond = self.cond_mlp(tokens.mean(dim=1))
        if null_mask is not None:
            cond = torch.where(null_mask[:, None], self.null_latent.expand_as(cond), cond)
        return self.time_embedding(t) + cond


class VideoUNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self._build(cfg)
        finally:
            torch.random.set_rng_state(gen_state)

    def _build(self, cfg):
        dims = cfg.channels
        heads, dh = cfg.attention_heads, cfg.head_dim

        def temporal(dim):
            if not cfg.temporal:
                return None
            return TemporalBlock(dim, cfg.token_dim, heads, dh, cfg.frames, cfg.relative_positions)

        self.token_embed = nn.Linear(1, cfg.token_dim)
        # the null conditioning: fixed random tokens, never trained
        self.register_buffer("null_tokens", torch.randn(cfg.frames, cfg.token_dim))
        self.conditioning = TimeConditioning(cfg)
        self.init_conv = frame_conv(cfg.in_channels, dims[0], k=7)
        self.init_temporal = temporal(dims[0])

        in_out = list(zip(dims[:-1], dims[1:]))
        n_levels = len(in_out)
        self.downs = nn.ModuleList()
        for i, (d_in, d_out) in enumerate(in_out):
            last = i == n_levels - 1
            self.downs.append(nn.ModuleDict({
                "spatial": SpatialStage(d_in, d_out, cfg),
                **({"temporal": temporal(d_out)} if cfg.temporal else {}),
                "resample": nn.Identity() if last else nn.Conv3d(d_out, d_out, (1, 4, 4), (1, 2, 2), (0, 1, 1)),
            }))
        mid = dims[-1]
        self.mid_res1 = ResnetBlock(mid, mid, cfg.time_embed_dim, cfg.groups)
        self.mid_attn = SpatialSelfAttention(mid, heads, dh, linear=False)
        self.mid_cross = FrameTokenCrossAttention(mid, cfg.token_dim, heads, dh)
        self.mid_temporal = temporal(mid)
        self.mid_res2 = ResnetBlock(mid, mid, cfg.time_embed_dim, cfg.groups)
        self.ups = nn.ModuleList()
        for i, (d_in, d_out) in enumerate(reversed(in_out)):
            last = i == n_levels - 1
            self.ups.append(nn.ModuleDict({
                "spatial": SpatialStage(2 * d_out, d_in, cfg),
                **({"temporal": temporal(d_in)} if cfg.temporal else {}),
                "resample": nn.Identity() if last else nn.Sequential(
                    nn.Upsample(scale_factor=(1, 2, 2), mode="nearest"), frame_conv(d_in, d_in)),
            }))
        self.final_res = ResnetBlock(2 * dims[0], dims[0], cfg.time_embed_dim, cfg.groups)
        self.final_conv = nn.Conv3d(dims[0], cfg.in_channels, 1)

        if cfg.zero_init_attention:
            for m in self.modules():
                if isinstance(m, (SpatialSelfAttention, FrameTokenCrossAttention, TemporalBlock)):
                    nn.init.zeros_(m.to_out.weight)
                    nn.init.zeros_(m.to_out.bias)

    def embed_tokens(self, cond, null_mask=None, batch=None):
        """Per-step tokens (B, F, token_dim); null elements get the fixed tokens."""
        if cond is None:
            if batch is None:
                raise ValueError("batch size required without conditioning")
            return self.null_tokens.expand(batch, -1, -1)
        tokens = self.token_embed(cond[..., None].to(self.null_tokens.dtype))
        if null_mask is not None:
            tokens = torch.where(null_mask[:, None, None], self.null_tokens.expand_as(tokens), tokens)
        return tokens

    def fuse_time_embedding(self, t, tokens, null_mask=None):
        return self.conditioning(t, tokens, null_mask)

    def _check(self, x, where):
        if not torch.isfinite(x).all():
            raise DivergenceError(f"non-finite activations after {where}")
        return x

    def forward(self, x, t, cond=None, null_mask=None):
        """Predict the noise in ``x`` of shape (B, frames, channels, H, W)."""
        cfg = self.cfg
        expected = (cfg.frames, cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input (B, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
        b = x.shape[0]
        if t.ndim == 0:
            t = t.expand(b)
        if cond is None:
            null_mask = torch.ones(b, dtype=torch.bool, device=x.device)
        elif cond.shape != (b, cfg.frames):
            raise ValueError(f"conditioning must have shape ({b}, {cfg.frames}), got {tuple(cond.shape)}")
        tokens = self.embed_tokens(cond, null_mask, batch=b)
        emb = self.fuse_time_embedding(t, tokens, null_mask)

        h = self.init_conv(x.permute(0, 2, 1, 3, 4))
        if self.init_temporal is not None:
            h = h + self.init_temporal(h, tokens)
        r = h
        skips = []
        for i, level in enumerate(self.downs):
            h = level["spatial"](h, emb, tokens)
            if "temporal" in level:
                h = h + level["temporal"](h, tokens)
            skips.append(h)
            h = self._check(level["resample"](h), f"down level {i}")
        h = self.mid_res1(h, emb)
        h = h + self.mid_attn(h)
        h = h + self.mid_cross(h, tokens)
        if self.mid_temporal is not None:
            h = h + self.mid_temporal(h, tokens)
        h = self._check(self.mid_res2(h, emb), "middle block")
        for i, level in enumerate(self.ups):
            h = level["spatial"](torch.cat([h, skips.pop()], dim=1), emb, tokens)
            if "temporal" in level:
                h = h + level["temporal"](h, tokens)
            h = self._check(level["resample"](h), f"up level {i}")
        h = self.final_res(torch.cat([h, r], dim=1), emb)
        out = self._check(self.final_conv(h), "output convolution")
        return out.permute(0, 2, 1, 3, 4)
