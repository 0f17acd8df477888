"""Hierarchical window-attention transformer used as the context-path encoder.

Four stages of shifted-window attention blocks separated by 2x2 patch
merging. Stage s runs at stride ``patch_size * 2**s`` relative to the input;
the last two stages are tapped (after a per-tap LayerNorm) as the context
features consumed downstream.

Feature maps are padded to a window multiple before each block and cropped
back afterwards, so any input whose sides are at least
``patch_size * 2 ** (num_stages - 1)`` pixels is accepted — no alignment to
window size or stride is required of the caller.

Parameters are reachable under ``stage{s}.block{b}.*`` names (plus
``patch_embed.*`` and the two tap norms), which downstream checkpoint and
learning-rate grouping code relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.init import trunc_normal_

from .errors import ConfigurationError, ContractViolationError
from .featuremap import FeatureMap

ATTN_MASK_VALUE = -1e4


@dataclass
class BackboneConfig:
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 24
    depths: tuple = (2, 2, 2, 2)
    num_heads: tuple = (1, 2, 4, 8)
    window_size: int = 4
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        if self.patch_size < 1 or self.window_size < 1:
            raise ConfigurationError("patch_size and window_size must be positive")
        if len(self.depths) != len(self.num_heads):
            raise ConfigurationError(
                f"depths and num_heads must have equal length, got {len(self.depths)} vs {len(self.num_heads)}"
            )
        if len(self.depths) < 2:
            raise ConfigurationError("need at least two stages to tap two feature levels")
        for s, heads in enumerate(self.num_heads):
            dim = self.embed_dim * (2 ** s)
            if dim % heads != 0:
                raise ConfigurationError(f"stage {s}: dim {dim} not divisible by {heads} heads")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def min_input_size(self) -> int:
        # each of the (num_stages - 1) merges halves the grid, which must stay >= 1
        return self.patch_size * 2 ** (self.num_stages - 1)

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (2 ** stage)

    def stage_stride(self, stage: int) -> int:
        return self.patch_size * (2 ** stage)


class StageFeatures(NamedTuple):
    """The two tapped encoder outputs: strides 16 and 32 in the default config."""

    f_penult: FeatureMap
    f_last: FeatureMap


def window_partition(x: torch.Tensor, window_size: int) -> torch.Tensor:
    """[B, H, W, C] -> [B * num_windows, window_size, window_size, C]."""
    b, h, w, c = x.shape
    if h % window_size or w % window_size:
        raise ContractViolationError(
            f"window_partition needs dims divisible by {window_size}, got {h}x{w}"
        )
    x = x.view(b, h // window_size, window_size, w // window_size, window_size, c)
    x = x.permute(0, 1, 3, 2, 4, 5).contiguous()
    return x.view(-1, window_size, window_size, c)


def window_reverse(windows: torch.Tensor, window_size: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition` back to [B, H, W, C]."""
    b = windows.shape[0] // (h // window_size * w // window_size)
    x = windows.view(b, h // window_size, w // window_size, window_size, window_size, -1)
    x = x.permute(0, 1, 3, 2, 4, 5).contiguous()
    return x.view(b, h, w, -1)


def shifted_window_attn_mask(h: int, w: int, window_size: int, shift: int,
                             device: torch.device = torch.device("cpu")) -> torch.Tensor:
    """Mask that keeps cyclically shifted windows from attending across seams.

    Returns [num_windows, ws*ws, ws*ws] with 0 for allowed pairs and
    ATTN_MASK_VALUE for pairs that came from different image regions.
    shift == 0 means no seams: the mask is all zeros.
    """
    if not (0 <= shift < window_size):
        raise ConfigurationError(
            f"shift must satisfy 0 <= shift < window_size, got {shift} vs {window_size}"
        )
    n_windows = (h // window_size) * (w // window_size)
    n_tokens = window_size * window_size
    if shift == 0:
        return torch.zeros((n_windows, n_tokens, n_tokens), device=device)

    img_mask = torch.zeros((1, h, w, 1), device=device)
    h_slices = (slice(0, -window_size), slice(-window_size, -shift), slice(-shift, None))
    w_slices = (slice(0, -window_size), slice(-window_size, -shift), slice(-shift, None))
    cnt = 0
    for hs in h_slices:
        for ws_ in w_slices:
            img_mask[:, hs, ws_, :] = cnt
            cnt += 1
    mask_windows = window_partition(img_mask, window_size).view(-1, n_tokens)
    attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return (attn_mask != 0).to(img_mask.dtype) * ATTN_MASK_VALUE


class WindowAttention(nn.Module):
    """Multi-head self-attention inside one window, with relative position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )

        coords = torch.stack(torch.meshgrid(
            torch.arange(window_size), torch.arange(window_size), indexing="ij"
        ))  # [2, ws, ws]
        coords_flat = coords.flatten(1)
        relative = coords_flat[:, :, None] - coords_flat[:, None, :]  # [2, N, N]
        relative = relative.permute(1, 2, 0).contiguous()
        relative[:, :, 0] += window_size - 1
        relative[:, :, 1] += window_size - 1
        relative[:, :, 0] *= 2 * window_size - 1
        self.register_buffer("relative_position_index", relative.sum(-1), persistent=False)

        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each [bw, heads, N, c/heads]

        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        bias = bias.view(n, n, -1).permute(2, 0, 1).contiguous()
        attn = attn + bias.unsqueeze(0)

        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, n, n)

        attn = F.softmax(attn, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    """One (optionally shifted) window-attention block on an [B, H, W, C] map."""

    def __init__(self, dim: int, num_heads: int, window_size: int, shift: int,
                 mlp_ratio: float):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        ws = self.window_size

        shortcut = x
        x = self.norm1(x)

        # pad bottom/right so both sides divide the window size
        pad_b = (ws - h % ws) % ws
        pad_r = (ws - w % ws) % ws
        if pad_b or pad_r:
            x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        hp, wp = h + pad_b, w + pad_r

        if self.shift > 0:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
            mask = shifted_window_attn_mask(hp, wp, ws, self.shift, x.device)
        else:
            mask = None

        windows = window_partition(x, ws).view(-1, ws * ws, c)
        windows = self.attn(windows, mask)
        x = window_reverse(windows.view(-1, ws, ws, c), ws, hp, wp)

        if self.shift > 0:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        if pad_b or pad_r:
            x = x[:, :h, :w, :].contiguous()

        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection: conv with kernel = stride = patch size."""

    def __init__(self, patch_size: int, in_channels: int, embed_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.patch_size
        _, _, h, w = x.shape
        pad_b = (p - h % p) % p
        pad_r = (p - w % p) % p
        if pad_b or pad_r:
            x = F.pad(x, (0, pad_r, 0, pad_b))
        return self.proj(x).permute(0, 2, 3, 1).contiguous()  # [B, H/p, W/p, C]


class PatchMerging(nn.Module):
    """Concatenate each 2x2 neighborhood and project 4C -> 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2))
        x0 = x[:, 0::2, 0::2, :]
        x1 = x[:, 1::2, 0::2, :]
        x2 = x[:, 0::2, 1::2, :]
        x3 = x[:, 1::2, 1::2, :]
        x = torch.cat([x0, x1, x2, x3], dim=-1)
        return self.reduction(self.norm(x))


class Stage(nn.Module):
    """A run of blocks at one resolution, addressable as block0, block1, …"""

    def __init__(self, dim: int, depth: int, num_heads: int, window_size: int,
                 mlp_ratio: float):
        super().__init__()
        self.depth = depth
        for i in range(depth):
            self.add_module(f"block{i}", SwinBlock(
                dim, num_heads, window_size,
                shift=0 if i % 2 == 0 else window_size // 2,
                mlp_ratio=mlp_ratio,
            ))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i in range(self.depth):
            x = getattr(self, f"block{i}")(x)
        return x


class WindowTransformerBackbone(nn.Module):
    """Stacked window-attention stages with the last two tapped as outputs."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        self.config.validate()
        cfg = self.config

        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_channels, cfg.embed_dim)
        for s in range(cfg.num_stages):
            self.add_module(f"stage{s}", Stage(cfg.stage_dim(s), cfg.depths[s],
                                               cfg.num_heads[s], cfg.window_size,
                                               cfg.mlp_ratio))
            if s < cfg.num_stages - 1:
                self.add_module(f"merge{s}", PatchMerging(cfg.stage_dim(s)))

        self.norm_penult = nn.LayerNorm(cfg.stage_dim(cfg.num_stages - 2))
        self.norm_last = nn.LayerNorm(cfg.stage_dim(cfg.num_stages - 1))

        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m: nn.Module) -> None:
        if isinstance(m, nn.Linear):
            trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    @property
    def out_channels(self) -> tuple[int, int]:
        """(penultimate, last) tap channel counts."""
        s = self.config.num_stages
        return self.config.stage_dim(s - 2), self.config.stage_dim(s - 1)

    def forward(self, x: torch.Tensor) -> StageFeatures:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ConfigurationError(
                f"expected [B,{self.config.in_channels},H,W] input, got {tuple(x.shape)}"
            )
        h, w = int(x.shape[2]), int(x.shape[3])
        min_side = self.config.min_input_size
        if h < min_side or w < min_side:
            raise ConfigurationError(
                f"input {h}x{w} below the {min_side}-pixel minimum side length "
                f"(patch_size * 2**(num_stages-1))"
            )
        orig_hw = (h, w)

        x = self.patch_embed(x)
        penult = None
        for s in range(self.config.num_stages):
            x = getattr(self, f"stage{s}")(x)
            if s == self.config.num_stages - 2:
                penult = self.norm_penult(x)
            if s < self.config.num_stages - 1:
                x = getattr(self, f"merge{s}")(x)
        last = self.norm_last(x)

        s = self.config.num_stages
        f_penult = FeatureMap(penult.permute(0, 3, 1, 2).contiguous(),
                              stride=self.config.stage_stride(s - 2), orig_hw=orig_hw)
        f_last = FeatureMap(last.permute(0, 3, 1, 2).contiguous(),
                            stride=self.config.stage_stride(s - 1), orig_hw=orig_hw)
        return StageFeatures(f_penult=f_penult, f_last=f_last)
