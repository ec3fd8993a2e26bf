"""Minimal ViT-S/8 backbone with last-layer attention and key capture.

The module layout and parameter names follow the common self-supervised
ViT releases, so a pretrained checkpoint (state dict with ``cls_token``,
``pos_embed``, ``patch_embed.proj.*``, ``blocks.N.*``, ``norm.*``) loads
directly. Without a checkpoint the backbone is randomly initialized from
a seed, which keeps the full extraction path testable offline.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

EMBED_DIM = 384
DEPTH = 12
HEADS = 6
PATCH = 8
MLP_RATIO = 4

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.num_heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, T, C = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(B, T, 3, h, C // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(out), attn, k


class Block(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * MLP_RATIO)

    def forward(self, x):
        y, attn, k = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn, k


class VitS8(nn.Module):
    """ViT-S/8 returning, for the last attention layer, the CLS-to-patch
    attention (N, heads), per-head keys (heads, N, d), and the final
    normalized patch tokens (N, embed)."""

    def __init__(self, image_size: int = 224):
        super().__init__()
        if image_size % PATCH:
            raise ValueError(f"image size {image_size} not divisible by {PATCH}")
        self.image_size = image_size
        self.patch_embed = nn.ModuleDict(
            {"proj": nn.Conv2d(3, EMBED_DIM, kernel_size=PATCH, stride=PATCH)}
        )
        n = (image_size // PATCH) ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, EMBED_DIM))
        self.pos_embed = nn.Parameter(torch.zeros(1, n + 1, EMBED_DIM))
        self.blocks = nn.ModuleList(Block(EMBED_DIM, HEADS) for _ in range(DEPTH))
        self.norm = nn.LayerNorm(EMBED_DIM)

    def init_random(self, seed: int) -> None:
        """Deterministic random weights of the exact architecture; stands
        in for a pretrained checkpoint in offline environments.

        Query and key projections are tied per block: fully random
        projections make attention near-uniform, which averages the
        tokens into one direction over twelve blocks (rank collapse) and
        leaves no feature structure for downstream consumers. Tied q/k
        gives diagonally dominant, content-selective attention like a
        trained backbone's.
        """
        torch.manual_seed(seed)
        for param in self.parameters():
            if param.ndim > 1:
                nn.init.trunc_normal_(param, std=0.02)
            else:
                param.data.zero_()
        for module in self.modules():
            if isinstance(module, nn.LayerNorm):
                module.weight.data.fill_(1.0)
                module.bias.data.zero_()
        for block in self.blocks:
            stacked = block.attn.qkv.weight.data  # rows: q, k, v
            stacked[:EMBED_DIM] = stacked[EMBED_DIM : 2 * EMBED_DIM]

    def load_checkpoint(self, path) -> None:
        state = torch.load(path, map_location="cpu", weights_only=True)
        for wrapper_key in ("state_dict", "teacher", "model"):
            if wrapper_key in state and isinstance(state[wrapper_key], dict):
                state = state[wrapper_key]
        state = {k.removeprefix("module.").removeprefix("backbone."): v for k, v in state.items()}
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        if missing:
            raise RuntimeError(f"checkpoint lacks parameters: {missing[:4]}...")
        for key, value in own.items():
            if key == "pos_embed" and state[key].shape != value.shape:
                state[key] = interpolate_pos_embed(state[key], value.shape[1] - 1)
            elif state[key].shape != value.shape:
                raise RuntimeError(
                    f"checkpoint shape mismatch at {key}: "
                    f"{tuple(state[key].shape)} vs {tuple(value.shape)}"
                )
        self.load_state_dict({k: state[k] for k in own}, strict=True)

    @torch.inference_mode()
    def forward(self, pixels: torch.Tensor):
        B = pixels.shape[0]
        x = self.patch_embed["proj"](pixels)  # (B, C, H/8, W/8)
        x = x.flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(B, -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        last_attn = last_keys = None
        for i, block in enumerate(self.blocks):
            x, attn, keys = block(x)
            if i == DEPTH - 1:
                last_attn, last_keys = attn, keys
        x = self.norm(x)
        # CLS row of the softmaxed attention, patches only
        cls_attn = last_attn[:, :, 0, 1:].transpose(1, 2)  # (B, N, heads)
        patch_keys = last_keys[:, :, 1:, :]  # (B, heads, N, d)
        patch_tokens = x[:, 1:, :]  # (B, N, embed)
        return cls_attn, patch_keys, patch_tokens


def interpolate_pos_embed(pos_embed: torch.Tensor, n_target: int) -> torch.Tensor:
    """Bicubic resize of the grid part of a position embedding."""
    n_source = pos_embed.shape[1] - 1
    if n_source == n_target:
        return pos_embed
    side_source = int(math.isqrt(n_source))
    side_target = int(math.isqrt(n_target))
    if side_source**2 != n_source or side_target**2 != n_target:
        raise RuntimeError("position embedding is not a square grid")
    cls_part = pos_embed[:, :1]
    grid = pos_embed[:, 1:].reshape(1, side_source, side_source, -1).permute(0, 3, 1, 2)
    grid = torch.nn.functional.interpolate(
        grid, size=(side_target, side_target), mode="bicubic", align_corners=False
    )
    grid = grid.permute(0, 2, 3, 1).reshape(1, n_target, -1)
    return torch.cat([cls_part, grid], dim=1)


def build_backbone(image_size: int, checkpoint: str | None, seed: int) -> VitS8:
    model = VitS8(image_size)
    if checkpoint:
        model.load_checkpoint(checkpoint)
    else:
        model.init_random(seed)
    model.eval()
    return model
