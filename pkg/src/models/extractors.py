"""
Feature Extractors

CNN path (local features) and ViT path (global features) of the dual-path
block. Both map a [B, C, D, H, W] grid to a fusion-space vector [B, d_f].
"""

import torch
import torch.nn as nn

from src.utils.exceptions import ConfigError, ContractViolation

MIN_CNN_SIZE = 8


def _slice_conv(in_channels, out_channels, stride):
    # 3x3 in-plane, 1 along depth: every slice is convolved on its own
    return nn.Conv3d(
        in_channels,
        out_channels,
        kernel_size=(1, 3, 3),
        stride=(1, stride, stride),
        padding=(0, 1, 1),
    )


class ResidualStage(nn.Module):
    """Strided residual block used by the `residual` CNN kind"""

    def __init__(self, in_channels, out_channels, slope):
        super().__init__()
        self.conv1 = _slice_conv(in_channels, out_channels, stride=2)
        self.conv2 = _slice_conv(out_channels, out_channels, stride=1)
        self.shortcut = nn.Conv3d(in_channels, out_channels, kernel_size=1, stride=(1, 2, 2))
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        out = self.act(self.conv1(x))
        out = self.conv2(out)
        return self.act(out + self.shortcut(x))


class CNNExtractor(nn.Module):
    """Three stride-2 3x3 stages with Leaky ReLU, global average pool, projection to d_f"""

    def __init__(self, in_channels, channels, fusion_dim, leaky_slope=0.01, kind="plain"):
        """
        Args:
            in_channels: Channels produced by the CNN-path 1x1 convolution
            channels: Output channels of the three stages
            fusion_dim: Length of the output vector
            leaky_slope: Negative slope of the Leaky ReLU
            kind: "plain" or "residual"
        """
        super().__init__()
        stages = []
        c_in = in_channels
        for c_out in channels:
            if kind == "plain":
                stages.append(nn.Sequential(_slice_conv(c_in, c_out, stride=2), nn.LeakyReLU(leaky_slope)))
            elif kind == "residual":
                stages.append(ResidualStage(c_in, c_out, leaky_slope))
            else:
                raise ConfigError(f"unknown cnn.kind {kind!r}")
            c_in = c_out
        self.stages = nn.ModuleList(stages)
        self.proj = nn.Linear(c_in, fusion_dim)

    @property
    def cam_layer(self):
        """Third stage, the activation-map site used for explanations"""
        return self.stages[2]

    def forward(self, x):
        if x.dim() != 5:
            raise ContractViolation(f"expected a [B, C, D, H, W] grid, got shape {tuple(x.shape)}")
        if min(x.shape[-2:]) < MIN_CNN_SIZE:
            raise ContractViolation(
                f"slices of {x.shape[-2]}x{x.shape[-1]} are too small for three stride-2 stages"
            )
        for stage in self.stages:
            x = stage(x)
        pooled = x.mean(dim=(2, 3, 4))
        return self.proj(pooled)


class TransformerBlock(nn.Module):
    """Pre-norm encoder block: x + MSA(LN(x)), then x + MLP(LN(x))"""

    def __init__(self, dim, heads, mlp_dim, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(mlp_dim, dim),
            nn.Dropout(dropout),
        )
        self.record_attention = False
        self.attention = None

    def forward(self, x):
        h = self.norm1(x)
        out, weights = self.attn(
            h, h, h, need_weights=self.record_attention, average_attn_weights=True
        )
        if self.record_attention:
            # head-averaged [B, L, L]; rows sum to 1
            self.attention = weights.detach()
        x = x + out
        return x + self.mlp(self.norm2(x))


class ViTExtractor(nn.Module):
    """3D-patch ViT encoder, mean-pooled and projected to d_f"""

    def __init__(self, in_channels, depth, size, vit_config, fusion_dim):
        """
        Args:
            in_channels: Channels produced by the ViT-path 1x1 convolution
            depth: Slices per volume after SIZ
            size: In-plane size after resizing
            vit_config: ViTConfig
            fusion_dim: Length of the output vector
        """
        super().__init__()
        p, fp = vit_config.patch_size, vit_config.frame_patch_size
        if size % p != 0 or depth % fp != 0:
            raise ConfigError(
                f"input {depth}x{size}x{size} is not divisible into {fp}x{p}x{p} patches"
            )
        self.input_shape = (depth, size, size)
        self.patch_size = p
        self.frame_patch_size = fp
        self.grid = (depth // fp, size // p, size // p)
        self.num_tokens = self.grid[0] * self.grid[1] * self.grid[2]

        dim = vit_config.embed_dim
        self.patch_embed = nn.Conv3d(in_channels, dim, kernel_size=(fp, p, p), stride=(fp, p, p))
        self.pos_embedding = nn.Parameter(torch.randn(1, self.num_tokens, dim) * 0.02)
        self.emb_dropout = nn.Dropout(vit_config.emb_dropout)
        self.blocks = nn.ModuleList(
            [
                TransformerBlock(dim, vit_config.heads, vit_config.mlp_dim, vit_config.dropout)
                for _ in range(vit_config.depth)
            ]
        )
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, fusion_dim)

    def tokens_of_slice(self, slice_index):
        """Token index range covering one input slice; tokens are ordered depth-major"""
        frame = slice_index // self.frame_patch_size
        per_frame = self.grid[1] * self.grid[2]
        return frame * per_frame, (frame + 1) * per_frame

    def forward(self, x):
        if tuple(x.shape[2:]) != self.input_shape:
            raise ContractViolation(
                f"ViT expects depth x height x width {self.input_shape}, got {tuple(x.shape[2:])}"
            )
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = self.emb_dropout(tokens + self.pos_embedding)
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        return self.proj(tokens.mean(dim=1))
