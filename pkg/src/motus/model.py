"""Network layers: sensor CNN encoder, convolutional relative positional
encoder, pre-norm Transformer encoder and the movement classifier head.

Gradients come from torch autograd; the test suite checks them against
central finite differences in float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from motus.ingest import FRAME_LEN, N_CHANNELS, N_SENSORS

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
INSTANCE_NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    n_layers: int = 12
    d_model: int = 160
    d_ff: int = 640
    n_heads: int = 10
    pos_kernel: int = 13
    pos_pad: int = 6
    head_hidden: int = 160
    num_classes: int = 9
    dropout_transformer: float = 0.0
    dropout_head: float = 0.40
    enc_channels: int = 32
    gyro_scale: float = 0.01  # deg/s -> roughly unit range

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % N_SENSORS:
            raise ValueError(f"d_model={self.d_model} not divisible by {N_SENSORS} sensors")
        if self.pos_pad != (self.pos_kernel - 1) // 2 or self.pos_kernel % 2 == 0:
            raise ValueError("positional conv needs an odd kernel with pad = (kernel - 1) / 2")

    @classmethod
    def reduced(cls, **overrides) -> "ModelConfig":
        """Desk-scale model used for synthetic benchmarks."""
        base = dict(n_layers=4, d_model=32, d_ff=128, n_heads=4, head_hidden=32, enc_channels=16)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Smallest configuration, for gradient checks."""
        base = dict(n_layers=2, d_model=8, d_ff=16, n_heads=2, head_hidden=8, enc_channels=4,
                    pos_kernel=3, pos_pad=1)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


class SensorEncoder(nn.Module):
    """Frame-level CNN shared by the four sensors; fuses them to d_model."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        per_sensor = cfg.d_model // N_SENSORS
        self.conv1 = nn.Conv1d(N_CHANNELS, cfg.enc_channels, kernel_size=11, stride=2)
        self.conv2 = nn.Conv1d(cfg.enc_channels, per_sensor, kernel_size=5, stride=2)
        self.norm2 = nn.LayerNorm(per_sensor)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.norm_out = nn.LayerNorm(cfg.d_model)
        scale = torch.ones(N_CHANNELS)
        scale[3:] = cfg.gyro_scale
        self.register_buffer("channel_scale", scale, persistent=False)

    def sensor_features(self, frames: torch.Tensor) -> torch.Tensor:
        """Pooled per-sensor features, (B, T, 120, 24) -> (B, T, 4, d_model / 4)."""
        if frames.dim() != 4 or frames.shape[-2:] != (FRAME_LEN, N_SENSORS * N_CHANNELS):
            raise ValueError(f"expected (B, T, {FRAME_LEN}, {N_SENSORS * N_CHANNELS}), "
                             f"got {tuple(frames.shape)}")
        b, t = frames.shape[:2]
        x = frames.reshape(b * t, FRAME_LEN, N_SENSORS, N_CHANNELS) * self.channel_scale
        x = x.permute(0, 2, 3, 1).reshape(b * t * N_SENSORS, N_CHANNELS, FRAME_LEN)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = self.norm2(x.transpose(1, 2)).mean(dim=1)
        return x.reshape(b, t, N_SENSORS, -1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x = self.sensor_features(frames).flatten(2)
        return self.norm_out(self.proj(x))


class PositionalEncoder(nn.Module):
    """Depth-preserving temporal convolution, GeLU and layer norm, added residually."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv = nn.Conv1d(cfg.d_model, cfg.d_model, kernel_size=cfg.pos_kernel,
                              padding=cfg.pos_pad, stride=1)
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.gelu(self.conv(x.transpose(1, 2))).transpose(1, 2)
        return x + self.norm(y)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, pad_mask=None, return_weights=False):
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).reshape(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if pad_mask is not None:
            scores = scores.masked_fill(~pad_mask[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        y = (weights @ v).transpose(1, 2).reshape(b, t, d)
        y = self.out(y)
        return (y, weights) if return_weights else y


class TransformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadSelfAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.fc1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.fc2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout_transformer)

    def forward(self, x, pad_mask=None):
        """Returns the block output and its feed-forward branch output."""
        x = x + self.dropout(self.attn(self.norm1(x), pad_mask))
        ff = self.dropout(self.fc2(self.dropout(F.gelu(self.fc1(self.norm2(x))))))
        return x + ff, ff


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_layers))

    def forward(self, x, pad_mask=None):
        ff_outputs = []
        for i, block in enumerate(self.blocks):
            x, ff = block(x, pad_mask)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations in transformer block {i}")
            ff_outputs.append(ff)
        return x, ff_outputs

    def set_dropout(self, p: float) -> None:
        for block in self.blocks:
            block.dropout.p = p


class Backbone(nn.Module):
    """Encoder -> (optional zero masking) -> positional encoder -> Transformer -> projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SensorEncoder(cfg)
        self.pos = PositionalEncoder(cfg)
        self.transformer = TransformerEncoder(cfg)
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.out_proj = nn.Linear(cfg.d_model, cfg.d_model)

    def embed(self, frames: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        z = self.encoder(frames)
        return z * pad_mask[..., None].to(z.dtype)

    def contextualize(self, z, pad_mask, time_mask=None):
        if time_mask is not None:
            z = z.masked_fill(time_mask[..., None], 0.0)
        x = self.pos(z) * pad_mask[..., None].to(z.dtype)
        x, ff_outputs = self.transformer(x, pad_mask)
        return self.out_proj(self.final_norm(x)), ff_outputs

    def forward(self, frames, pad_mask=None, time_mask=None):
        if pad_mask is None:
            pad_mask = torch.ones(frames.shape[:2], dtype=torch.bool, device=frames.device)
        return self.contextualize(self.embed(frames, pad_mask), pad_mask, time_mask)


class ClassifierHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.d_model, cfg.head_hidden)
        self.dropout = nn.Dropout(cfg.dropout_head)
        self.fc2 = nn.Linear(cfg.head_hidden, cfg.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.elu(self.fc2(self.dropout(F.elu(self.fc1(x)))))


def classifier_probs(logits: torch.Tensor) -> torch.Tensor:
    return logits.softmax(dim=-1)


class MovementClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.head = ClassifierHead(cfg)

    def forward(self, frames, pad_mask=None):
        features, _ = self.backbone(frames, pad_mask)
        return self.head(features)


def instance_normalize(x: torch.Tensor, pad_mask: torch.Tensor,
                       eps: float = INSTANCE_NORM_EPS) -> torch.Tensor:
    """Normalize each feature of each sequence over its real time steps.

    Padded positions are excluded from the statistics and set to 0.
    """
    m = pad_mask[..., None].to(x.dtype)
    n = m.sum(dim=1, keepdim=True).clamp_min(1.0)
    mean = (x * m).sum(dim=1, keepdim=True) / n
    var = (((x - mean) * m) ** 2).sum(dim=1, keepdim=True) / n
    return (x - mean) / torch.sqrt(var + eps) * m


def masked_mse(pred, target, mask):
    """Mean squared error over positions where ``mask`` is true."""
    m = mask[..., None].to(pred.dtype)
    count = m.sum() * pred.shape[-1]
    if count == 0:
        return (pred * 0).sum()
    return (((pred - target) ** 2) * m).sum() / count


def make_adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
