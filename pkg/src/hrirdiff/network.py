"""Conditional 1D U-Net noise predictor.

Symmetric encoder/decoder over the temporal axis with five resolution
levels by default. Each encoder level runs (conv k=3 + ReLU + batch norm,
conv k=3 with no activation), injects the conditioning vector as a
per-channel bias, saves the skip connection, then downsamples with a
strided conv (k=4, s=2) followed by multi-head self-attention over time.
The decoder mirrors the encoder with transposed convolutions and receives
skip features and the projected conditioning by channel concatenation.

Conditioning is the concatenation of a learned direction-label embedding
(or sin/cos direction features), the normalized anthropometric vector,
and a sinusoidal embedding of the diffusion step.

Besides the nn.Module there is a small functional surface (init_params /
unet_forward / param_gradients) operating on plain name->tensor
snapshots, used for checkpointing, sampling, and gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import N_FEATURES, Doa
from .errors import ConfigurationError, ContractViolation, NumericError, SchemaError, ShapeError


@dataclass(frozen=True)
class UNetConfig:
    signal_length: int
    grid_size: int
    input_channels: int = 2
    level_channels: tuple = (4, 8, 16, 32, 64)
    conv_kernel: int = 3
    down_kernel: int = 4
    attention_heads: int = 4
    anthro_dim: int = N_FEATURES
    doa_embed_dim: int = 16
    step_embed_dim: int = 32
    doa_mode: str = "label"  # "label" or "continuous"
    pad_input: bool = True

    def __post_init__(self):
        object.__setattr__(self, "level_channels", tuple(self.level_channels))
        if self.signal_length < 1 or self.grid_size < 1:
            raise ConfigurationError("signal_length and grid_size must be positive")
        if any(b <= a for a, b in zip(self.level_channels, self.level_channels[1:])):
            raise ConfigurationError("level_channels must be strictly increasing")
        if any(c % self.attention_heads for c in self.level_channels):
            raise ConfigurationError("every level channel count must divide by the head count")
        if self.step_embed_dim % 2:
            raise ConfigurationError("step_embed_dim must be even")
        if self.doa_mode not in ("label", "continuous"):
            raise ConfigurationError(f"unknown doa_mode {self.doa_mode!r}")
        if self.conv_kernel % 2 != 1:
            raise ConfigurationError("conv_kernel must be odd (size-preserving padding)")
        if not self.pad_input and self.signal_length % self.total_stride:
            raise ConfigurationError(
                f"signal_length {self.signal_length} is not divisible by "
                f"{self.total_stride} and padding is disabled"
            )

    @property
    def levels(self) -> int:
        return len(self.level_channels)

    @property
    def total_stride(self) -> int:
        return 2 ** self.levels

    @property
    def doa_feature_dim(self) -> int:
        return self.doa_embed_dim if self.doa_mode == "label" else 4

    @property
    def cond_dim(self) -> int:
        return self.doa_feature_dim + self.anthro_dim + self.step_embed_dim

    @property
    def doa_table_key(self) -> str:
        return "doa_embedding.weight" if self.doa_mode == "label" else "grid_angles"


@dataclass
class ModelParams:
    """Snapshot of every network tensor keyed by its stable layer path."""

    tensors: dict
    trainable_keys: tuple

    @property
    def param_count(self) -> int:
        return sum(self.tensors[k].numel() for k in self.trainable_keys)

    @property
    def dtype(self) -> torch.dtype:
        return self.tensors[self.trainable_keys[0]].dtype

    def to(self, dtype: torch.dtype) -> "ModelParams":
        converted = {
            k: v.to(dtype) if v.is_floating_point() else v.clone()
            for k, v in self.tensors.items()
        }
        return ModelParams(tensors=converted, trainable_keys=self.trainable_keys)


@dataclass(frozen=True)
class ConditionVector:
    """Concatenated conditioning: direction features, anthropometry, step."""

    doa_embedding: np.ndarray
    anthro: np.ndarray
    step_embedding: np.ndarray

    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.doa_embedding, self.anthro, self.step_embedding])


def sinusoidal_step_embedding(steps: torch.Tensor, dim: int,
                              dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard sin/cos encoding of the step index, shape (B, dim)."""
    half = dim // 2
    exponents = torch.arange(half, dtype=dtype) / max(half - 1, 1)
    freqs = torch.exp(-math.log(10000.0) * exponents)
    args = steps.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _condition(config: UNetConfig, doa_table: torch.Tensor, steps: torch.Tensor,
               labels: torch.Tensor, anthro: torch.Tensor) -> torch.Tensor:
    """Shared conditioning math for the module and the snapshot path."""
    if torch.any(labels < 0) or torch.any(labels >= config.grid_size):
        raise ContractViolation(f"direction label outside [0, {config.grid_size})")
    dtype = anthro.dtype
    if config.doa_mode == "label":
        doa_part = doa_table[labels].to(dtype)
    else:
        angles = doa_table[labels].to(dtype)
        doa_part = torch.cat(
            [torch.sin(angles[:, :1]), torch.cos(angles[:, :1]),
             torch.sin(angles[:, 1:]), torch.cos(angles[:, 1:])], dim=-1
        )
    step_part = sinusoidal_step_embedding(steps, config.step_embed_dim, dtype)
    return torch.cat([doa_part, anthro, step_part], dim=-1)


class SelfAttention1d(nn.Module):
    """Pre-norm multi-head self-attention over the temporal axis."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        seq = x.transpose(1, 2)
        normed = self.norm(seq)
        out, _ = self.attn(normed, normed, normed, need_weights=False)
        return (seq + out).transpose(1, 2)


class EncoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, config: UNetConfig):
        super().__init__()
        pad = config.conv_kernel // 2
        self.conv1 = nn.Conv1d(in_ch, out_ch, config.conv_kernel, padding=pad)
        self.bn1 = nn.BatchNorm1d(out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, config.conv_kernel, padding=pad)
        self.cond_proj = nn.Linear(cond_dim, out_ch)
        self.down = nn.Conv1d(out_ch, out_ch, config.down_kernel, stride=2, padding=1)
        self.attn = SelfAttention1d(out_ch, config.attention_heads)

    def forward(self, x, cond):
        h = self.bn1(F.relu(self.conv1(x)))
        h = self.conv2(h)
        h = h + self.cond_proj(cond)[:, :, None]
        skip = h
        h = self.attn(self.down(h))
        return h, skip


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, level_ch: int, out_ch: int, cond_dim: int,
                 config: UNetConfig):
        super().__init__()
        pad = config.conv_kernel // 2
        self.up = nn.ConvTranspose1d(in_ch, level_ch, config.down_kernel, stride=2, padding=1)
        self.cond_proj = nn.Linear(cond_dim, level_ch)
        self.conv1 = nn.Conv1d(3 * level_ch, level_ch, config.conv_kernel, padding=pad)
        self.bn1 = nn.BatchNorm1d(level_ch)
        self.conv2 = nn.Conv1d(level_ch, out_ch, config.conv_kernel, padding=pad)

    def forward(self, x, skip, cond):
        h = self.up(x)
        if h.shape[-1] != skip.shape[-1]:
            raise ShapeError(
                f"decoder upsample produced length {h.shape[-1]}, skip has {skip.shape[-1]}"
            )
        c = self.cond_proj(cond)[:, :, None].expand(-1, -1, h.shape[-1])
        h = torch.cat([h, skip, c], dim=1)
        h = self.bn1(F.relu(self.conv1(h)))
        return self.conv2(h)


class ConditionalUNet(nn.Module):
    """The noise predictor: forward(noisy, steps, labels, anthro) -> noise."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        channels = config.level_channels

        if config.doa_mode == "label":
            self.doa_embedding = nn.Embedding(config.grid_size, config.doa_embed_dim)
        else:
            # Angle lookup for sin/cos features; filled from the dataset grid.
            self.register_buffer("grid_angles", torch.zeros(config.grid_size, 2))

        self.down_blocks = nn.ModuleList()
        in_ch = config.input_channels
        for ch in channels:
            self.down_blocks.append(EncoderBlock(in_ch, ch, config.cond_dim, config))
            in_ch = ch

        self.up_blocks = nn.ModuleList()
        for j in range(config.levels - 1, -1, -1):
            # Input channels equal this level's width: the bottom features
            # are channels[-1], and block j+1 already reduced to channels[j].
            out_ch = channels[j - 1] if j >= 1 else channels[0]
            self.up_blocks.append(
                DecoderBlock(channels[j], channels[j], out_ch, config.cond_dim, config)
            )

        self.final = nn.Conv1d(channels[0], config.input_channels,
                               config.conv_kernel, padding=config.conv_kernel // 2)

    def set_grid(self, doa_grid) -> None:
        """Record grid angles (needed for the continuous direction mode)."""
        if self.config.doa_mode != "continuous":
            return
        angles = torch.tensor(
            [[d.azimuth, d.elevation] for d in doa_grid], dtype=torch.float32
        )
        if angles.shape[0] != self.config.grid_size:
            raise ConfigurationError("grid size does not match the configuration")
        self.grid_angles.copy_(angles.to(self.grid_angles.dtype))

    def _doa_table(self) -> torch.Tensor:
        if self.config.doa_mode == "label":
            return self.doa_embedding.weight
        return self.grid_angles

    def condition_vector(self, steps, labels, anthro) -> torch.Tensor:
        return _condition(self.config, self._doa_table(), steps, labels, anthro)

    def forward(self, x, steps, labels, anthro):
        if x.ndim != 3 or x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"input: expected (B, {self.config.input_channels}, T), got {tuple(x.shape)}"
            )
        length = x.shape[-1]
        stride = self.config.total_stride
        if length % stride:
            if not self.config.pad_input:
                raise ShapeError(
                    f"input: length {length} not divisible by {stride} and padding disabled"
                )
            x = F.pad(x, (0, stride - length % stride))

        cond = self.condition_vector(steps, labels, anthro.to(x.dtype))
        skips = []
        h = x
        for block in self.down_blocks:
            h, skip = block(h, cond)
            skips.append(skip)
        for block, skip in zip(self.up_blocks, reversed(skips)):
            h = block(h, skip, cond)
        out = self.final(h)
        return out[..., :length]


# ---------------------------------------------------------------------------
# functional parameter API


@lru_cache(maxsize=8)
def _skeleton(config: UNetConfig, train: bool) -> ConditionalUNet:
    module = ConditionalUNet(config)
    module.train(train)
    return module


def snapshot_params(module: ConditionalUNet) -> ModelParams:
    tensors = {n: p.detach().clone() for n, p in module.named_parameters()}
    tensors.update({n: b.detach().clone() for n, b in module.named_buffers()})
    return ModelParams(
        tensors=tensors,
        trainable_keys=tuple(n for n, _ in module.named_parameters()),
    )


def load_params(module: ConditionalUNet, params: ModelParams) -> ConditionalUNet:
    module.load_state_dict(dict(params.tensors), strict=True)
    return module


def build_unet(config: UNetConfig, params: ModelParams | None = None,
               doa_grid=None) -> ConditionalUNet:
    """Fresh module; optionally load a snapshot and/or the direction grid."""
    module = ConditionalUNet(config)
    if doa_grid is not None:
        module.set_grid(doa_grid)
    if params is not None:
        if params.dtype != torch.float32:
            module = module.to(params.dtype)
        load_params(module, params)
    return module


def init_params(config: UNetConfig, seed: int) -> ModelParams:
    """Deterministic initialization: fan-in-scaled uniform weights, zero
    biases, unit norm scales."""
    module = ConditionalUNet(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=gen)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.fill_(1.0)
    return snapshot_params(module)


def check_schema(config: UNetConfig, params: ModelParams) -> None:
    reference = snapshot_keys(config)
    got = set(params.tensors)
    if reference != got:
        missing = sorted(reference - got)
        extra = sorted(got - reference)
        raise SchemaError(
            f"parameter schema mismatch: missing {missing[:4]}, unexpected {extra[:4]}"
        )


@lru_cache(maxsize=8)
def snapshot_keys(config: UNetConfig) -> frozenset:
    module = _skeleton(config, False)
    names = {n for n, _ in module.named_parameters()}
    names |= {n for n, _ in module.named_buffers()}
    return frozenset(names)


def unet_forward(config: UNetConfig, params: ModelParams, x: torch.Tensor,
                 steps: torch.Tensor, labels: torch.Tensor, anthro: torch.Tensor,
                 train: bool = False) -> torch.Tensor:
    """Forward pass through a parameter snapshot without touching it.

    Gradients flow back to the tensors inside `params`. In training mode
    batch norm uses batch statistics; running-statistic updates happen on
    throwaway clones so the snapshot stays pristine.
    """
    check_schema(config, params)
    module = _skeleton(config, train)
    trainable = set(params.trainable_keys)
    tensors = {
        k: (v.clone() if train and k not in trainable else v)
        for k, v in params.tensors.items()
    }
    x = x.to(params.dtype)
    anthro = anthro.to(params.dtype)
    return torch.func.functional_call(module, tensors, (x, steps, labels, anthro))


class UNetPredictor:
    """Noise-predictor callable backed by a parameter snapshot."""

    def __init__(self, config: UNetConfig, params: ModelParams, train: bool = False):
        check_schema(config, params)
        self.config = config
        self.params = params
        self.train = train

    @property
    def dtype(self) -> torch.dtype:
        return self.params.dtype

    def __call__(self, x, steps, labels, anthro):
        return unet_forward(self.config, self.params, x, steps, labels, anthro,
                            train=self.train)


def condition_tensor(config: UNetConfig, params: ModelParams, steps: torch.Tensor,
                     labels: torch.Tensor, anthro: torch.Tensor) -> torch.Tensor:
    """Differentiable conditioning vectors straight from a snapshot."""
    check_schema(config, params)
    return _condition(config, params.tensors[config.doa_table_key], steps, labels, anthro)


def embed_condition(config: UNetConfig, params: ModelParams, doa: Doa,
                    anthro: np.ndarray, step: int) -> ConditionVector:
    """Conditioning triple for one item, as plain numpy arrays."""
    anthro = np.asarray(anthro, dtype=np.float64)
    if anthro.shape != (config.anthro_dim,):
        raise SchemaError(f"anthro must have shape ({config.anthro_dim},)")
    steps_t = torch.tensor([step], dtype=torch.int64)
    labels_t = torch.tensor([doa.label], dtype=torch.int64)
    anthro_t = torch.from_numpy(anthro[None, :]).to(params.dtype)
    with torch.no_grad():
        vec = condition_tensor(config, params, steps_t, labels_t, anthro_t)[0]
    vec = vec.double().numpy()
    d = config.doa_feature_dim
    return ConditionVector(
        doa_embedding=vec[:d],
        anthro=vec[d:d + config.anthro_dim],
        step_embedding=vec[d + config.anthro_dim:],
    )


def param_gradients(params: ModelParams, loss_evaluator) -> dict:
    """Exact reverse-mode gradients of a scalar loss for every trainable key."""
    trainable = {
        k: params.tensors[k].detach().clone().requires_grad_(True)
        for k in params.trainable_keys
    }
    tensors = {
        k: trainable[k] if k in trainable else v.detach().clone()
        for k, v in params.tensors.items()
    }
    leafed = ModelParams(tensors=tensors, trainable_keys=params.trainable_keys)
    loss = loss_evaluator(leafed)
    if not torch.is_tensor(loss) or loss.ndim != 0:
        raise ContractViolation("loss_evaluator must return a scalar tensor")
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()!r}")
    if not loss.requires_grad:
        return {k: torch.zeros_like(v) for k, v in trainable.items()}
    grads = torch.autograd.grad(loss, list(trainable.values()), allow_unused=True)
    return {
        k: (g if g is not None else torch.zeros_like(t))
        for (k, t), g in zip(trainable.items(), grads)
    }
