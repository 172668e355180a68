"""Gaussian diffusion over two-channel impulse responses.

Holds the noise schedule, the closed-form forward (noising) marginal, the
noise-prediction training objective, and the iterative ancestral sampler.
Step indices are zero-based: step i uses beta[i], and the cumulative
product alpha_bar[i] includes step i, so even step 0 adds noise.

All operations are pure given an explicit rng. The noise predictor is any
callable mapping torch tensors (noisy (B, 2, T), steps (B,), labels (B,),
anthro (B, N)) to predicted noise of shape (B, 2, T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import AnthroVector, Doa
from .errors import (
    ConfigurationError,
    ContractViolation,
    NumericError,
    SamplingDivergenceError,
    ShapeError,
)
from .metrics import HrirPair


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances and their derived cumulative products."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return self.betas.shape[0]

    @classmethod
    def from_betas(cls, betas, validate: bool = True) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigurationError("need at least one noise step")
        if validate and (np.any(betas <= 0) or np.any(betas >= 1)):
            raise ConfigurationError("betas must lie strictly in (0, 1)")
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))

    def sigma(self, step: int, mode: str = "beta") -> float:
        """Reverse-step noise scale: sqrt(beta) default, or the posterior
        variance variant sqrt(beta * (1 - abar_prev) / (1 - abar))."""
        if mode == "beta":
            return math.sqrt(self.betas[step])
        if mode == "beta_tilde":
            abar_prev = self.alpha_bars[step - 1] if step > 0 else 1.0
            return math.sqrt(self.betas[step] * (1.0 - abar_prev) / (1.0 - self.alpha_bars[step]))
        raise ConfigurationError(f"unknown sigma mode {mode!r}")


def make_linear_schedule(steps: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from beta_start (step 0) to beta_end (step I-1)."""
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, steps))


@dataclass(frozen=True)
class NoisyHrir:
    """A noised two-channel signal at a given diffusion step."""

    data: np.ndarray
    step: int
    noise: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        object.__setattr__(self, "data", data)
        if data.ndim != 2 or data.shape[0] != 2:
            raise ShapeError(f"expected a (2, T) signal, got {data.shape}")
        if self.step < 0:
            raise ContractViolation("step must be non-negative")


def _as_signal(h) -> np.ndarray:
    if isinstance(h, HrirPair):
        return h.as_array()
    return np.asarray(h)


def forward_sample(h0, step: int, eps: np.ndarray, schedule: NoiseSchedule) -> NoisyHrir:
    """Closed-form forward marginal: sqrt(abar)*h0 + sqrt(1-abar)*eps."""
    data = _as_signal(h0)
    eps = np.asarray(eps)
    if eps.shape != data.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match signal {data.shape}")
    if not (0 <= step < schedule.steps):
        raise ContractViolation(f"step {step} outside [0, {schedule.steps})")
    abar = schedule.alpha_bars[step]
    noisy = float(np.sqrt(abar)) * data + float(np.sqrt(1.0 - abar)) * eps
    return NoisyHrir(data=noisy, step=step, noise=eps)


def _item_parts(item):
    h0, doa, anthro = item
    signal = _as_signal(h0)
    label = doa.label if isinstance(doa, Doa) else int(doa)
    if isinstance(anthro, AnthroVector):
        if anthro.normalized is None:
            raise ContractViolation("conditioning anthropometry must be normalized")
        anthro = anthro.normalized
    return signal, label, np.asarray(anthro, dtype=np.float64)


def _model_dtype(model) -> torch.dtype:
    if isinstance(getattr(model, "dtype", None), torch.dtype):
        return model.dtype
    if isinstance(model, torch.nn.Module):
        try:
            return next(model.parameters()).dtype
        except StopIteration:
            pass
    return torch.float32


def training_loss(model, batch, schedule: NoiseSchedule, rng: np.random.Generator,
                  dtype: torch.dtype | None = None) -> torch.Tensor:
    """Noise-prediction objective on one batch.

    Per item, a step is drawn uniformly from [0, I) and unit Gaussian noise
    is applied via the forward marginal; the loss is the squared error
    between drawn and predicted noise, summed over channels and samples and
    averaged over the batch. Returns a 0-dim torch tensor (differentiable
    w.r.t. the model parameters).
    """
    batch = list(batch)
    if not batch:
        raise ContractViolation("batch must be non-empty")
    if dtype is None:
        dtype = _model_dtype(model)

    signals, labels, anthros = zip(*(_item_parts(item) for item in batch))
    steps = rng.integers(0, schedule.steps, size=len(batch))
    noisy = []
    eps_list = []
    for signal, step in zip(signals, steps):
        eps = rng.standard_normal(signal.shape)
        noisy.append(forward_sample(signal, int(step), eps, schedule).data)
        eps_list.append(eps)

    x = torch.from_numpy(np.stack(noisy)).to(dtype)
    eps_true = torch.from_numpy(np.stack(eps_list)).to(dtype)
    steps_t = torch.from_numpy(steps.astype(np.int64))
    labels_t = torch.tensor(labels, dtype=torch.int64)
    anthro_t = torch.from_numpy(np.stack(anthros)).to(dtype)

    eps_hat = model(x, steps_t, labels_t, anthro_t)
    if not torch.isfinite(eps_hat).all():
        bad = torch.nonzero(~torch.isfinite(eps_hat).flatten(1).all(dim=1)).flatten()
        bad_steps = [int(steps[i]) for i in bad.tolist()]
        raise NumericError(f"non-finite network output at diffusion steps {bad_steps}")
    return ((eps_true - eps_hat) ** 2).sum(dim=(1, 2)).mean()


def reverse_step(h: np.ndarray, step: int, eps_hat: np.ndarray,
                 schedule: NoiseSchedule, z: np.ndarray | None = None,
                 sigma_mode: str = "beta") -> np.ndarray:
    """One ancestral denoising step: h_{i} -> h_{i-1}.

    The predicted noise is scaled by beta/sqrt(1-abar), subtracted, and the
    result rescaled by 1/sqrt(alpha); fresh noise z (scaled by sigma) is
    added except at step 0, where it is always suppressed.
    """
    if step < 0:
        raise ContractViolation("reverse step underflow: step < 0")
    if step >= schedule.steps:
        raise ContractViolation(f"step {step} outside [0, {schedule.steps})")
    h = np.asarray(h)
    eps_hat = np.asarray(eps_hat)
    if eps_hat.shape != h.shape:
        raise ShapeError(f"eps_hat shape {eps_hat.shape} does not match {h.shape}")
    alpha = schedule.alphas[step]
    abar = schedule.alpha_bars[step]
    mean = (h - float(schedule.betas[step] / np.sqrt(1.0 - abar)) * eps_hat) * float(
        1.0 / np.sqrt(alpha)
    )
    if step == 0 or z is None:
        return mean
    if np.asarray(z).shape != h.shape:
        raise ShapeError("z shape does not match the signal")
    return mean + float(schedule.sigma(step, sigma_mode)) * np.asarray(z)


def _predict(model, h: np.ndarray, step: int, labels: np.ndarray,
             anthro: np.ndarray, dtype: torch.dtype) -> np.ndarray:
    with torch.no_grad():
        x = torch.from_numpy(h).to(dtype)
        steps_t = torch.full((h.shape[0],), step, dtype=torch.int64)
        labels_t = torch.from_numpy(labels)
        anthro_t = torch.from_numpy(anthro).to(dtype)
        return model(x, steps_t, labels_t, anthro_t).double().numpy()


def _normalized_vector(anthro) -> np.ndarray:
    if isinstance(anthro, AnthroVector):
        if anthro.normalized is None:
            raise ContractViolation("conditioning anthropometry must be normalized")
        return anthro.normalized
    anthro = np.asarray(anthro, dtype=np.float64)
    if np.any(anthro <= 0) or np.any(anthro >= 1):
        raise ContractViolation("conditioning features must be normalized into (0, 1)")
    return anthro


def sample_hrir_set(model, doas, anthro, schedule: NoiseSchedule, hrir_length: int,
                    sample_rate: float, rng: np.random.Generator,
                    sigma_mode: str = "beta") -> list:
    """Generate one HrirPair per direction, denoising all of them in one batch.

    Starts from unit Gaussian noise and runs the full reverse chain,
    conditioning on each direction label and the shared normalized
    anthropometry. Deterministic for a seeded rng.
    """
    doas = list(doas)
    if not doas:
        raise ContractViolation("need at least one direction")
    vec = _normalized_vector(anthro)
    labels = np.array([d.label for d in doas], dtype=np.int64)
    anthro_b = np.tile(vec, (len(doas), 1))
    dtype = _model_dtype(model)

    h = rng.standard_normal((len(doas), 2, hrir_length))
    for step in range(schedule.steps - 1, -1, -1):
        eps_hat = _predict(model, h, step, labels, anthro_b, dtype)
        z = rng.standard_normal(h.shape) if step > 0 else None
        h = reverse_step(h, step, eps_hat, schedule, z, sigma_mode=sigma_mode)
        if not np.all(np.isfinite(h)):
            raise SamplingDivergenceError(step)
    return [HrirPair(left=h[b, 0], right=h[b, 1], sample_rate=sample_rate)
            for b in range(len(doas))]


def sample_hrir(model, doa: Doa, anthro, schedule: NoiseSchedule, hrir_length: int,
                sample_rate: float, rng: np.random.Generator,
                sigma_mode: str = "beta") -> HrirPair:
    """Generate a single two-channel HRIR for one direction."""
    return sample_hrir_set(model, [doa], anthro, schedule, hrir_length,
                           sample_rate, rng, sigma_mode=sigma_mode)[0]
