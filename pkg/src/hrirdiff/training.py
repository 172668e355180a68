"""Optimization and the cross-validation experiment driver.

Adam with bias correction, stepped learning-rate decay, a per-fold
training loop with best-checkpoint selection and patience-based early
stopping, and the leave-one-out driver that produces one checkpoint and
one generated HRIR set per held-out subject.

Folds are independent and may run in parallel worker processes; within a
fold training is a single sequence.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as container
from .dataset import (
    AnthroStats,
    AnthroVector,
    DatasetFold,
    Doa,
    SubjectStore,
    compute_anthro_stats,
    make_loocv_folds,
    normalize_anthro,
    write_hrir_file,
)
from .diffusion import NoiseSchedule, make_linear_schedule, sample_hrir_set, training_loss
from .errors import (
    ConfigurationError,
    ContractViolation,
    ManifestConflictError,
    NumericError,
)
from .network import ConditionalUNet, ModelParams, UNetConfig, build_unet, init_params, snapshot_params

log = logging.getLogger("hrirdiff.training")

DEFAULT_SCHEDULE_STEPS = 600
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


# ---------------------------------------------------------------------------
# seeding helpers: one experiment seed deterministically derives the rest


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*keys) -> np.random.Generator:
    return np.random.default_rng([_key_to_int(k) for k in keys])


def derive_seed(*keys) -> int:
    return int(derive_rng(*keys).integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# configuration and optimizer


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 100
    early_stop_patience: int = 200
    batch_size: int = 32
    seed: int = 0
    val_count: int = 9
    stats_scope: str = "train"  # "train": per-fold stats; "all": whole dataset
    sigma_mode: str = "beta"

    def __post_init__(self):
        if self.epochs < 1 or self.lr_decay_every < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("epochs, decay interval, and patience must be positive")
        if self.lr <= 0 or not (0 < self.lr_decay_factor <= 1):
            raise ConfigurationError("lr must be > 0 and decay factor in (0, 1]")
        if self.early_stop_patience >= self.epochs:
            raise ConfigurationError("patience must be smaller than the epoch budget")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (batch-norm statistics)")
        if self.val_count < 0:
            raise ConfigurationError("val_count must be >= 0")
        if self.stats_scope not in ("train", "all"):
            raise ConfigurationError(f"unknown stats_scope {self.stats_scope!r}")


@dataclass
class AdamState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initial(cls, params: dict) -> "AdamState":
        return cls(
            first_moment={k: torch.zeros_like(v) for k, v in params.items()},
            second_moment={k: torch.zeros_like(v) for k, v in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns (new params, new state)."""
    if lr <= 0:
        raise ConfigurationError("lr must be positive")
    if set(params) != set(grads):
        raise ContractViolation("gradient keys do not match parameter keys")
    for k, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {k!r}")

    t = state.step_count + 1
    new_params = {}
    new_m = {}
    new_v = {}
    for k, p in params.items():
        g = grads[k]
        m = state.beta1 * state.first_moment[k] + (1 - state.beta1) * g
        v = state.beta2 * state.second_moment[k] + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new_params[k] = p - lr * m_hat / (torch.sqrt(v_hat) + state.eps)
        new_m[k] = m
        new_v[k] = v
    new_state = AdamState(
        first_moment=new_m, second_moment=new_v, step_count=t,
        beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return new_params, new_state


def current_lr(epoch: int, base_lr: float, decay_every: int = 100,
               factor: float = 0.8) -> float:
    """Stepped decay: base_lr * factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ContractViolation("epoch must be >= 0")
    return base_lr * factor ** (epoch // decay_every)


class EarlyStopper:
    """Stop once the loss has not strictly improved for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record the epoch's loss; True means training should stop now."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            return False
        return epoch - self.best_epoch >= self.patience


def stopping_epoch(losses, patience: int):
    """Epoch (1-based) at which training stops for a given loss sequence,
    or None if it never triggers; also returns the best epoch."""
    stopper = EarlyStopper(patience)
    for epoch, loss in enumerate(losses, start=1):
        if stopper.update(epoch, loss):
            return epoch, stopper.best_epoch
    return None, stopper.best_epoch


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Everything needed to regenerate HRIRs with no other files."""

    params: ModelParams
    unet_config: UNetConfig
    schedule: NoiseSchedule
    anthro_stats: AnthroStats
    doa_grid: tuple
    best_val_loss: float
    epoch_of_best: int
    sample_rate: float
    train_config: TrainConfig | None = None
    config_hash: str | None = None
    feature_names: list | None = None
    diverged: bool = False


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "kind": "hrirdiff-checkpoint",
        "unet_config": dataclasses.asdict(ckpt.unet_config),
        "train_config": dataclasses.asdict(ckpt.train_config) if ckpt.train_config else None,
        "doa_grid": [[d.azimuth, d.elevation] for d in ckpt.doa_grid],
        "best_val_loss": ckpt.best_val_loss,
        "epoch_of_best": ckpt.epoch_of_best,
        "sample_rate": ckpt.sample_rate,
        "config_hash": ckpt.config_hash,
        "feature_names": ckpt.feature_names,
        "diverged": ckpt.diverged,
        "trainable_keys": list(ckpt.params.trainable_keys),
    }
    tensors = {f"params.{k}": v for k, v in ckpt.params.tensors.items()}
    tensors["schedule.betas"] = torch.from_numpy(ckpt.schedule.betas)
    tensors["anthro_stats.mean"] = torch.from_numpy(ckpt.anthro_stats.mean)
    tensors["anthro_stats.std"] = torch.from_numpy(ckpt.anthro_stats.std)
    container.write_container(path, header, tensors)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = container.read_container(path)
    if header.get("kind") != "hrirdiff-checkpoint":
        raise ManifestConflictError(f"{path} is not a checkpoint file")
    unet_cfg = UNetConfig(**{
        **header["unet_config"],
        "level_channels": tuple(header["unet_config"]["level_channels"]),
    })
    train_cfg = TrainConfig(**header["train_config"]) if header["train_config"] else None
    params = ModelParams(
        tensors={k[len("params."):]: v for k, v in tensors.items() if k.startswith("params.")},
        trainable_keys=tuple(header["trainable_keys"]),
    )
    schedule = NoiseSchedule.from_betas(tensors["schedule.betas"].numpy())
    stats = AnthroStats(
        mean=tensors["anthro_stats.mean"].numpy(),
        std=tensors["anthro_stats.std"].numpy(),
    )
    grid = tuple(
        Doa(azimuth=az, elevation=el, label=i)
        for i, (az, el) in enumerate(header["doa_grid"])
    )
    return Checkpoint(
        params=params, unet_config=unet_cfg, schedule=schedule, anthro_stats=stats,
        doa_grid=grid, best_val_loss=header["best_val_loss"],
        epoch_of_best=header["epoch_of_best"], sample_rate=header["sample_rate"],
        train_config=train_cfg, config_hash=header.get("config_hash"),
        feature_names=header.get("feature_names"), diverged=header.get("diverged", False),
    )


# ---------------------------------------------------------------------------
# per-fold training


def _examples_for(record, anthro_norm: np.ndarray):
    return [(pair.as_array(), doa, anthro_norm) for doa, pair in record.hrirs]


def _epoch_batches(examples, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


def _module_params(module: ConditionalUNet) -> dict:
    return {k: p.detach().clone() for k, p in module.named_parameters()}


def _apply_params(module: ConditionalUNet, values: dict) -> None:
    with torch.no_grad():
        for k, p in module.named_parameters():
            p.copy_(values[k])


def _eval_loss(module, examples, batch_size, schedule, rng) -> float:
    module.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            loss = training_loss(module, chunk, schedule, rng)
            total += float(loss) * len(chunk)
            count += len(chunk)
    return total / count


def train_fold(fold: DatasetFold, store: SubjectStore, config: TrainConfig,
               unet_config: UNetConfig | None = None,
               schedule: NoiseSchedule | None = None,
               config_hash: str | None = None) -> Checkpoint:
    """Train on the fold's train subjects, select by validation loss.

    Runs up to config.epochs epochs, evaluating the validation loss each
    epoch with a fixed per-epoch seed, and stops once it has not strictly
    improved for config.early_stop_patience consecutive epochs. On numeric
    divergence the best checkpoint so far is returned with diverged=True.
    The held-out test subject is never read.
    """
    if not fold.train_subjects:
        raise ConfigurationError("fold has an empty training set")
    if unet_config is None:
        unet_config = UNetConfig(signal_length=store.hrir_length, grid_size=store.grid_size)
    if schedule is None:
        schedule = make_linear_schedule(DEFAULT_SCHEDULE_STEPS, DEFAULT_BETA_START,
                                        DEFAULT_BETA_END)

    train_records = [store.subject(sid) for sid in fold.train_subjects]
    val_records = [store.subject(sid) for sid in fold.val_subjects]
    stats_ids = store.subject_ids if config.stats_scope == "all" else fold.train_subjects
    stats = compute_anthro_stats([store.subject(sid) for sid in stats_ids])

    train_examples = []
    for record in train_records:
        norm = normalize_anthro(record.anthro, stats).normalized
        train_examples.extend(_examples_for(record, norm))
    val_examples = []
    for record in val_records:
        norm = normalize_anthro(record.anthro, stats).normalized
        val_examples.extend(_examples_for(record, norm))

    seed = config.seed
    module = build_unet(unet_config, params=init_params(unet_config, derive_seed(seed, "init")),
                        doa_grid=store.doa_grid)
    adam = AdamState.initial(_module_params(module))
    stopper = EarlyStopper(config.early_stop_patience)

    best = snapshot_params(module)
    best_loss = math.inf
    best_epoch = 0
    diverged = False

    for epoch in range(1, config.epochs + 1):
        lr = current_lr(epoch - 1, config.lr, config.lr_decay_every, config.lr_decay_factor)
        module.train(True)
        epoch_rng = derive_rng(seed, "shuffle", epoch)
        train_total = 0.0
        train_count = 0
        try:
            for b, batch in enumerate(_epoch_batches(train_examples, config.batch_size, epoch_rng)):
                loss = training_loss(module, batch, schedule, derive_rng(seed, "noise", epoch, b))
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                module.zero_grad()
                loss.backward()
                grads = {k: p.grad.detach().clone() for k, p in module.named_parameters()}
                new_values, adam = adam_step(_module_params(module), grads, adam, lr)
                _apply_params(module, new_values)
                train_total += loss_value * len(batch)
                train_count += len(batch)

            train_loss = train_total / train_count
            if val_examples:
                val_loss = _eval_loss(module, val_examples, config.batch_size, schedule,
                                      derive_rng(seed, "val", epoch))
            else:
                # No validation subjects: select on the epoch's training loss.
                val_loss = train_loss
        except NumericError as exc:
            log.warning("fold %s diverged at epoch %d: %s", fold.test_subject, epoch, exc)
            diverged = True
            break

        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best = snapshot_params(module)
        log.info(
            "fold=%s epoch=%d train_loss=%.6f val_loss=%.6f lr=%.6g best=%.6f best_epoch=%d",
            fold.test_subject, epoch, train_loss, val_loss, lr, best_loss, best_epoch,
        )
        if stopper.update(epoch, val_loss):
            log.info("fold=%s early_stop_epoch=%d best_epoch=%d",
                     fold.test_subject, epoch, best_epoch)
            break

    return Checkpoint(
        params=best, unet_config=unet_config, schedule=schedule, anthro_stats=stats,
        doa_grid=tuple(store.doa_grid), best_val_loss=best_loss, epoch_of_best=best_epoch,
        sample_rate=store.sample_rate, train_config=config, config_hash=config_hash,
        feature_names=store.feature_names, diverged=diverged,
    )


# ---------------------------------------------------------------------------
# generation and the LOOCV driver


def generate_for_subject(ckpt: Checkpoint, anthro: AnthroVector,
                         rng: np.random.Generator, doas=None) -> list:
    """Sample HRIRs conditioned on one subject's features (full grid by
    default)."""
    normalized = normalize_anthro(anthro, ckpt.anthro_stats)
    model = build_unet(ckpt.unet_config, params=ckpt.params, doa_grid=ckpt.doa_grid)
    model.eval()
    return sample_hrir_set(
        model, ckpt.doa_grid if doas is None else doas, normalized, ckpt.schedule,
        hrir_length=ckpt.unet_config.signal_length, sample_rate=ckpt.sample_rate,
        rng=rng,
        sigma_mode=ckpt.train_config.sigma_mode if ckpt.train_config else "beta",
    )


def write_generated_set(out_dir, subject_id: int, doa_grid, pairs,
                        config_hash: str | None) -> Path:
    """Store generated HRIRs in the exchange format plus a sidecar meta file."""
    out_dir = Path(out_dir)
    entries = [
        (doa.azimuth, doa.elevation, pair.left, pair.right)
        for doa, pair in zip(doa_grid, pairs)
    ]
    target = out_dir / "subjects" / str(subject_id) / "hrir.bin"
    write_hrir_file(target, entries, pairs[0].sample_rate)
    meta = {"subject_id": subject_id, "config_hash": config_hash}
    with open(target.with_suffix(".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return target


@dataclass
class LoocvPaths:
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    def checkpoint(self, subject_id: int) -> Path:
        return self.root / "checkpoints" / f"subject_{subject_id}.ckpt"

    @property
    def generated_root(self) -> Path:
        return self.root / "generated"

    def generated(self, subject_id: int) -> Path:
        return self.generated_root / "subjects" / str(subject_id) / "hrir.bin"


def _fold_outputs_present(paths: LoocvPaths, subject_id: int) -> bool:
    return paths.checkpoint(subject_id).exists() and paths.generated(subject_id).exists()


def _run_single_fold(store_root: str, out_root: str, fold: DatasetFold,
                     config: TrainConfig, unet_config: UNetConfig | None,
                     schedule_betas: np.ndarray, config_hash: str | None) -> dict:
    """Worker entry: train one fold, write its checkpoint and generated set."""
    store = SubjectStore(store_root)
    paths = LoocvPaths(Path(out_root))
    schedule = NoiseSchedule.from_betas(schedule_betas)
    fold_config = replace(config, seed=derive_seed(config.seed, "fold", fold.test_subject))
    ckpt = train_fold(fold, store, fold_config, unet_config=unet_config,
                      schedule=schedule, config_hash=config_hash)
    save_checkpoint(paths.checkpoint(fold.test_subject), ckpt)
    pairs = generate_for_subject(
        ckpt, store.anthro(fold.test_subject),
        derive_rng(config.seed, "sample", fold.test_subject),
    )
    write_generated_set(paths.generated_root, fold.test_subject, ckpt.doa_grid,
                        pairs, config_hash)
    return {
        "status": "diverged" if ckpt.diverged else "done",
        "checkpoint": str(paths.checkpoint(fold.test_subject).relative_to(paths.root)),
        "generated": str(paths.generated(fold.test_subject).relative_to(paths.root)),
        "best_val_loss": ckpt.best_val_loss if math.isfinite(ckpt.best_val_loss) else None,
        "epoch_of_best": ckpt.epoch_of_best,
    }


def run_loocv(store: SubjectStore, out_root, config: TrainConfig,
              unet_config: UNetConfig | None = None,
              schedule: NoiseSchedule | None = None,
              config_hash: str | None = None, jobs: int = 1,
              force: bool = False, only_fold: int | None = None) -> dict:
    """Train every fold and generate the held-out subject's HRIR set.

    Resumable: folds whose outputs already exist under out_root are
    skipped, unless force is set. A manifest with a different config hash
    raises ManifestConflictError. only_fold restricts the run to the fold
    holding out that subject id.
    """
    if len(store.subject_ids) < 3:
        raise ConfigurationError("leave-one-out driver needs at least 3 subjects")
    paths = LoocvPaths(Path(out_root))
    if schedule is None:
        schedule = make_linear_schedule(DEFAULT_SCHEDULE_STEPS, DEFAULT_BETA_START,
                                        DEFAULT_BETA_END)

    manifest = {"config_hash": config_hash, "folds": {}}
    if paths.manifest.exists():
        if force:
            paths.manifest.unlink()
        else:
            with open(paths.manifest) as fh:
                existing = json.load(fh)
            if existing.get("config_hash") != config_hash:
                raise ManifestConflictError(
                    f"{paths.manifest} was produced with config hash "
                    f"{existing.get('config_hash')!r}, current is {config_hash!r}"
                )
            manifest = existing

    folds = make_loocv_folds(store.subject_ids, config.val_count, config.seed)
    if only_fold is not None:
        folds = [f for f in folds if f.test_subject == only_fold]
        if not folds:
            raise ConfigurationError(f"no fold holds out subject {only_fold}")
    pending = []
    for fold in folds:
        key = str(fold.test_subject)
        entry = manifest["folds"].get(key)
        if not force and entry and entry["status"] in ("done", "diverged") \
                and _fold_outputs_present(paths, fold.test_subject):
            log.info("fold=%s skipped (already complete)", fold.test_subject)
            continue
        pending.append(fold)

    def record(fold, entry):
        manifest["folds"][str(fold.test_subject)] = entry
        paths.root.mkdir(parents=True, exist_ok=True)
        with open(paths.manifest, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    if jobs <= 1 or len(pending) <= 1:
        for fold in pending:
            entry = _run_single_fold(str(store.root), str(paths.root), fold, config,
                                     unet_config, schedule.betas, config_hash)
            record(fold, entry)
    else:
        import concurrent.futures as futures
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with futures.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            jobs_map = {
                pool.submit(_run_single_fold, str(store.root), str(paths.root), fold,
                            config, unet_config, schedule.betas, config_hash): fold
                for fold in pending
            }
            for fut in futures.as_completed(jobs_map):
                record(jobs_map[fut], fut.result())

    return manifest
