"""Two-stage training (pretrain, fine-tune), Adam and the CV grid search."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .dataset import CvSplit, PatchSample
from .losses import LossConfig, decomposed_total, gan_d_term, masked_l1
from .neuro import DiscriminatorNet, GeneratorNet, load_tensors, save_tensors
from .raster import atomic_write_text

log = logging.getLogger(__name__)

MODELS = ("par_unet", "cgan_unet")
STAGES = ("pretrain", "finetune")
FINETUNE_OBJECTIVES = ("cgan", "l1+fft", "cgan+fft")
LOG_FIELDS = ("epoch", "l1", "gan_g", "gan_d", "fft", "total", "wall_seconds")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    model: str = "par_unet"
    finetune_objective: str = "cgan"
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.8
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    in_channels: int = 9
    depth: int = 4
    base_channels: int = 16
    encoder: str = "tiny"
    norm: str = "instance"
    discriminator: str = "patchgan16"
    disc_norm: str | None = None  # defaults to ``norm``
    ndf: int = 16
    augment: bool = True
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    description: str = ""

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.finetune_objective not in FINETUNE_OBJECTIVES:
            raise ValueError(f"finetune_objective must be one of {FINETUNE_OBJECTIVES}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: invalid JSON ({err})") from None

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def generator_arch(self) -> dict:
        return dict(in_channels=self.in_channels, depth=self.depth, base_channels=self.base_channels,
                    encoder=self.encoder, norm=self.norm)

    def effective_loss(self) -> LossConfig:
        """Loss weights after the stage/objective ablations."""
        lc = self.loss
        if self.stage == "pretrain":
            if self.model == "par_unet":
                return dataclasses.replace(lc, alpha=0.0, gamma=0.0)
            return dataclasses.replace(lc, gamma=0.0)
        if self.finetune_objective == "cgan":
            return dataclasses.replace(lc, gamma=0.0)
        if self.finetune_objective == "l1+fft":
            return dataclasses.replace(lc, alpha=0.0)
        return lc


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    """Copy of ``config`` with top-level or loss fields replaced."""
    top = {f.name for f in dataclasses.fields(TrainConfig)}
    loss_fields = {f.name for f in dataclasses.fields(LossConfig)}
    d = config.to_dict()
    for key, value in overrides.items():
        if key in top and key != "loss":
            d[key] = value
        elif key in loss_fields:
            d["loss"][key] = value
        else:
            raise ValueError(f"unknown override {key!r}")
    return TrainConfig.from_dict(d)


# -- optimiser ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              lr: float, beta1: float, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """Bias-corrected Adam update in place. Returns False (and skips) on a non-finite gradient."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
    if not all(torch.isfinite(g).all() for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient; Adam step skipped (%d so far)", state.skipped)
        return False
    state.step += 1
    bc1 = 1 - beta1 ** state.step
    bc2 = 1 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return True


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    generator: GeneratorNet
    discriminator: DiscriminatorNet | None = None
    opt_g: AdamState | None = None
    opt_d: AdamState | None = None
    epochs_pretrain: int = 0
    epochs_finetune: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def epoch_label(self) -> str:
        if self.epochs_finetune:
            return f"{self.epochs_pretrain}+{self.epochs_finetune}"
        return str(self.epochs_pretrain)


def _params(module: torch.nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(n, p) for n, p in module.named_parameters()]


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    tensors = {f"generator.{k}": v for k, v in ckpt.generator.state_dict().items()}
    meta = {
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.hash(),
        "generator_arch": ckpt.generator.arch,
        "discriminator_arch": ckpt.discriminator.arch if ckpt.discriminator is not None else None,
        "epochs_pretrain": ckpt.epochs_pretrain,
        "epochs_finetune": ckpt.epochs_finetune,
        "epochs": ckpt.epoch_label,
    }
    if ckpt.discriminator is not None:
        tensors.update({f"discriminator.{k}": v for k, v in ckpt.discriminator.state_dict().items()})
    for tag, module, state in (("opt_g", ckpt.generator, ckpt.opt_g), ("opt_d", ckpt.discriminator, ckpt.opt_d)):
        if state is None or module is None:
            continue
        names = [n for n, _ in _params(module)]
        for n, m, v in zip(names, state.m, state.v):
            tensors[f"{tag}.m.{n}"] = m
            tensors[f"{tag}.v.{n}"] = v
        meta[f"{tag}_step"] = state.step
        meta[f"{tag}_skipped"] = state.skipped
    save_tensors(path, tensors, meta)


def _restore_state(module, tensors, prefix):
    sd = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    try:
        module.load_state_dict(sd, strict=True)
    except RuntimeError as err:
        raise ValueError(f"checkpoint does not match the network architecture: {err}") from None


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    tensors, meta = load_tensors(path)
    config = TrainConfig.from_dict(meta["config"])
    gen = GeneratorNet(**meta["generator_arch"])
    _restore_state(gen, tensors, "generator.")
    disc = None
    if meta.get("discriminator_arch"):
        disc = DiscriminatorNet(**meta["discriminator_arch"])
        _restore_state(disc, tensors, "discriminator.")
    states = {}
    for tag, module in (("opt_g", gen), ("opt_d", disc)):
        if module is None or f"{tag}_step" not in meta:
            states[tag] = None
            continue
        names = [n for n, _ in _params(module)]
        states[tag] = AdamState([tensors[f"{tag}.m.{n}"] for n in names],
                                [tensors[f"{tag}.v.{n}"] for n in names],
                                meta[f"{tag}_step"], meta.get(f"{tag}_skipped", 0))
    return Checkpoint(config, gen, disc, states["opt_g"], states["opt_d"],
                      meta["epochs_pretrain"], meta["epochs_finetune"])


# -- data plumbing --------------------------------------------------------------

@dataclass
class PatchBatch:
    x: torch.Tensor
    y: torch.Tensor
    m_pt: torch.Tensor
    m_gr: torch.Tensor

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx) -> "PatchBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return PatchBatch(self.x[idx], self.y[idx], self.m_pt[idx], self.m_gr[idx])


def stack_patches(patches: Sequence[PatchSample], dtype=torch.float32) -> PatchBatch:
    if not patches:
        raise ValueError("dataset is empty")

    def cat(attr):
        return torch.from_numpy(np.stack([getattr(p, attr) for p in patches])).to(dtype)

    return PatchBatch(cat("input"), cat("target"), cat("m_pt"), cat("m_gr"))


def data_statistics(batch: PatchBatch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-channel input mean/std and the masked target mean used as output scale."""
    x = batch.x.double()
    mean = x.mean(dim=(0, 2, 3))
    std = x.std(dim=(0, 2, 3), unbiased=False).clamp_min(1e-6)
    mask = batch.m_pt > 0
    scale = batch.y.double()[mask].mean() if mask.any() else torch.tensor(1.0)
    if not torch.isfinite(scale) or scale <= 0:
        scale = torch.tensor(1.0)
    return mean.float(), std.float(), scale.float()


def _set_stats(module, mean, std, scale):
    with torch.no_grad():
        module.input_mean.copy_(mean)
        module.input_std.copy_(std)
        module.target_scale.copy_(scale)


@torch.no_grad()
def predict_patches(gen: GeneratorNet, x: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    was_training = gen.training
    gen.eval()
    out = torch.cat([gen(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])
    gen.train(was_training)
    return out


def evaluate_masked_l1(gen: GeneratorNet, batch: PatchBatch, batch_size: int = 16) -> float:
    """Mean masked L1 (pseudo-target mask) of ``gen`` over ``batch`` in eval mode."""
    pred = predict_patches(gen, batch.x, batch_size)
    return float(masked_l1(batch.y, pred, batch.m_pt))


# -- training loop ----------------------------------------------------------------

def _check_data(config: TrainConfig, batch: PatchBatch):
    if batch.x.shape[1] != config.in_channels:
        raise ValueError(f"config expects {config.in_channels} input channels, data has {batch.x.shape[1]}")


def _run_epochs(ckpt: Checkpoint, batch: PatchBatch, config: TrainConfig, loss_cfg: LossConfig,
                log_path: str | os.PathLike | None, first_epoch: int) -> list[dict]:
    gen, disc = ckpt.generator, ckpt.discriminator
    adversarial = loss_cfg.adversarial
    g_params = [p for _, p in _params(gen)]
    d_params = [p for _, p in _params(disc)] if adversarial else []
    rng = np.random.default_rng(config.seed)
    gen.train()
    if disc is not None:
        disc.train()

    history = []
    n = len(batch)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sums = dict.fromkeys(("l1", "gan_g", "gan_d", "fft", "total"), 0.0)
        order = rng.permutation(n)
        n_batches = 0
        for start in range(0, n, config.batch_size):
            b = batch.take(order[start:start + config.batch_size])
            mg, mp = b.m_gr, b.m_pt
            if adversarial:
                with torch.no_grad():
                    fake = gen(b.x)
                d_loss = 0.0
                for m in (mg, mp):
                    xm = b.x * m
                    d_loss = d_loss + gan_d_term(disc(xm, m * b.y)[0], disc(xm, m * fake)[0], loss_cfg)
                d_grads = torch.autograd.grad(d_loss, d_params)
                adam_step(d_params, d_grads, ckpt.opt_d, config.lr, config.beta1, config.beta2, config.eps)
                sums["gan_d"] += float(d_loss.detach())

            y_hat = gen(b.x)
            d_gr = d_pt = None
            if adversarial:
                d_gr = disc(b.x * mg, mg * y_hat)[0]
                d_pt = disc(b.x * mp, mp * y_hat)[0]
            rep = decomposed_total(b.y, y_hat, d_gr, d_pt, mg, mp, loss_cfg)
            g_grads = torch.autograd.grad(rep.total, g_params, allow_unused=True)
            g_grads = [torch.zeros_like(p) if g is None else g for p, g in zip(g_params, g_grads)]
            adam_step(g_params, g_grads, ckpt.opt_g, config.lr, config.beta1, config.beta2, config.eps)
            for k in ("l1", "gan_g", "fft", "total"):
                sums[k] += float(getattr(rep, k).detach())
            n_batches += 1
        row = {"epoch": first_epoch + epoch + 1}
        row.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        row["wall_seconds"] = time.perf_counter() - t0
        history.append(row)
        log.info("epoch %d: total %.4g l1 %.4g", row["epoch"], row["total"], row["l1"])
    if log_path is not None:
        _append_log(log_path, history)
    return history


def _append_log(path, rows):
    path = Path(path)
    existing = path.read_text() if path.exists() else ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    if not existing:
        writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(path, existing + buf.getvalue())


def _new_discriminator(config: TrainConfig) -> DiscriminatorNet:
    return DiscriminatorNet(config.in_channels, config.discriminator, config.ndf,
                            config.disc_norm or config.norm, seed=config.seed + 1)


def pretrain(config: TrainConfig, patches: Sequence[PatchSample] | PatchBatch,
             log_path: str | os.PathLike | None = None) -> Checkpoint:
    """Train a PAR U-Net (masked L1) or cGAN U-Net (L1 + GAN, masked) from scratch."""
    if config.stage != "pretrain":
        raise ValueError("pretrain() needs a config with stage='pretrain'")
    batch = patches if isinstance(patches, PatchBatch) else stack_patches(patches)
    _check_data(config, batch)
    torch.manual_seed(config.seed)
    loss_cfg = config.effective_loss()
    gen = GeneratorNet(**config.generator_arch(), seed=config.seed)
    stats = data_statistics(batch)
    _set_stats(gen, *stats)
    disc = None
    if config.model == "cgan_unet" and loss_cfg.adversarial:
        disc = _new_discriminator(config)
        _set_stats(disc, *stats)
    ckpt = Checkpoint(config, gen, disc, AdamState.zeros_like([p for _, p in _params(gen)]),
                      AdamState.zeros_like([p for _, p in _params(disc)]) if disc is not None else None)
    ckpt.history = _run_epochs(ckpt, batch, config, loss_cfg, log_path, 0)
    ckpt.epochs_pretrain = config.epochs
    return ckpt


def finetune(config: TrainConfig, checkpoint: Checkpoint, patches: Sequence[PatchSample] | PatchBatch,
             log_path: str | os.PathLike | None = None) -> Checkpoint:
    """Continue training a pretrained generator under the fine-tuning objective.

    A discriminator is created fresh when the objective is adversarial and
    the checkpoint has none (PAR U-Net start) or one of a different variant.
    Optimiser moments restart at zero.
    """
    if config.stage != "finetune":
        raise ValueError("finetune() needs a config with stage='finetune'")
    if checkpoint.generator.arch != config.generator_arch():
        raise ValueError(f"checkpoint generator {checkpoint.generator.arch} does not match config "
                         f"{config.generator_arch()}")
    batch = patches if isinstance(patches, PatchBatch) else stack_patches(patches)
    _check_data(config, batch)
    torch.manual_seed(config.seed)
    loss_cfg = config.effective_loss()
    gen = copy.deepcopy(checkpoint.generator)
    disc = None
    if loss_cfg.adversarial:
        old = checkpoint.discriminator
        want = dict(in_channels=config.in_channels, variant=config.discriminator, ndf=config.ndf,
                    norm=config.disc_norm or config.norm)
        if old is not None and old.arch == want:
            disc = copy.deepcopy(old)
        else:
            disc = _new_discriminator(config)
            _set_stats(disc, gen.input_mean, gen.input_std, gen.target_scale)
    ckpt = Checkpoint(config, gen, disc, AdamState.zeros_like([p for _, p in _params(gen)]),
                      AdamState.zeros_like([p for _, p in _params(disc)]) if disc is not None else None,
                      checkpoint.epochs_pretrain, checkpoint.epochs_finetune)
    first = checkpoint.epochs_pretrain + checkpoint.epochs_finetune
    ckpt.history = _run_epochs(ckpt, batch, config, loss_cfg, log_path, first)
    ckpt.epochs_finetune += config.epochs
    return ckpt


# -- hyperparameter search ----------------------------------------------------------

SEARCH_GRIDS = {
    "tanzania": {
        "batch_size": [2, 4, 6],
        "beta1": [0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "lr": [1e-2, 1e-3, 2e-3, 1e-4, 2e-4, 2e-5, 1e-5],
        "encoder": ["resnet18", "resnet34", "resnet50"],
        "depth": [4, 5],
        "discriminator": ["pixelgan", "patchgan16", "patchgan34"],
        "gan_kind": ["vgan", "lsgan"],
        "norm": ["instance", "batch", "none"],
        "alpha": [0.01, 0.1, 1],
        "gamma": [1e-8, 3e-8, 5e-8, 7e-8, 9e-8, 1e-7],
        "delta": [100, 200, 300, 400, 500],
    },
    "norway": {
        "batch_size": [8, 32, 64, 128],
        "beta1": [0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "lr": [1e-2, 1e-3, 2e-3, 1e-4, 2e-4, 2e-5, 1e-5],
        "encoder": ["resnet18", "resnet34", "resnet50"],
        "depth": [4, 5],
        "discriminator": ["pixelgan", "patchgan16", "patchgan34"],
        "gan_kind": ["vgan", "lsgan"],
        "norm": ["instance", "batch", "none"],
        "alpha": [0.01, 0.1, 1],
        "gamma": [1e-8, 3e-8, 5e-8, 7e-8, 9e-8, 1e-7],
        "delta": [200, 300, 400, 500, 600, 700],
    },
}


def expand_grid(grid: dict[str, list] | Sequence[dict]) -> list[dict]:
    if isinstance(grid, dict):
        keys = sorted(grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    return [dict(g) for g in grid]


def _rmse_masked(pred: torch.Tensor, batch: PatchBatch) -> float:
    m = batch.m_pt > 0
    if not m.any():
        raise ValueError("validation patches hold no target pixels")
    r = (pred - batch.y)[m].double()
    return math.sqrt(float((r * r).mean()))


def grid_search(grid: dict[str, list] | Sequence[dict], base: TrainConfig, folds: CvSplit,
                units: Sequence[Sequence[PatchSample]],
                checkpoint: Checkpoint | None = None) -> list[dict]:
    """k-fold CV over ``units`` (e.g. superpatches) for every grid point.

    Training uses all patches of the training units; validation uses the
    un-augmented patches (tag 0) of the held-out unit fold. Results are
    ranked by mean validation RMSE, ties broken by the median.
    """
    configs = expand_grid(grid)
    if not configs:
        raise ValueError("empty grid")
    if base.stage == "finetune" and checkpoint is None:
        raise ValueError("fine-tuning grid search needs a pretrained checkpoint")
    results = []
    for overrides in configs:
        cfg = apply_overrides(base, overrides)
        fold_rmse = []
        for f in range(folds.k):
            train = [p for i in folds.training(f) for p in units[i]]
            val = [p for i in folds.validation(f) for p in units[i] if p.tag == 0]
            if not train or not val:
                raise ValueError(f"fold {f} has no training or validation patches")
            if cfg.stage == "pretrain":
                ck = pretrain(cfg, train)
            else:
                ck = finetune(cfg, checkpoint, train)
            vb = stack_patches(val)
            fold_rmse.append(_rmse_masked(predict_patches(ck.generator, vb.x), vb))
        results.append({
            "overrides": overrides,
            "fold_rmse": fold_rmse,
            "mean_rmse": statistics.fmean(fold_rmse),
            "median_rmse": statistics.median(fold_rmse),
        })
    results.sort(key=lambda r: (r["mean_rmse"], r["median_rmse"]))
    for rank, r in enumerate(results, 1):
        r["rank"] = rank
    return results
