"""Masked latent prediction pre-training with an EMA teacher.

The student sees encoder embeddings with masked frames zeroed out and
regresses, at the masked real frames, the average of the teacher's
instance-normalised feed-forward outputs from its top K blocks. Encoder and
positional encoder are one shared copy; only the Transformer blocks have a
separate EMA teacher copy.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn as nn

from motus.dataset import AugmentConfig, augment, batch_pretrain
from motus.model import Backbone, ModelConfig, instance_normalize, make_adam, masked_mse
from motus.screening import Sequence, flatness

log = logging.getLogger(__name__)


class PretrainCollapse(RuntimeError):
    def __init__(self, message: str, flatness_stats: dict):
        super().__init__(message)
        self.flatness_stats = flatness_stats


class Health(str, Enum):
    HEALTHY = "healthy"
    COLLAPSED = "collapsed"


@dataclass
class MaskConfig:
    p_start: float = 0.15
    span: int = 3

    def __post_init__(self):
        if not 0.0 <= self.p_start < 1.0:
            raise ValueError(f"p_start must lie in [0, 1), got {self.p_start}")
        if self.span < 1:
            raise ValueError(f"span must be >= 1, got {self.span}")


@dataclass
class EmaSchedule:
    tau0: float = 0.9998
    tau_end: float = 0.99999
    tau_n: int = 10_000

    def __post_init__(self):
        if not self.tau0 <= self.tau_end <= 1.0:
            raise ValueError("need tau0 <= tau_end <= 1")


@dataclass
class PretrainConfig:
    top_k: int | None = 12  # None: all blocks
    lr0: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 15
    early_stop_patience: int = 25
    batch_size: int = 32
    max_epochs: int = 1000
    collapse_var_threshold: float = 1e-6
    max_attempts: int = 3
    val_seed: int = 12345
    mask: MaskConfig = field(default_factory=MaskConfig)
    ema: EmaSchedule = field(default_factory=EmaSchedule)
    augment: AugmentConfig | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        d["mask"] = MaskConfig(**d.get("mask", {}))
        d["ema"] = EmaSchedule(**d.get("ema", {}))
        d["augment"] = AugmentConfig(**d["augment"]) if d.get("augment") else None
        return cls(**d)


def sample_masks(pad_mask: np.ndarray, cfg: MaskConfig, rng: np.random.Generator) -> np.ndarray:
    """Span masks over real frames.

    ``pad_mask`` is (T,) or (B, T) with real frames as a prefix. Each real
    frame starts a span with probability ``p_start``; a span covers the start
    and the following ``span - 1`` frames, clipped at the last real frame.
    """
    pad_mask = np.asarray(pad_mask, dtype=bool)
    starts = (rng.random(pad_mask.shape) < cfg.p_start) & pad_mask
    mask = starts.copy()
    for k in range(1, cfg.span):
        mask[..., k:] |= starts[..., :-k]
    return mask & pad_mask


def ema_tau(step: int, s: EmaSchedule) -> float:
    """Teacher decay, linear from tau0 to tau_end over tau_n updates."""
    if step >= s.tau_n:
        return s.tau_end
    return s.tau0 + (s.tau_end - s.tau0) * step / s.tau_n


class Data2Vec(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.student = Backbone(cfg)
        self.teacher = copy.deepcopy(self.student.transformer)
        for p in self.teacher.parameters():
            p.requires_grad_(False)

    def teacher_outputs(self, z: torch.Tensor, pad_mask: torch.Tensor) -> list[torch.Tensor]:
        """Feed-forward outputs of every teacher block on unmasked embeddings."""
        with torch.no_grad():
            x = self.student.pos(z.detach()) * pad_mask[..., None].to(z.dtype)
            self.teacher.eval()
            _, ff = self.teacher(x, pad_mask)
        return ff

    @torch.no_grad()
    def ema_update(self, tau: float) -> None:
        for pt, ps in zip(self.teacher.parameters(), self.student.transformer.parameters()):
            pt.mul_(tau).add_(ps.detach(), alpha=1.0 - tau)


def teacher_targets(ff_outputs: list[torch.Tensor], pad_mask: torch.Tensor,
                    top_k: int | None = None) -> torch.Tensor:
    """Average of the instance-normalised outputs of the top ``top_k`` blocks."""
    chosen = ff_outputs if top_k is None else ff_outputs[len(ff_outputs) - top_k:]
    if not chosen:
        raise ValueError("top_k selects no blocks")
    return sum(instance_normalize(y, pad_mask) for y in chosen) / len(chosen)


def interior_mask(pad_mask: torch.Tensor, edge: int) -> torch.Tensor:
    """Real frames at least ``edge`` steps away from both ends of the real prefix."""
    n = pad_mask.sum(dim=1, keepdim=True)
    idx = torch.arange(pad_mask.shape[1], device=pad_mask.device)[None]
    return pad_mask & (idx >= edge) & (idx < n - edge)


def temporal_variance(ff_outputs: list[torch.Tensor], pad_mask: torch.Tensor, edge: int = 0) -> float:
    """Mean over blocks, sequences and features of the variance over time.

    ``edge`` frames at each end are left out: the zero padding of the
    positional convolution makes them differ from the rest even when the
    input is constant. Sequences with fewer than two interior frames are
    skipped, unless no sequence has an interior.
    """
    sel = interior_mask(pad_mask, edge) if edge else pad_mask
    usable = sel.sum(dim=1) >= 2
    if not bool(usable.any()):
        sel, usable = pad_mask, pad_mask.sum(dim=1) >= 1
    m = sel[..., None].to(ff_outputs[0].dtype)
    n = m.sum(dim=1, keepdim=True).clamp_min(1.0)
    total = 0.0
    for y in ff_outputs:
        mean = (y * m).sum(dim=1, keepdim=True) / n
        var = (((y - mean) * m) ** 2).sum(dim=1) / n[:, 0]
        total += float(var[usable].mean())
    return total / len(ff_outputs)


def detect_collapse(variance: float, threshold: float = 1e-6) -> Health:
    return Health.COLLAPSED if variance < threshold else Health.HEALTHY


def data2vec_loss(model: Data2Vec, frames, pad_mask, time_mask, top_k=None):
    """Masked regression loss plus the raw teacher outputs (for diagnostics)."""
    z = model.student.embed(frames, pad_mask)
    ff = model.teacher_outputs(z, pad_mask)
    targets = teacher_targets(ff, pad_mask, top_k)
    pred, _ = model.student.contextualize(z, pad_mask, time_mask)
    return masked_mse(pred, targets, time_mask & pad_mask), ff


def pretrain_step(model: Data2Vec, optimizer: torch.optim.Optimizer, frames, pad_mask,
                  time_mask, tau: float, top_k=None) -> float:
    """One student update followed by the EMA teacher update.

    Returns the loss; a batch with no masked frame does nothing and returns 0.
    """
    if not bool((time_mask & pad_mask).any()):
        return 0.0
    model.student.train()
    loss, _ = data2vec_loss(model, frames, pad_mask, time_mask, top_k)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite pre-training loss {float(loss)}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    model.ema_update(tau)
    return loss.item()


def _stack(seqs: list[Sequence]):
    frames = np.stack([s.frames for s in seqs])
    pad = np.stack([s.pad_mask for s in seqs])
    return frames, pad


@dataclass
class PretrainResult:
    state: dict  # best student backbone weights
    log: list[dict]
    attempts: int
    seed: int
    best_val_loss: float


def _flatness_stats(seqs: list[Sequence]) -> dict:
    values = np.array([flatness(s) for s in seqs]) if seqs else np.zeros(1)
    return {"mean": float(values.mean()), "median": float(np.median(values)),
            "min": float(values.min()), "max": float(values.max()), "n": len(seqs)}


def evaluate_pretrain(model: Data2Vec, seqs: list[Sequence], cfg: PretrainConfig) -> tuple[float, float]:
    """Validation loss (fixed masking seed) and teacher temporal variance."""
    rng = np.random.default_rng(cfg.val_seed)
    model.student.eval()
    total = weight = var_total = 0.0
    n_batches = 0
    with torch.no_grad():
        for i in range(0, len(seqs), cfg.batch_size):
            frames, pad = _stack(seqs[i:i + cfg.batch_size])
            tmask = sample_masks(pad, cfg.mask, rng)
            pad_t = torch.from_numpy(pad)
            loss, ff = data2vec_loss(model, torch.from_numpy(frames), pad_t,
                                     torch.from_numpy(tmask), cfg.top_k)
            w = float(tmask.sum())
            total += float(loss) * w
            weight += w
            var_total += temporal_variance(ff, pad_t, model.cfg.pos_pad)
            n_batches += 1
    return (total / weight if weight else 0.0), var_total / max(n_batches, 1)


def pretrain(train: list[Sequence], val: list[Sequence], model_cfg: ModelConfig,
             cfg: PretrainConfig, seed: int = 0, on_epoch=None) -> PretrainResult:
    """Full pre-training loop with plateau LR, early stopping and collapse restarts."""
    if not train or not val:
        raise ValueError("pre-training needs non-empty train and validation sets")
    history: list[dict] = []
    for attempt in range(cfg.max_attempts):
        run_seed = seed + attempt
        torch.manual_seed(run_seed)
        model = Data2Vec(model_cfg)
        opt = make_adam(model.student.parameters(), cfg.lr0)
        sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
            opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience,
            threshold=0.0)
        rng = np.random.default_rng([run_seed, 1])
        step = 0
        best, best_state, bad = float("inf"), None, 0
        collapsed = False
        for epoch in range(cfg.max_epochs):
            losses = []
            tau = ema_tau(step, cfg.ema)
            for batch in batch_pretrain(train, cfg.batch_size, run_seed, epoch):
                frames, pad = _stack(batch)
                if cfg.augment is not None:
                    frames = augment(frames, cfg.augment, rng) * pad[:, :, None, None]
                tmask = sample_masks(pad, cfg.mask, rng)
                tau = ema_tau(step, cfg.ema)
                losses.append(pretrain_step(
                    model, opt, torch.from_numpy(np.ascontiguousarray(frames, np.float32)),
                    torch.from_numpy(pad), torch.from_numpy(tmask), tau, cfg.top_k))
                step += 1
            val_loss, var = evaluate_pretrain(model, val, cfg)
            health = detect_collapse(var, cfg.collapse_var_threshold)
            entry = {"attempt": attempt, "seed": run_seed, "epoch": epoch,
                     "train_loss": float(np.mean(losses)), "val_loss": val_loss,
                     "lr": opt.param_groups[0]["lr"], "tau": tau, "step": step,
                     "collapse_metric": var, "health": health.value}
            history.append(entry)
            log.info("pretrain %s", entry)
            if on_epoch is not None:
                on_epoch(entry)
            if health is Health.COLLAPSED:
                collapsed = True
                break
            if val_loss < best:
                best, bad = val_loss, 0
                best_state = {k: v.detach().clone() for k, v in model.student.state_dict().items()}
            else:
                bad += 1
            sched.step(val_loss)
            if bad >= cfg.early_stop_patience:
                break
        if not collapsed:
            return PretrainResult(state=best_state, log=history, attempts=attempt + 1,
                                  seed=run_seed, best_val_loss=best)
        log.warning("representation collapse in attempt %d (seed %d); restarting", attempt, run_seed)
    raise PretrainCollapse(
        f"representation collapse in all {cfg.max_attempts} attempts",
        {"train": _flatness_stats(train), "val": _flatness_stats(val), "log": history})
