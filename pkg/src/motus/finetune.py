"""Two-stage supervised fine-tuning and the cross-validated experiment runner.

Stage 1 trains a freshly initialised classifier head on a frozen backbone.
Stage 2 unfreezes everything, warms the learning rate up linearly, then
switches to plateau scheduling, with sample/sensor dropout augmentation and
Transformer dropout. Training without pre-training (and the ablation that
skips stage 1) uses the stage 2 recipe without warm-up.

Minibatches are runs of up to 260 consecutive frames from one recording.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from motus.dataset import AugmentConfig, Fold, augment, epoch_rng, subsample_labels
from motus.evaluation import ConfusionMatrix, EvalReport, uaf1
from motus.ingest import FrameTensor
from motus.model import ModelConfig, MovementClassifier, make_adam

log = logging.getLogger(__name__)

CHUNK_LEN = 260
CHANCE_UAF1 = 1.0 / 9.0


class FinetuneDiverged(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass
class StageConfig:
    lr: float = 4e-5
    plateau_factor: float = 0.5
    plateau_patience: int = 30
    early_stop_patience: int = 100
    max_epochs: int = 1000
    warmup_epochs: int = 0
    warmup_start_lr: float = 4e-8
    augment: AugmentConfig | None = None
    transformer_dropout: float = 0.0


def _stage2_default() -> StageConfig:
    return StageConfig(warmup_epochs=20, augment=AugmentConfig.finetune(), transformer_dropout=0.40)


@dataclass
class FinetuneConfig:
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=_stage2_default)
    chunk_len: int = CHUNK_LEN
    k: int = 10
    divergence_patience: int = 20

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        d = dict(d)
        for key in ("stage1", "stage2"):
            if key in d:
                s = dict(d[key])
                s["augment"] = AugmentConfig(**s["augment"]) if s.get("augment") else None
                d[key] = StageConfig(**s)
        return cls(**d)

    def baseline_stage(self) -> StageConfig:
        """Stage 2 recipe without warm-up, for training everything from the start."""
        return StageConfig(**{**asdict(self.stage2), "augment": self.stage2.augment,
                              "warmup_epochs": 0})


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights normalised to mean 1 over present classes."""
    c = np.asarray(counts, dtype=np.float64)
    if c.sum() == 0:
        raise ValueError("all class counts are zero")
    w = np.zeros_like(c)
    present = c > 0
    w[present] = 1.0 / c[present]
    w[present] /= w[present].mean()
    return w


def weighted_ce(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor,
                qualified: torch.Tensor) -> torch.Tensor:
    """Mean over qualified frames of w_y * -log softmax_y."""
    if not bool(qualified.any()):
        raise ValueError("no qualified frames in batch")
    logp = F.log_softmax(logits[qualified], dim=-1)
    y = labels[qualified]
    nll = -logp.gather(-1, y[:, None])[:, 0]
    return (weights.to(logits.dtype)[y] * nll).mean()


# --------------------------------------------------------------------------
# data plumbing
# --------------------------------------------------------------------------

@dataclass
class Chunk:
    recording_id: str
    split: str
    start: int
    frames: np.ndarray  # (T, 120, 24)
    labels: np.ndarray  # (T,)
    mask: np.ndarray  # (T,) frames that count in loss / metric


def make_chunks(ft: FrameTensor, split: str, mask: np.ndarray, chunk_len: int = CHUNK_LEN) -> list[Chunk]:
    labels = np.where(ft.labels >= 0, ft.labels, 0)
    return [Chunk(ft.recording_id, split, s, ft.frames[s:s + chunk_len], labels[s:s + chunk_len],
                  mask[s:s + chunk_len]) for s in range(0, len(ft), chunk_len)]


@dataclass
class FoldData:
    train: list[Chunk]
    val: list[Chunk]
    test: list[Chunk]
    class_counts: np.ndarray

    def provenance(self) -> dict:
        return {name: sorted({c.recording_id for c in getattr(self, name)})
                for name in ("train", "val", "test")}


def prepare_fold(corpus: dict[str, FrameTensor], fold: Fold, label_fraction: float,
                 seed: int, chunk_len: int = CHUNK_LEN, num_classes: int = 9) -> FoldData:
    rng = np.random.default_rng([seed, 7])
    parts = {}
    for split in ("train", "val"):
        fts = [corpus[r] for r in getattr(fold, split)]
        masks = subsample_labels([ft.labels for ft in fts], [ft.qualified for ft in fts],
                                 label_fraction, rng, num_classes)
        parts[split] = [c for ft, m in zip(fts, masks) for c in make_chunks(ft, split, m, chunk_len)]
    test = [c for r in fold.test
            for c in make_chunks(corpus[r], "test", corpus[r].qualified & corpus[r].agreed, chunk_len)]
    counts = np.zeros(num_classes, np.int64)
    for c in parts["train"]:
        np.add.at(counts, c.labels[c.mask], 1)
    return FoldData(train=parts["train"], val=parts["val"], test=test, class_counts=counts)


def _tensor(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))[None]


def predict(model: MovementClassifier, chunks: list[Chunk]) -> list[np.ndarray]:
    model.eval()
    out = []
    with torch.no_grad():
        for c in chunks:
            out.append(model(_tensor(c.frames))[0].argmax(-1).numpy())
    return out


def evaluate(model: MovementClassifier, chunks: list[Chunk], num_classes: int = 9) -> ConfusionMatrix:
    cm = ConfusionMatrix(np.zeros((num_classes, num_classes), np.int64))
    for c, pred in zip(chunks, predict(model, chunks)):
        cm.accumulate(c.labels[c.mask], pred[c.mask])
    return cm


def _score(cm: ConfusionMatrix) -> float:
    return uaf1(cm).uaf1 if cm.total else 0.0


def warmup_lr(epoch: int, stage: StageConfig) -> float:
    if epoch >= stage.warmup_epochs:
        return stage.lr
    lo = stage.warmup_start_lr
    return lo + (stage.lr - lo) * epoch / stage.warmup_epochs


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

class _EarlyStopper:
    def __init__(self, optimizer, stage: StageConfig):
        self.stage = stage
        self.opt = optimizer
        self.best = -np.inf
        self.best_epoch = -1
        self.bad = 0
        self.sched = None

    def lr_for(self, epoch: int) -> None:
        if epoch < self.stage.warmup_epochs:
            for g in self.opt.param_groups:
                g["lr"] = warmup_lr(epoch, self.stage)
        elif self.sched is None:
            for g in self.opt.param_groups:
                g["lr"] = self.stage.lr
            self.sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
                self.opt, mode="max", factor=self.stage.plateau_factor,
                patience=self.stage.plateau_patience, threshold=0.0)

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        improved = score > self.best
        if improved:
            self.best, self.best_epoch, self.bad = score, epoch, 0
        else:
            self.bad += 1
        if self.sched is not None:
            self.sched.step(score)
        return improved, self.bad >= self.stage.early_stop_patience


def train_head(model: MovementClassifier, data: FoldData, stage: StageConfig,
               weights: torch.Tensor, seed: int) -> tuple[MovementClassifier, list[dict]]:
    """Stage 1: only the head learns; backbone features are computed once."""
    model.backbone.eval()
    with torch.no_grad():
        train_feats = [model.backbone(_tensor(c.frames))[0] for c in data.train]
        val_feats = [model.backbone(_tensor(c.frames))[0] for c in data.val]
    opt = make_adam(model.head.parameters(), stage.lr)
    stopper = _EarlyStopper(opt, stage)
    best_head = copy.deepcopy(model.head.state_dict())
    history = []
    torch.manual_seed(seed)
    for epoch in range(stage.max_epochs):
        stopper.lr_for(epoch)
        model.head.train()
        order = epoch_rng(seed, epoch).permutation(len(data.train))
        losses = []
        for i in order:
            c = data.train[i]
            assert c.split == "train"
            if not c.mask.any():
                continue
            logits = model.head(train_feats[i])
            loss = weighted_ce(logits[0], torch.from_numpy(c.labels), weights, torch.from_numpy(c.mask))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.head.eval()
        cm = ConfusionMatrix(np.zeros((model.cfg.num_classes,) * 2, np.int64))
        with torch.no_grad():
            for c, feats in zip(data.val, val_feats):
                pred = model.head(feats)[0].argmax(-1).numpy()
                cm.accumulate(c.labels[c.mask], pred[c.mask])
        score = _score(cm)
        improved, stop = stopper.update(epoch, score)
        if improved:
            best_head = copy.deepcopy(model.head.state_dict())
        history.append({"stage": 1, "epoch": epoch, "train_loss": float(np.mean(losses)) if losses else 0.0,
                        "val_uaf1": score, "lr": opt.param_groups[0]["lr"]})
        if stop:
            break
    model.head.load_state_dict(best_head)
    return model, history


def train_full(model: MovementClassifier, data: FoldData, stage: StageConfig,
               weights: torch.Tensor, seed: int, stage_id: int = 2,
               divergence_patience: int | None = 20) -> tuple[MovementClassifier, list[dict]]:
    """Train every parameter; selection and scheduling on validation UAF1."""
    model.backbone.transformer.set_dropout(stage.transformer_dropout)
    opt = make_adam(model.parameters(), stage.lr)
    stopper = _EarlyStopper(opt, stage)
    best_state = copy.deepcopy(model.state_dict())
    history = []
    rng = np.random.default_rng([seed, 3])
    torch.manual_seed(seed)
    below = 0
    for epoch in range(stage.max_epochs):
        stopper.lr_for(epoch)
        model.train()
        order = epoch_rng(seed, epoch).permutation(len(data.train))
        losses = []
        for i in order:
            c = data.train[i]
            assert c.split == "train"
            if not c.mask.any():
                continue
            frames = c.frames
            if stage.augment is not None:
                frames = augment(frames, stage.augment, rng)
            logits = model(_tensor(frames))[0]
            loss = weighted_ce(logits, torch.from_numpy(c.labels), weights, torch.from_numpy(c.mask))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        score = _score(evaluate(model, data.val, model.cfg.num_classes))
        improved, stop = stopper.update(epoch, score)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        history.append({"stage": stage_id, "epoch": epoch,
                        "train_loss": float(np.mean(losses)) if losses else 0.0,
                        "val_uaf1": score, "lr": opt.param_groups[0]["lr"]})
        below = below + 1 if score < CHANCE_UAF1 else 0
        if divergence_patience and below >= divergence_patience:
            raise FinetuneDiverged(
                f"validation UAF1 below chance for {below} consecutive epochs", history)
        if stop:
            break
    model.load_state_dict(best_state)
    model.backbone.transformer.set_dropout(0.0)
    return model, history


def build_model(cfg: ModelConfig, backbone_state: dict | None, seed: int) -> MovementClassifier:
    torch.manual_seed(seed)
    model = MovementClassifier(cfg)
    if backbone_state is not None:
        model.backbone.load_state_dict(backbone_state)
    return model


def finetune_stage1(model, data, cfg: FinetuneConfig, seed: int):
    w = torch.from_numpy(class_weights(data.class_counts)).float()
    return train_head(model, data, cfg.stage1, w, seed)


def finetune_stage2(model, data, cfg: FinetuneConfig, seed: int):
    w = torch.from_numpy(class_weights(data.class_counts)).float()
    return train_full(model, data, cfg.stage2, w, seed, 2, cfg.divergence_patience)


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

@dataclass
class Arm:
    """One row of the results table.

    ``backbone_state`` is None for the randomly initialised Transformer.
    ``skip_stage1`` trains a pre-trained backbone and new head all at once.
    """

    name: str
    label_fraction: float = 1.0
    seed: int = 0
    backbone_state: dict | None = None
    skip_stage1: bool = False

    @property
    def pretrained(self) -> bool:
        return self.backbone_state is not None


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def run_fold(arm: Arm, corpus: dict[str, FrameTensor], fold: Fold, model_cfg: ModelConfig,
             cfg: FinetuneConfig, seed: int) -> tuple[ConfusionMatrix, list[dict], FoldData]:
    data = prepare_fold(corpus, fold, arm.label_fraction, seed, cfg.chunk_len, model_cfg.num_classes)
    leaked = set(data.provenance()["test"]) & (
        set(data.provenance()["train"]) | set(data.provenance()["val"]))
    if leaked:
        raise RuntimeError(f"test recordings leaked into training: {sorted(leaked)}")
    model = build_model(model_cfg, arm.backbone_state, seed)
    w = torch.from_numpy(class_weights(data.class_counts)).float()
    history = []
    if arm.pretrained and not arm.skip_stage1:
        model, h1 = train_head(model, data, cfg.stage1, w, seed)
        model, h2 = train_full(model, data, cfg.stage2, w, seed, 2, cfg.divergence_patience)
        history = h1 + h2
    else:
        model, history = train_full(model, data, cfg.baseline_stage(), w, seed, 0,
                                    cfg.divergence_patience)
    return evaluate(model, data.test, model_cfg.num_classes), history, data


def run_experiment(arm: Arm, corpus: dict[str, FrameTensor], folds: list[Fold],
                   model_cfg: ModelConfig, cfg: FinetuneConfig, on_fold=None) -> EvalReport:
    """Cross-validated fine-tuning of one arm with an aggregate confusion matrix."""
    total = ConfusionMatrix(np.zeros((model_cfg.num_classes,) * 2, np.int64))
    seeds, fold_scores = [], []
    for fold in folds:
        s = fold_seed(arm.seed, fold.index)
        cm, history, _ = run_fold(arm, corpus, fold, model_cfg, cfg, s)
        total = total + cm
        seeds.append(s)
        fold_scores.append(_score(cm))
        log.info("arm %s fold %d uaf1 %.4f", arm.name, fold.index, fold_scores[-1])
        if on_fold is not None:
            on_fold(fold.index, cm, history)
    return EvalReport(arm=arm.name, label_fraction=arm.label_fraction, seed=arm.seed,
                      confusion=total, fold_seeds=seeds, fold_uaf1=fold_scores,
                      extra={"pretrained": arm.pretrained, "skip_stage1": arm.skip_stage1,
                             "k": len(folds)})
