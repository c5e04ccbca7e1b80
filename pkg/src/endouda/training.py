"""Two-stage training: generative stage (RMSProp) then segmentation (Adam).

Learning-rate plateau reduction and early stopping both key off the
validation loss with the same non-improvement rule: a loss counts as improved
only if it is below best-so-far minus a small absolute tolerance. The plateau
counter resets after every reduction, so k reductions correspond to k
disjoint patience-length windows.
"""

import copy
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .edges import sobel_edge_map
from .losses import kl_gaussian, reconstruction_loss, segmentation_loss

log = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-6


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    stage: str  # "vae" | "seg"
    optimizer: str = None  # defaults by stage: rmsprop (vae) / adam (seg)
    lr: float = None  # defaults by stage: 1e-4 (vae) / 1e-3 (seg)
    adam_betas: tuple = (0.5, 0.999)
    max_epochs: int = 100
    batch_size: int = 64
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    early_stop_patience: int = 10
    seed: int = 0
    beta_kl: float = 1e-3
    freeze_encoder: bool = True  # seg stage only
    seg_on_raw: bool = False  # ablation: segment raw images instead of reconstructions

    def __post_init__(self):
        if self.stage not in ("vae", "seg"):
            raise ValueError(f"stage must be 'vae' or 'seg', got {self.stage!r}")
        if self.optimizer is None:
            self.optimizer = "rmsprop" if self.stage == "vae" else "adam"
        if self.lr is None:
            self.lr = 1e-4 if self.stage == "vae" else 1e-3
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")


class PlateauScheduler:
    """Multiply lr by `factor` after each disjoint `patience`-epoch window
    without validation improvement."""

    def __init__(self, lr, factor=0.1, patience=3, tol=IMPROVEMENT_TOL):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.tol = tol
        self.best = None
        self.stale = 0

    def step(self, val_loss):
        if self.best is None or val_loss < self.best - self.tol:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


class EarlyStopper:
    """Signal a stop exactly `patience` epochs after the best validation epoch."""

    def __init__(self, patience=10, tol=IMPROVEMENT_TOL):
        self.patience = patience
        self.tol = tol
        self.best = None
        self.stale = 0

    def step(self, val_loss):
        if self.best is None or val_loss < self.best - self.tol:
            self.best = val_loss
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    stop_reason: str = "max_epochs"

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for r in self.records:
                w.writerow(
                    [r.epoch, f"{r.train_loss:.17g}", f"{r.val_loss:.17g}", f"{r.lr:.17g}"]
                )
        return path

    @property
    def val_losses(self):
        return [r.val_loss for r in self.records]


def _build_optimizer(cfg, params):
    params = list(params)
    if not params:
        raise TrainingError("no trainable parameters for this stage")
    if cfg.optimizer == "rmsprop":
        return torch.optim.RMSprop(params, lr=cfg.lr)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.adam_betas)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def _stack(dataset):
    """Signed images, masks, and precomputed edge maps as stacked tensors."""
    images = dataset.images()
    edges = sobel_edge_map(images).data
    return images.to_signed().data, dataset.masks().data, edges


def _fit(model, cfg, n_train, train_step, val_eval):
    """Shared epoch loop: schedule, early stop, best-checkpoint restore."""
    opt_params = [p for p in model.parameters() if p.requires_grad]
    optimizer = _build_optimizer(cfg, opt_params)
    scheduler = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience)
    stopper = EarlyStopper(cfg.early_stop_patience)
    order_rng = np.random.default_rng(cfg.seed)
    logrec = TrainLog()
    best_val = float("inf")
    best_state = None
    lr = cfg.lr
    t0 = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = order_rng.permutation(n_train)
        epoch_losses = []
        for start in range(0, n_train, cfg.batch_size):
            idx = torch.from_numpy(perm[start : start + cfg.batch_size].copy())
            optimizer.zero_grad()
            loss = train_step(idx)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss {loss.item()} at epoch {epoch} "
                    f"(stage {cfg.stage}, lr {lr:.3g})"
                )
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        val_loss = val_eval()
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        logrec.records.append(
            EpochRecord(epoch, float(np.mean(epoch_losses)), val_loss, lr, time.perf_counter() - t0)
        )
        if val_loss < best_val - IMPROVEMENT_TOL:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
        lr = scheduler.step(val_loss)
        if stopper.step(val_loss):
            logrec.stop_reason = "early_stop"
            break
    else:
        logrec.stop_reason = "max_epochs"

    if best_state is not None:
        model.load_state_dict(best_state)
    return logrec


def train_vae(vae, train_set, val_set, cfg):
    """Stage 1: fit the VAE on source images, minimizing reconstruction error
    plus beta_kl times the KL term; schedule/stopping follow validation
    reconstruction loss; the best-validation weights are restored."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("train and val splits must be non-empty")
    if cfg.stage != "vae":
        raise ValueError("cfg.stage must be 'vae'")
    x_tr, _, e_tr = _stack(train_set)
    x_va, _, e_va = _stack(val_set)
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    latent_dim = vae.cfg.latent_dim

    vae.train()

    def train_step(idx):
        x, e = x_tr[idx], e_tr[idx]
        noise = torch.randn(len(idx), latent_dim, generator=noise_gen)
        recon, mu, logvar = vae(x, e, noise)
        loss = reconstruction_loss(x, recon)
        if cfg.beta_kl > 0:
            loss = loss + cfg.beta_kl * kl_gaussian(mu, logvar)
        return loss

    def val_eval():
        vae.eval()
        total = 0.0
        with torch.no_grad():
            for start in range(0, len(val_set), cfg.batch_size):
                x, e = x_va[start : start + cfg.batch_size], e_va[start : start + cfg.batch_size]
                recon, _, _ = vae(x, e, None)
                total += reconstruction_loss(x, recon).item() * x.shape[0]
        vae.train()
        return total / len(val_set)

    logrec = _fit(vae, cfg, len(train_set), train_step, val_eval)
    vae.eval()
    log.info("vae training done: %d epochs, stop=%s", len(logrec.records), logrec.stop_reason)
    return vae, logrec


def train_segmentation(vae, seg, train_set, val_set, cfg):
    """Stage 2: fit the U-Net head on VAE reconstructions of the training
    images against ground-truth masks (BCE + Dice), encoder frozen unless
    cfg.freeze_encoder is False."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("train and val splits must be non-empty")
    if cfg.stage != "seg":
        raise ValueError("cfg.stage must be 'seg'")
    x_tr, m_tr, e_tr = _stack(train_set)
    x_va, m_va, e_va = _stack(val_set)

    vae.eval()
    seg.train()
    prior_grad_flags = [p.requires_grad for p in seg.encoder.parameters()]
    if cfg.freeze_encoder:
        for p in seg.encoder.parameters():
            p.requires_grad_(False)

    def seg_input(x, e):
        if cfg.seg_on_raw:
            return x
        with torch.no_grad():
            recon, _, _ = vae(x, e, None)
        return recon

    def train_step(idx):
        x, m, e = x_tr[idx], m_tr[idx], e_tr[idx]
        p = seg(seg_input(x, e))
        return segmentation_loss(p, m)

    def val_eval():
        seg.eval()
        total = 0.0
        with torch.no_grad():
            for start in range(0, len(val_set), cfg.batch_size):
                sl = slice(start, start + cfg.batch_size)
                p = seg(seg_input(x_va[sl], e_va[sl]))
                total += segmentation_loss(p, m_va[sl]).item() * p.shape[0]
        seg.train()
        return total / len(val_set)

    try:
        logrec = _fit(seg, cfg, len(train_set), train_step, val_eval)
    finally:
        for p, flag in zip(seg.encoder.parameters(), prior_grad_flags):
            p.requires_grad_(flag)
    seg.eval()
    log.info("seg training done: %d epochs, stop=%s", len(logrec.records), logrec.stop_reason)
    return seg, logrec
