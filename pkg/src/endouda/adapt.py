"""Test-time latent search: pull each target image onto the source manifold.

Starting from the encoder's posterior mean, the latent code of every image is
refined by gradient descent on the joint NCC/SSIM loss between the decoder
output and the target image, with the target's own Sobel edge map feeding the
decoder skip throughout. Model weights are never touched; each image's code
is optimized independently even inside a batch (per-sample losses are summed
before differentiation, so gradients do not couple across images).
"""

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import ImageTensor, MaskTensor, SIGNED, UNIT
from .edges import sobel_edge_map
from .losses import JointLossParams, SsimParams, joint_loss_per_sample
from .models import segment

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    eta: float = 1e-3  # latent step size
    iterations: int = 40
    batch_size: int = 32
    optimizer: str = "plain-gradient"  # or "adam"
    joint: JointLossParams = field(default_factory=JointLossParams)
    ssim: SsimParams = field(default_factory=SsimParams)
    init: str = "encode-target"  # or "prior-sample"
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.optimizer not in ("plain-gradient", "adam"):
            raise ValueError(f"unknown adaptation optimizer {self.optimizer!r}")
        if self.init not in ("encode-target", "prior-sample"):
            raise ValueError(f"unknown init mode {self.init!r}")


@dataclass
class AdaptationTrace:
    """Loss curves of one latent search: arrays of shape [iterations + 1, B]."""

    joint: np.ndarray
    ncc: np.ndarray
    ssim: np.ndarray
    initial_z: np.ndarray = None
    final_z: np.ndarray = None

    def __len__(self):
        return self.joint.shape[0]

    @property
    def iterations(self):
        return self.joint.shape[0] - 1

    def mean_joint(self):
        return self.joint.mean(axis=1)


def concat_traces(traces):
    return AdaptationTrace(
        joint=np.concatenate([t.joint for t in traces], axis=1),
        ncc=np.concatenate([t.ncc for t in traces], axis=1),
        ssim=np.concatenate([t.ssim for t in traces], axis=1),
        initial_z=np.concatenate([t.initial_z for t in traces], axis=0),
        final_z=np.concatenate([t.final_z for t in traces], axis=0),
    )


def trace_to_csv(trace, image_ids, path):
    """Dump per-image loss curves as (image_id, iteration, L_joint, L_NCC, L_ssim)."""
    if len(image_ids) != trace.joint.shape[1]:
        raise ValueError("one image id per trace column required")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "iteration", "L_joint", "L_NCC", "L_ssim"])
        for col, name in enumerate(image_ids):
            for it in range(trace.joint.shape[0]):
                w.writerow(
                    [
                        name,
                        it,
                        f"{trace.joint[it, col]:.17g}",
                        f"{trace.ncc[it, col]:.17g}",
                        f"{trace.ssim[it, col]:.17g}",
                    ]
                )
    return path


def adapt_latent(x_t, vae, cfg=None):
    """Optimize a latent code per image of x_t; return (z_hat, clone, trace).

    x_t is a unit-range ImageTensor batch from the target modality. The VAE is
    used read-only. Images whose loss or gradient turns non-finite are frozen
    at their last finite code (with a warning); the rest of the batch
    continues.
    """
    cfg = cfg or AdaptConfig()
    if isinstance(x_t, ImageTensor):
        if x_t.value_range != UNIT:
            raise ValueError("adapt_latent expects unit-range input images")
    else:
        x_t = ImageTensor(x_t, UNIT)
    vae.eval()
    edge = sobel_edge_map(x_t).data
    target = x_t.to_signed().data
    n = target.shape[0]

    with torch.no_grad():
        if cfg.init == "encode-target":
            z0 = vae.encode_raw(target).mu
        else:
            gen = torch.Generator().manual_seed(cfg.seed)
            z0 = torch.randn(n, vae.cfg.latent_dim, generator=gen)

    z = z0.clone().requires_grad_(True)
    opt = torch.optim.Adam([z], lr=cfg.eta) if cfg.optimizer == "adam" else None
    active = torch.ones(n, dtype=torch.bool)
    curves = {k: np.zeros((cfg.iterations + 1, n)) for k in ("joint", "ncc", "ssim")}
    clone = None

    for it in range(cfg.iterations + 1):
        recon = vae.decode_raw(z, edge)
        joint_i, ncc_i, ssim_i = joint_loss_per_sample(recon, target, cfg.joint, cfg.ssim)
        bad = ~torch.isfinite(joint_i.detach())
        if bad.any() and active[bad].any():
            idx = torch.nonzero(bad & active).flatten().tolist()
            warnings.warn(f"non-finite adaptation loss for image(s) {idx}; freezing them")
            active &= ~bad
        for key, vals in (("joint", joint_i), ("ncc", ncc_i), ("ssim", ssim_i)):
            row = vals.detach().numpy().astype(float)
            if it > 0:
                row = np.where(np.isfinite(row), row, curves[key][it - 1])
            curves[key][it] = row
        if it == cfg.iterations:
            clone = recon.detach()
            break
        (grad,) = torch.autograd.grad(joint_i.sum(), z)
        grad = torch.where(torch.isfinite(grad), grad, torch.zeros_like(grad))
        grad = grad * active.view(-1, 1)
        if opt is None:
            with torch.no_grad():
                z -= cfg.eta * grad
        else:
            opt.zero_grad()
            z.grad = grad.clone()
            opt.step()

    trace = AdaptationTrace(
        joint=curves["joint"],
        ncc=curves["ncc"],
        ssim=curves["ssim"],
        initial_z=z0.numpy().copy(),
        final_z=z.detach().numpy().copy(),
    )
    return z.detach(), ImageTensor(clone, SIGNED), trace


def predict_target(x_t, vae, seg, cfg=None):
    """Adapt each target image, then segment its reconstructed clone.

    Works through cfg.batch_size chunks; every image's latent search is
    independent, so chunking does not change results.
    """
    cfg = cfg or AdaptConfig()
    if not isinstance(x_t, ImageTensor):
        x_t = ImageTensor(x_t, UNIT)
    masks, traces = [], []
    n = x_t.data.shape[0]
    for start in range(0, n, cfg.batch_size):
        chunk = ImageTensor(x_t.data[start : start + cfg.batch_size], x_t.value_range)
        _, clone, trace = adapt_latent(chunk, vae, cfg)
        with torch.no_grad():
            masks.append(segment(seg, clone).data)
        traces.append(trace)
    return MaskTensor(torch.cat(masks), probability=True), concat_traces(traces)
