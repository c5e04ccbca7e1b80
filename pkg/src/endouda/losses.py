"""Differentiable objectives: reconstruction, KL, BCE, Dice, NCC, SSIM, joint.

Every loss accepts either a bare tensor or one of the wrapper types
(ImageTensor / MaskTensor) and is differentiable w.r.t. its first argument.
Per-sample variants (suffix ``_per_sample``) return one value per batch item
and are what the latent search consumes, so that batched adaptation keeps
per-image gradients independent of batch size.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import ImageTensor, SIGNED

_BCE_EPS = 1e-7
DICE_SMOOTH = 1.0


def _tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return x.data


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_same_range(x, y):
    if isinstance(x, ImageTensor) and isinstance(y, ImageTensor):
        if x.value_range != y.value_range:
            raise ValueError(
                f"range convention mismatch: {x.value_range} vs {y.value_range}"
            )


# ---------------------------------------------------------------------------
# VAE training losses


def reconstruction_loss(x, x_hat):
    """Mean over the batch of the per-sample summed squared error."""
    _check_same_range(x, x_hat)
    a, b = _tensor(x), _tensor(x_hat)
    _check_same_shape(a, b, "reconstruction_loss")
    diff = a - b
    return diff.pow(2).flatten(1).sum(dim=1).mean()


def kl_gaussian(mu, logvar):
    """Closed-form KL(N(mu, exp(logvar)) || N(0, I)), averaged over the batch."""
    mu, logvar = _tensor(mu), _tensor(logvar)
    _check_same_shape(mu, logvar, "kl_gaussian")
    if mu.dim() == 1:
        mu, logvar = mu.unsqueeze(0), logvar.unsqueeze(0)
    per_sample = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=1)
    return per_sample.mean()


# ---------------------------------------------------------------------------
# segmentation losses


def bce_loss(p, g):
    """Pixel-mean binary cross entropy; p is clamped to [1e-7, 1 - 1e-7]."""
    p, g = _tensor(p), _tensor(g)
    _check_same_shape(p, g, "bce_loss")
    pc = p.clamp(_BCE_EPS, 1.0 - _BCE_EPS)
    return -(g * pc.log() + (1.0 - g) * (1.0 - pc).log()).mean()


def dice_coefficient(p, g, smooth=DICE_SMOOTH):
    """(2*sum(p*g) + s) / (sum(p^2) + sum(g^2) + s), summed over all elements."""
    p, g = _tensor(p), _tensor(g)
    _check_same_shape(p, g, "dice_coefficient")
    inter = (p * g).sum()
    denom = p.pow(2).sum() + g.pow(2).sum()
    return (2.0 * inter + smooth) / (denom + smooth)


def dice_loss(p, g, smooth=DICE_SMOOTH):
    return 1.0 - dice_coefficient(p, g, smooth)


def segmentation_loss(p, g):
    """Combined supervised objective: BCE plus Dice loss, equal unit weights."""
    return bce_loss(p, g) + dice_loss(p, g)


# ---------------------------------------------------------------------------
# adaptation losses


def _standardize(x, eps):
    flat = x.flatten(1)
    mu = flat.mean(dim=1)
    var = flat.var(dim=1, unbiased=False)
    denom = torch.sqrt(var + eps * eps)
    return (x - mu.view(-1, 1, 1, 1)) / denom.view(-1, 1, 1, 1)


def ncc_loss_per_sample(x_recon, x_target, eps=1e-5):
    a, b = _tensor(x_recon), _tensor(x_target)
    _check_same_shape(a, b, "ncc_loss")
    diff = _standardize(a, eps) - _standardize(b, eps)
    return 0.5 * diff.pow(2).flatten(1).mean(dim=1)


def ncc_loss(x_recon, x_target, eps=1e-5):
    """Half mean squared difference of per-image standardized intensities.

    Statistics (mean, population variance) are taken over all channels and
    pixels of each image; the stabilizer enters as sqrt(var + eps^2).
    """
    return ncc_loss_per_sample(x_recon, x_target, eps).mean()


@dataclass(frozen=True)
class SsimParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    window_size: int = 11
    window_sigma: float = 1.5
    dynamic_range: float = None  # inferred from the range tag when None
    C1: float = None  # defaults to (0.01 L)^2
    C2: float = None  # defaults to (0.03 L)^2
    C3: float = None  # defaults to C2 / 2

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) <= 0:
            raise ValueError("SSIM exponents must be positive")
        if self.window_size % 2 != 1 or self.window_size < 3:
            raise ValueError("window_size must be odd and >= 3")
        if self.window_sigma <= 0:
            raise ValueError("window_sigma must be positive")

    def stabilizers(self, dynamic_range):
        L = self.dynamic_range if self.dynamic_range is not None else dynamic_range
        c1 = self.C1 if self.C1 is not None else (0.01 * L) ** 2
        c2 = self.C2 if self.C2 is not None else (0.03 * L) ** 2
        c3 = self.C3 if self.C3 is not None else c2 / 2.0
        return c1, c2, c3


def _gaussian_window(size, sigma, dtype, device):
    half = size // 2
    coords = torch.arange(size, dtype=dtype, device=device) - half
    g = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    g = g / g.sum()
    return (g[:, None] @ g[None, :]).view(1, 1, size, size)


def _pow(t, e):
    if e == 1.0:
        return t
    return t.clamp_min(0.0).pow(e)


def ssim_per_sample(x_a, x_b, params=None):
    params = params or SsimParams()
    rng = 2.0 if isinstance(x_a, ImageTensor) and x_a.value_range == SIGNED else 1.0
    a, b = _tensor(x_a), _tensor(x_b)
    _check_same_shape(a, b, "ssim")
    k = params.window_size
    if a.shape[-1] < k or a.shape[-2] < k:
        raise ValueError(
            f"image {a.shape[-2]}x{a.shape[-1]} smaller than SSIM window {k}"
        )
    c1, c2, c3 = params.stabilizers(rng)
    ch = a.shape[1]
    win = _gaussian_window(k, params.window_sigma, a.dtype, a.device).expand(ch, 1, k, k)

    mu_a = F.conv2d(a, win, groups=ch)
    mu_b = F.conv2d(b, win, groups=ch)
    var_a = F.conv2d(a * a, win, groups=ch) - mu_a * mu_a
    var_b = F.conv2d(b * b, win, groups=ch) - mu_b * mu_b
    cov = F.conv2d(a * b, win, groups=ch) - mu_a * mu_b

    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    if params.beta == params.gamma and c3 == c2 / 2.0:
        # c^beta * s^gamma collapses to the sqrt-free standard form, which is
        # exactly 1 for identical inputs and smooth at zero variance.
        cs = (2.0 * cov + c2) / (var_a + var_b + c2)
        ssim_map = _pow(lum, params.alpha) * _pow(cs, params.beta)
    else:
        sd_a = torch.sqrt(var_a.clamp_min(0.0) + 1e-12)
        sd_b = torch.sqrt(var_b.clamp_min(0.0) + 1e-12)
        con = (2.0 * sd_a * sd_b + c2) / (var_a.clamp_min(0.0) + var_b.clamp_min(0.0) + c2)
        struct = (cov + c3) / (sd_a * sd_b + c3)
        ssim_map = (
            _pow(lum, params.alpha) * _pow(con, params.beta) * _pow(struct, params.gamma)
        )
    return ssim_map.flatten(1).mean(dim=1)


def ssim(x_a, x_b, params=None):
    """Mean structural similarity with a Gaussian window; in [-1, 1].

    Per-window luminance, contrast, and structure terms are combined as
    l^alpha * c^beta * s^gamma and averaged over windows, channels, and batch.
    With unit exponents this is the standard single-scale formula.
    """
    return ssim_per_sample(x_a, x_b, params).mean()


def ssim_loss_per_sample(x_a, x_b, params=None):
    return 1.0 - ssim_per_sample(x_a, x_b, params)


def ssim_loss(x_a, x_b, params=None):
    return 1.0 - ssim(x_a, x_b, params)


@dataclass(frozen=True)
class JointLossParams:
    lam: float = 0.75  # weight on the NCC term
    ncc_epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.ncc_epsilon <= 0:
            raise ValueError("ncc_epsilon must be positive")


def joint_loss_per_sample(x_recon, x_target, params=None, ssim_params=None):
    params = params or JointLossParams()
    ncc = ncc_loss_per_sample(x_recon, x_target, params.ncc_epsilon)
    sim = ssim_loss_per_sample(x_recon, x_target, ssim_params)
    return params.lam * ncc + (1.0 - params.lam) * sim, ncc, sim


def joint_loss(x_recon, x_target, params=None, ssim_params=None):
    """lambda * L_NCC + (1 - lambda) * L_ssim; an exact convex combination."""
    params = params or JointLossParams()
    ncc = ncc_loss(x_recon, x_target, params.ncc_epsilon)
    sim = ssim_loss(x_recon, x_target, ssim_params)
    return params.lam * ncc + (1.0 - params.lam) * sim
