"""Shared-encoder models: VAE (encoder + edge-skip decoder) and U-Net seg head.

The generative and segmentation networks reference the *same* encoder module,
so weight updates through either are visible through both. The default
"lite-cnn" backbone is a 4-stage strided CNN; heavier backbones can be plugged
in through ``register_backbone`` behind the same interface.
"""

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageTensor, MaskTensor, SIGNED
from .edges import EdgeMap

CHECKPOINT_VERSION = 1
_LEAK = 0.2


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "lite-cnn"
    stage_channels: tuple = (32, 64, 128, 256)
    latent_dim: int = 64
    input_size: int = 128
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if self.latent_dim < 8:
            raise ValueError(f"latent_dim must be >= 8, got {self.latent_dim}")
        stride = 2 ** len(self.stage_channels)
        if self.input_size % stride != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{len(self.stage_channels)}"
            )
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")


@dataclass
class LatentCode:
    """Per-image latent sample z with its posterior parameters (mu, logvar)."""

    z: torch.Tensor
    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        for name in ("z", "mu", "logvar"):
            t = getattr(self, name)
            if not torch.isfinite(t).all():
                raise ValueError(f"latent {name} contains non-finite values")


class LiteEncoder(nn.Module):
    """Four stride-2 conv stages; global pool feeds the (mu, logvar) heads."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        stages = []
        prev = cfg.in_channels
        for ch in cfg.stage_channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                    nn.LeakyReLU(_LEAK),
                    nn.Conv2d(ch, ch, 3, padding=1),
                    nn.LeakyReLU(_LEAK),
                )
            )
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.fc_mu = nn.Linear(prev, cfg.latent_dim)
        self.fc_logvar = nn.Linear(prev, cfg.latent_dim)

    def features(self, x):
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x):
        feats = self.features(x)
        pooled = F.adaptive_avg_pool2d(feats[-1], 1).flatten(1)
        return feats, self.fc_mu(pooled), self.fc_logvar(pooled)


ENCODER_BACKBONES = {"lite-cnn": LiteEncoder}


def register_backbone(name, factory):
    """Plug in an alternative encoder (e.g. an EfficientNet-B4 adapter)."""
    ENCODER_BACKBONES[name] = factory


def build_encoder(cfg):
    factory = ENCODER_BACKBONES.get(cfg.backbone)
    if factory is None:
        raise ValueError(
            f"backbone {cfg.backbone!r} is not registered "
            f"(available: {sorted(ENCODER_BACKBONES)}); "
            "use register_backbone() to plug one in"
        )
    return factory(cfg)


class VaeDecoder(nn.Module):
    """Five upsampling conv layers (LeakyReLU 0.2); the tanh-squashed edge map
    is concatenated as an extra channel before the final tanh convolution."""

    def __init__(self, cfg, out_channels=None):
        super().__init__()
        if cfg.input_size % 32 != 0:
            raise ValueError(f"decoder needs input_size divisible by 32, got {cfg.input_size}")
        self.cfg = cfg
        self.out_channels = out_channels or cfg.in_channels
        self.seed_hw = cfg.input_size // 32
        top = cfg.stage_channels[-1]
        chain = [max(top // (2**i), 8) for i in range(6)]
        self.fc = nn.Linear(cfg.latent_dim, top * self.seed_hw * self.seed_hw)
        ups = []
        for cin, cout in zip(chain[:-1], chain[1:]):
            ups.append(nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1))
        self.ups = nn.ModuleList(ups)
        self.final = nn.Conv2d(chain[-1] + 1, self.out_channels, 3, padding=1)

    def forward(self, z, edge):
        h = self.fc(z).view(-1, self.cfg.stage_channels[-1], self.seed_hw, self.seed_hw)
        for up in self.ups:
            h = F.leaky_relu(up(h), _LEAK)
        h = torch.cat([h, torch.tanh(edge)], dim=1)
        return torch.tanh(self.final(h))


class VaeModel(nn.Module):
    def __init__(self, encoder, decoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.cfg = encoder.cfg

    def forward(self, x, edge, noise=None):
        code = self.encode_raw(x)
        z = code.mu if noise is None else code.mu + torch.exp(0.5 * code.logvar) * noise
        return self.decode_raw(z, edge), code.mu, code.logvar

    def encode_raw(self, x):
        if x.shape[-1] != self.cfg.input_size or x.shape[-2] != self.cfg.input_size:
            raise ValueError(
                f"expected {self.cfg.input_size}x{self.cfg.input_size} input, "
                f"got {x.shape[-2]}x{x.shape[-1]}"
            )
        _, mu, logvar = self.encoder(x)
        return LatentCode(z=mu, mu=mu, logvar=logvar)

    def decode_raw(self, z, edge):
        if not torch.isfinite(z).all():
            raise ValueError("latent z contains non-finite values")
        if edge.shape[-1] != self.cfg.input_size or edge.shape[-2] != self.cfg.input_size:
            raise ValueError("edge map spatial size must match the decoder output size")
        return self.decoder(z, edge)


def encode(model, x, noise=None):
    """Posterior parameters for x plus a sample z = mu + sigma * noise.

    x must be a signed-range ImageTensor at the configured input size. The
    noise tensor is caller-supplied (shape [B, latent_dim]); None means zero
    noise, i.e. z == mu.
    """
    if isinstance(x, ImageTensor) and x.value_range != SIGNED:
        raise ValueError("encode expects a signed-range image (use .to_signed())")
    data = x.data if isinstance(x, ImageTensor) else x
    code = model.encode_raw(data)
    if noise is None:
        return code
    z = code.mu + torch.exp(0.5 * code.logvar) * noise
    return LatentCode(z=z, mu=code.mu, logvar=code.logvar)


def decode(model, z, edge):
    """Reconstruct a signed-range image from z (LatentCode or raw [B, d])."""
    zt = z.z if isinstance(z, LatentCode) else z
    et = edge.data if isinstance(edge, EdgeMap) else edge
    return ImageTensor(model.decode_raw(zt, et), SIGNED)


class SegModel(nn.Module):
    """U-Net head over the shared encoder; sigmoid probability output."""

    def __init__(self, encoder):
        super().__init__()
        self.encoder = encoder
        self.cfg = encoder.cfg
        chans = list(self.cfg.stage_channels)  # e.g. [32, 64, 128, 256]
        ups, fuses = [], []
        for i in range(len(chans) - 1, 0, -1):
            ups.append(nn.ConvTranspose2d(chans[i], chans[i - 1], 4, stride=2, padding=1))
            fuses.append(nn.Conv2d(2 * chans[i - 1], chans[i - 1], 3, padding=1))
        self.ups = nn.ModuleList(ups)
        self.fuses = nn.ModuleList(fuses)
        head_ch = max(chans[0] // 2, 8)
        self.up_final = nn.ConvTranspose2d(chans[0], head_ch, 4, stride=2, padding=1)
        self.head = nn.Conv2d(head_ch, 1, 1)

    def forward(self, x):
        if x.shape[-1] != self.cfg.input_size or x.shape[-2] != self.cfg.input_size:
            raise ValueError(
                f"expected {self.cfg.input_size}x{self.cfg.input_size} input, "
                f"got {x.shape[-2]}x{x.shape[-1]}"
            )
        feats = self.encoder.features(x)
        h = feats[-1]
        for up, fuse, skip in zip(self.ups, self.fuses, reversed(feats[:-1])):
            h = F.leaky_relu(up(h), _LEAK)
            h = F.leaky_relu(fuse(torch.cat([h, skip], dim=1)), _LEAK)
        h = F.leaky_relu(self.up_final(h), _LEAK)
        return torch.sigmoid(self.head(h))


def segment(model, x):
    """Probability mask for a signed-range image batch."""
    if isinstance(x, ImageTensor) and x.value_range != SIGNED:
        raise ValueError("segment expects a signed-range image (use .to_signed())")
    data = x.data if isinstance(x, ImageTensor) else x
    return MaskTensor(model(data), probability=True)


def build_models(cfg, seed=0):
    """Construct (VaeModel, SegModel) over one shared encoder, seeded init."""
    torch.manual_seed(seed)
    encoder = build_encoder(cfg)
    vae = VaeModel(encoder, VaeDecoder(cfg))
    seg = SegModel(encoder)
    return vae, seg


# ---------------------------------------------------------------------------
# checkpoints: versioned container {format version, encoder config, tensors}


def save_checkpoint(path, vae, seg=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_config": asdict(vae.cfg),
        "encoder": vae.encoder.state_dict(),
        "vae_decoder": vae.decoder.state_dict(),
        "seg_head": None if seg is None else _seg_head_state(seg),
    }
    torch.save(payload, path)
    return path


def _seg_head_state(seg):
    full = seg.state_dict()
    return {k: v for k, v in full.items() if not k.startswith("encoder.")}


def load_checkpoint(path, expect_config=None):
    """Rebuild (vae, seg_or_None, config) from a checkpoint file.

    Raises CheckpointError on an unreadable file, an unknown format version,
    or a config that differs from expect_config.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format {payload['format_version']} != supported {CHECKPOINT_VERSION}"
        )
    raw = dict(payload["encoder_config"])
    raw["stage_channels"] = tuple(raw["stage_channels"])
    cfg = EncoderConfig(**raw)
    if expect_config is not None and cfg != expect_config:
        raise CheckpointError(f"checkpoint config {cfg} does not match expected {expect_config}")
    encoder = build_encoder(cfg)
    vae = VaeModel(encoder, VaeDecoder(cfg))
    vae.encoder.load_state_dict(payload["encoder"])
    vae.decoder.load_state_dict(payload["vae_decoder"])
    if payload["seg_head"] is None:
        return vae, None, cfg
    seg = SegModel(encoder)
    missing, unexpected = seg.load_state_dict(payload["seg_head"], strict=False)
    if unexpected or any(not k.startswith("encoder.") for k in missing):
        raise CheckpointError(f"seg head state mismatch (missing={missing}, unexpected={unexpected})")
    return vae, seg, cfg
