"""Sobel edge maps feeding the VAE decoder skip connection."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import ImageTensor, UNIT

_LUMA = (0.299, 0.587, 0.114)

_SOBEL_GX = torch.tensor(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]
).view(1, 1, 3, 3)
_SOBEL_GY = _SOBEL_GX.transpose(2, 3).contiguous()


@dataclass
class EdgeMap:
    """Gradient magnitudes [B, 1, H, W], max-normalized per image to [0, 1]."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 4 or self.data.shape[1] != 1:
            raise ValueError(f"edge map must be [B,1,H,W], got {tuple(self.data.shape)}")


def sobel_edge_map(image):
    """Sobel gradient magnitude of a unit-range ImageTensor.

    3-channel input is converted to luminance (0.299/0.587/0.114) first; the
    3x3 Sobel kernels run under replicate padding and each image is divided by
    its own max magnitude (an all-constant image stays all-zero).
    """
    if isinstance(image, ImageTensor):
        if image.value_range != UNIT:
            raise ValueError("sobel_edge_map expects a unit-range image")
        x = image.data
    else:
        x = image
    if x.shape[1] == 3:
        w = torch.tensor(_LUMA, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        gray = (x * w).sum(dim=1, keepdim=True)
    else:
        gray = x
    padded = F.pad(gray, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, _SOBEL_GX.to(dtype=x.dtype, device=x.device))
    gy = F.conv2d(padded, _SOBEL_GY.to(dtype=x.dtype, device=x.device))
    mag = torch.sqrt(gx * gx + gy * gy + 1e-24)
    peak = mag.amax(dim=(1, 2, 3), keepdim=True).clamp_min(1e-8)
    return EdgeMap(mag / peak * (peak > 1e-6))
