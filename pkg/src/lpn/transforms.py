"""Batched image transforms on ``(N, 3, H, W)`` float tensors.

Angles are degrees, counter-clockwise as displayed (the same sense as
``torch.rot90`` over the ``(H, W)`` dims).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def rotate_images(x: torch.Tensor, angles) -> torch.Tensor:
    """Rotate each image about its centre, bilinear with reflection fill.

    Exact multiples of 90 degrees go through ``torch.rot90`` and are lossless
    on square images.
    """
    angles = torch.as_tensor(angles, dtype=torch.float64).reshape(-1)
    if angles.numel() == 1 and x.shape[0] != 1:
        angles = angles.expand(x.shape[0])
    if angles.numel() != x.shape[0]:
        raise ValueError(f"{angles.numel()} angles for {x.shape[0]} images")
    square = x.shape[-1] == x.shape[-2]
    out = torch.empty_like(x)
    smooth = []
    for i, a in enumerate(angles.tolist()):
        k, rem = divmod(a, 90.0)
        if rem == 0 and (square or int(k) % 2 == 0):
            out[i] = torch.rot90(x[i], int(k) % 4, dims=(1, 2))
        else:
            smooth.append(i)
    if smooth:
        idx = torch.tensor(smooth)
        theta = torch.deg2rad(angles[idx]).float()
        cos, sin = torch.cos(theta), torch.sin(theta)
        H, W = x.shape[-2:]
        # normalized coords are anisotropic on non-square images
        mats = torch.zeros(len(smooth), 2, 3)
        mats[:, 0, 0] = cos
        mats[:, 0, 1] = -sin * H / W
        mats[:, 1, 0] = sin * W / H
        mats[:, 1, 1] = cos
        grid = F.affine_grid(mats, (len(smooth), x.shape[1], H, W), align_corners=False)
        out[idx] = F.grid_sample(x[idx], grid.to(x.dtype), mode="bilinear",
                                 padding_mode="reflection", align_corners=False)
    return out


def shift_images(x: torch.Tensor, pixels: int) -> torch.Tensor:
    """Reflect-pad ``pixels`` columns on the left, then crop left-aligned back to width."""
    pixels = int(pixels)
    if pixels == 0:
        return x
    if not 0 < pixels < x.shape[-1]:
        raise ValueError(f"shift of {pixels} px needs 0 < shift < width {x.shape[-1]}")
    return F.pad(x, (pixels, 0, 0, 0), mode="reflect")[..., : x.shape[-1]]


def random_crop(x: torch.Tensor, padding: int, generator: torch.Generator) -> torch.Tensor:
    """Reflect-pad by ``padding`` on all sides and take a random crop of the original size per image."""
    if padding <= 0:
        return x
    N, _, H, W = x.shape
    padded = F.pad(x, (padding,) * 4, mode="reflect")
    offs = torch.randint(0, 2 * padding + 1, (N, 2), generator=generator)
    return torch.stack([padded[i, :, dy:dy + H, dx:dx + W] for i, (dy, dx) in enumerate(offs.tolist())])


def random_hflip(x: torch.Tensor, generator: torch.Generator, p=0.5) -> torch.Tensor:
    flip = torch.rand(x.shape[0], generator=generator) < p
    if flip.any():
        x = x.clone()
        x[flip] = x[flip].flip(-1)
    return x


def random_rotation(x: torch.Tensor, generator: torch.Generator, jitter=10.0) -> torch.Tensor:
    """Right-angle rotation drawn uniformly from {0, 90, 180, 270} plus uniform jitter in ``[-jitter, jitter]``."""
    N = x.shape[0]
    quarter = torch.randint(0, 4, (N,), generator=generator).double() * 90.0
    noise = (torch.rand(N, generator=generator, dtype=torch.float64) * 2 - 1) * jitter
    return rotate_images(x, quarter + noise)
