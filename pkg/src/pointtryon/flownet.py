"""Learned garment-to-person flow: a small two-stream feature pyramid with
coarse-to-fine residual flow prediction.

Stands in for a pre-trained warping module; it is supervised directly with
the synthetic generator's ground-truth displacement fields (plus a
photometric term through a differentiable warp), and the training harness
can bypass it entirely ("oracle flow" mode) to isolate point matching from
warp quality.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .flow import DisplacementField


def _conv(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.LeakyReLU(0.1),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.1),
    )


class _Pyramid(nn.Module):
    def __init__(self, cin: int, widths=(16, 32, 48)):
        super().__init__()
        self.levels = nn.ModuleList()
        prev = cin
        for w in widths:
            self.levels.append(_conv(prev, w, stride=2))
            prev = w

    def forward(self, x):
        feats = []
        for lv in self.levels:
            x = lv(x)
            feats.append(x)
        return feats  # fine -> coarse at /2, /4, /8


def warp_with_flow(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Differentiable backward warp: output pixel q samples the source at
    q - flow(q). ``flow`` is (B, 2, H, W) in pixels (d_row, d_col); the
    source may have different spatial dims. Zero outside the source."""
    B, _, H, W = flow.shape
    sh, sw = image.shape[-2:]
    rr, cc = torch.meshgrid(
        torch.arange(H, dtype=image.dtype, device=image.device),
        torch.arange(W, dtype=image.dtype, device=image.device),
        indexing="ij",
    )
    pr = rr.unsqueeze(0) - flow[:, 0]
    pc = cc.unsqueeze(0) - flow[:, 1]
    gx = 2.0 * pc / max(sw - 1, 1) - 1.0
    gy = 2.0 * pr / max(sh - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(image, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=True)


class FlowEstimator(nn.Module):
    """Predict the dense garment-to-person displacement field from the
    garment image and the person condition triplet (agnostic, depth,
    normal). Output is (B, 2, H, W) in pixel units at person resolution."""

    def __init__(self, widths=(16, 32, 48)):
        super().__init__()
        self.garment_pyramid = _Pyramid(3, widths)
        self.person_pyramid = _Pyramid(7, widths)
        self.refiners = nn.ModuleList(
            _conv(2 * w + 2, w) for w in widths
        )
        self.heads = nn.ModuleList(nn.Conv2d(w, 2, 3, padding=1) for w in widths)
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self.trained = False

    def forward(self, garment, agnostic, depth, normal):
        g_feats = self.garment_pyramid(garment)
        p_feats = self.person_pyramid(torch.cat([agnostic, depth, normal], dim=1))
        flow = None
        for lvl in range(len(p_feats) - 1, -1, -1):
            p = p_feats[lvl]
            g = F.interpolate(g_feats[lvl], size=p.shape[-2:], mode="bilinear",
                              align_corners=False)
            if flow is None:
                flow = p.new_zeros(p.shape[0], 2, *p.shape[-2:])
            else:
                flow = 2.0 * F.interpolate(flow, size=p.shape[-2:], mode="bilinear",
                                           align_corners=False)
            h = self.refiners[lvl](torch.cat([p, g, flow], dim=1))
            flow = flow + self.heads[lvl](h)
        return 2.0 * F.interpolate(flow, scale_factor=2.0, mode="bilinear",
                                   align_corners=False)

    @torch.no_grad()
    def predict(self, garment, agnostic, depth, normal) -> list[DisplacementField]:
        """Inference-mode fields for a batch, as DisplacementField objects."""
        was_training = self.training
        self.eval()
        flow = self.forward(garment, agnostic, depth, normal)
        if was_training:
            self.train()
        return [
            DisplacementField(f.permute(1, 2, 0).double().numpy()) for f in flow
        ]
