"""Semantic-point feature injection.

Per-point features are bilinearly sampled from frozen encoder pyramids at
the garment points (appearance cues) and at their flow-projected person
locations (geometry cues), summed into 3D-aware point features, projected
by per-layer MLPs to each attention width, and repositioned onto empty
token grids. The grids enter the first-two/last-two self-attention layers
of the generator UNet additively on queries and keys:

    out = softmax((Q + F_a) [K + F_a, K_g + F_g]^T / sqrt(d)) [V, V_g]

where K_g/V_g come from the garment-branch hidden states. The projector
MLPs end in zero-initialized layers so injection starts as an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .points import PointSet


@dataclass
class PointFeatures:
    """K feature vectors anchored at a point set."""

    values: torch.Tensor  # (K, D)
    anchor: PointSet
    kind: str

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.anchor):
            raise ValueError("values must be (K, D) matching the anchor point count")
        if not torch.isfinite(self.values).all():
            raise ValueError("point features must be finite")


@dataclass
class InjectionPack:
    """Per injection layer: token-grid maps for the person and garment
    frames. ``person_maps[i]`` is (B, T_l, D_l), ``garment_maps[i]`` is
    (B, Tg_l, D_l); cells no point lands in are exactly zero."""

    person_maps: list[torch.Tensor]
    garment_maps: list[torch.Tensor]


def sample_point_features(featmap: torch.Tensor, pts: PointSet, scale: float) -> PointFeatures:
    """Bilinearly interpolate a (D, h, w) feature map at scaled point
    coordinates (x * scale, y * scale). Coordinates must land inside the
    map extent [0, h) x [0, w); past the last cell center the lookup
    clamps to the border cell."""
    if featmap.ndim != 3:
        raise ValueError(f"featmap must be (D, h, w), got {tuple(featmap.shape)}")
    _, h, w = featmap.shape
    coords = pts.coords * float(scale)
    if len(pts) and (coords[:, 0].max() >= h or coords[:, 1].max() >= w
                     or coords.min() < 0):
        raise ValueError("point outside feature map after scaling")
    pr = torch.as_tensor(coords[:, 0], dtype=featmap.dtype)
    pc = torch.as_tensor(coords[:, 1], dtype=featmap.dtype)
    r0 = pr.floor().long().clamp(0, h - 1)
    c0 = pc.floor().long().clamp(0, w - 1)
    r1 = (r0 + 1).clamp(max=h - 1)
    c1 = (c0 + 1).clamp(max=w - 1)
    fr = (pr - r0.to(featmap.dtype)).unsqueeze(1)
    fc = (pc - c0.to(featmap.dtype)).unsqueeze(1)
    flat = featmap.flatten(1).t()  # (h*w, D)
    v00 = flat[r0 * w + c0]
    v01 = flat[r0 * w + c1]
    v10 = flat[r1 * w + c0]
    v11 = flat[r1 * w + c1]
    vals = ((1 - fr) * (1 - fc) * v00 + (1 - fr) * fc * v01
            + fr * (1 - fc) * v10 + fr * fc * v11)
    return PointFeatures(values=vals, anchor=pts, kind="sampled")


def sample_pyramid_features(
    pyramid: list[torch.Tensor], pts: PointSet, frame_hw: tuple[int, int], kind: str
) -> PointFeatures:
    """Concatenate bilinear samples across every pyramid level into one
    per-point descriptor of the full encoder width."""
    h = frame_hw[0]
    parts = [
        sample_point_features(fm, pts, scale=fm.shape[-2] / h).values for fm in pyramid
    ]
    return PointFeatures(values=torch.cat(parts, dim=1), anchor=pts, kind=kind)


def augment_features(f_g: PointFeatures, f_h: PointFeatures) -> PointFeatures:
    """Fuse garment-appearance and person-geometry point features by
    elementwise addition; the result is anchored at the person points."""
    if f_g.values.shape != f_h.values.shape:
        raise ValueError("point count / width mismatch")
    return PointFeatures(values=f_g.values + f_h.values, anchor=f_h.anchor, kind="augmented")


class ProjectorBank(nn.Module):
    """Per injection layer, two MLPs mapping encoder-width point features to
    that layer's attention width. Final layers start at zero so the
    injection path is initially inert."""

    def __init__(self, in_width: int, layer_widths: list[int], hidden: int = 128):
        super().__init__()
        self.in_width = in_width
        self.layer_widths = list(layer_widths)

        def mlp(out_width: int) -> nn.Sequential:
            m = nn.Sequential(nn.Linear(in_width, hidden), nn.SiLU(),
                              nn.Linear(hidden, out_width))
            nn.init.zeros_(m[-1].weight)
            nn.init.zeros_(m[-1].bias)
            return m

        self.ga = nn.ModuleList(mlp(wd) for wd in self.layer_widths)
        self.g = nn.ModuleList(mlp(wd) for wd in self.layer_widths)


def project_points(feats: PointFeatures, bank: ProjectorBank, which: str) -> list[PointFeatures]:
    """Apply the per-layer MLPs; returns one PointFeatures per injection
    layer with values at that layer's attention width."""
    if which not in ("GA", "G"):
        raise ValueError("which must be 'GA' or 'G'")
    if feats.values.shape[1] != bank.in_width:
        raise ValueError(f"feature width {feats.values.shape[1]} != bank width {bank.in_width}")
    mlps = bank.ga if which == "GA" else bank.g
    return [
        PointFeatures(values=m(feats.values), anchor=feats.anchor, kind=feats.kind)
        for m in mlps
    ]


def reposition(
    feats: PointFeatures, pts: PointSet, token_h: int, token_w: int, scale: float
) -> torch.Tensor:
    """Scatter point vectors onto an empty (token_h * token_w, D) token
    grid at cells (floor(x*scale), floor(y*scale)); colliding points
    accumulate by addition, so the result is order-independent."""
    vals = feats.values
    grid = vals.new_zeros((token_h * token_w, vals.shape[1]))
    if len(pts) == 0:
        return grid
    cells_r = np.floor(pts.coords[:, 0] * scale).astype(np.int64)
    cells_c = np.floor(pts.coords[:, 1] * scale).astype(np.int64)
    if (cells_r.min() < 0 or cells_r.max() >= token_h
            or cells_c.min() < 0 or cells_c.max() >= token_w):
        raise ValueError("point outside token grid")
    idx = torch.as_tensor(cells_r * token_w + cells_c)
    return grid.index_add(0, idx, vals)


def spm_attention(
    h_t: torch.Tensor,
    h_g: torch.Tensor | None,
    f_ga: torch.Tensor | None,
    f_g: torch.Tensor | None,
    weights: dict[str, torch.Tensor],
    heads: int = 1,
    garm_drop: torch.Tensor | None = None,
) -> torch.Tensor:
    """Point-augmented dual-branch attention (see module docstring).

    ``h_t`` is (B, T, d) person-branch tokens; ``h_g`` (B, Tg, d) garment
    tokens or None for a pure self-attention pass. ``weights`` holds the
    projection matrices 'wq', 'wk', 'wv' (person) and 'wkg', 'wvg'
    (garment), each (d, d), applied as h @ W.T. ``garm_drop`` is a (B,)
    bool mask disabling the garment keys per sample.
    """
    B, T, d = h_t.shape
    if d % heads:
        raise ValueError("width must divide the head count")
    q = h_t @ weights["wq"].t()
    k = h_t @ weights["wk"].t()
    v = h_t @ weights["wv"].t()
    if f_ga is not None:
        q = q + f_ga
        k = k + f_ga
    if h_g is not None:
        kg = h_g @ weights["wkg"].t()
        vg = h_g @ weights["wvg"].t()
        if f_g is not None:
            kg = kg + f_g
        k = torch.cat([k, kg], dim=1)
        v = torch.cat([v, vg], dim=1)

    def split(x):
        return x.view(B, x.shape[1], heads, d // heads).transpose(1, 2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-1, -2) / (d / heads) ** 0.5
    if garm_drop is not None and h_g is not None:
        mask = garm_drop.view(B, 1, 1, 1) & (
            torch.arange(k.shape[1], device=h_t.device) >= T
        ).view(1, 1, 1, -1)
        scores = scores.masked_fill(mask, float("-inf"))
    out = torch.softmax(scores, dim=-1) @ vh
    return out.transpose(1, 2).reshape(B, T, d)


def _bilinear_flat(maps: torch.Tensor, coords: torch.Tensor,
                   batch_idx: torch.Tensor) -> torch.Tensor:
    """Sample (B, D, h, w) maps at flattened float coords (N, 2) belonging
    to samples ``batch_idx`` (N,), with edge-clamped bilinear
    interpolation; returns (N, D)."""
    B, D, h, w = maps.shape
    flat = maps.permute(0, 2, 3, 1).reshape(B * h * w, D)
    pr = coords[:, 0]
    pc = coords[:, 1]
    r0 = pr.floor().long().clamp(0, h - 1)
    c0 = pc.floor().long().clamp(0, w - 1)
    r1 = (r0 + 1).clamp(max=h - 1)
    c1 = (c0 + 1).clamp(max=w - 1)
    fr = (pr - r0.to(maps.dtype)).unsqueeze(-1)
    fc = (pc - c0.to(maps.dtype)).unsqueeze(-1)
    base = batch_idx * (h * w)
    v00 = flat[base + r0 * w + c0]
    v01 = flat[base + r0 * w + c1]
    v10 = flat[base + r1 * w + c0]
    v11 = flat[base + r1 * w + c1]
    return ((1 - fr) * (1 - fc) * v00 + (1 - fr) * fc * v01
            + fr * (1 - fc) * v10 + fr * fc * v11)


def build_injection_pack_batched(
    garment_pyramid: list[torch.Tensor],
    geometry_pyramid: list[torch.Tensor],
    points_g: list[PointSet],
    points_h: list[PointSet],
    bank: ProjectorBank,
    layer_grids: list[tuple[int, int, int, int]],
    person_hw: tuple[int, int],
    garment_hw: tuple[int, int],
) -> InjectionPack:
    """Vectorized equivalent of :func:`build_injection_pack` taking
    level-stacked (B, D, h, w) pyramids; point counts may vary per sample
    (all points are processed flattened with per-sample offsets)."""
    B = len(points_g)
    counts = [len(p) for p in points_g]
    batch_idx = torch.repeat_interleave(
        torch.arange(B), torch.as_tensor(counts)
    )
    cg = torch.from_numpy(np.concatenate([p.coords for p in points_g])).float()
    ch = torch.from_numpy(np.concatenate([p.coords for p in points_h])).float()
    f_g = torch.cat(
        [_bilinear_flat(m, cg * (m.shape[-2] / garment_hw[0]), batch_idx)
         for m in garment_pyramid],
        dim=-1,
    )
    f_h = torch.cat(
        [_bilinear_flat(m, ch * (m.shape[-2] / person_hw[0]), batch_idx)
         for m in geometry_pyramid],
        dim=-1,
    )
    f_ga = f_g + f_h
    person_maps = []
    garment_maps = []

    def scatter(proj, coords, th, tw, src_h):
        scale = th / src_h
        cr = (coords[:, 0] * scale).floor().long()
        cc = (coords[:, 1] * scale).floor().long()
        if len(cr) and (cr.min() < 0 or cr.max() >= th or cc.min() < 0 or cc.max() >= tw):
            raise ValueError("point outside token grid")
        idx = batch_idx * (th * tw) + cr * tw + cc
        flat = proj.new_zeros((B * th * tw, proj.shape[-1]))
        flat = flat.index_add(0, idx, proj)
        return flat.reshape(B, th * tw, -1)

    for li, (pth, ptw, gth, gtw) in enumerate(layer_grids):
        person_maps.append(scatter(bank.ga[li](f_ga), ch, pth, ptw, person_hw[0]))
        garment_maps.append(scatter(bank.g[li](f_g), cg, gth, gtw, garment_hw[0]))
    return InjectionPack(person_maps=person_maps, garment_maps=garment_maps)


def build_injection_pack(
    garment_pyramids: list[list[torch.Tensor]],
    geometry_pyramids: list[list[torch.Tensor]],
    points_g: list[PointSet],
    points_h: list[PointSet],
    bank: ProjectorBank,
    layer_grids: list[tuple[int, int, int, int]],
    person_hw: tuple[int, int],
    garment_hw: tuple[int, int],
) -> InjectionPack:
    """Assemble per-layer injection maps for a batch.

    ``garment_pyramids[b]`` / ``geometry_pyramids[b]`` are the frozen
    encoder feature pyramids of sample b; ``layer_grids`` lists
    (person_th, person_tw, garment_th, garment_tw) per injection layer.
    """
    n = len(points_g)
    person_layers: list[list[torch.Tensor]] = [[] for _ in layer_grids]
    garment_layers: list[list[torch.Tensor]] = [[] for _ in layer_grids]
    for b in range(n):
        f_g = sample_pyramid_features(garment_pyramids[b], points_g[b], garment_hw, "garment")
        f_h = sample_pyramid_features(geometry_pyramids[b], points_h[b], person_hw, "geometry")
        f_ga = augment_features(f_g, f_h)
        per_ga = project_points(f_ga, bank, "GA")
        per_g = project_points(f_g, bank, "G")
        for li, (pth, ptw, gth, gtw) in enumerate(layer_grids):
            person_layers[li].append(
                reposition(per_ga[li], points_h[b], pth, ptw, scale=pth / person_hw[0])
            )
            garment_layers[li].append(
                reposition(per_g[li], points_g[b], gth, gtw, scale=gth / garment_hw[0])
            )
    return InjectionPack(
        person_maps=[torch.stack(maps) for maps in person_layers],
        garment_maps=[torch.stack(maps) for maps in garment_layers],
    )
