"""Trainable networks: the generator UNet pair, frozen feature encoders and
the garment embedding head.

The generator ("main") UNet denoises the person image conditioned on
channel-concatenated inputs (x_t, agnostic, depth, normal), a garment
embedding added to its timestep embedding, and the garment-branch hidden
states consumed by its attention layers. The garment branch runs the same
architecture once per sample (it is timestep-free, so its states are cached
across denoising steps).

Six self-attention layers sit at pyramid levels (1, 2, 2, 2, 1, 1) in
execution order; point features are injected at the first two and last two
(the middle layers carry coarse content, not texture detail).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .points import PointSet
from .injection import InjectionPack, ProjectorBank, spm_attention

ATTN_LEVELS = (1, 2, 2, 2, 1, 1)
INJECTION_LAYERS = (0, 1, 4, 5)


@dataclass
class UNetConfig:
    in_channels: int
    out_channels: int = 3
    base_channels: int = 32
    depth: int = 3
    attn_layers: tuple[int, ...] = ATTN_LEVELS
    time_embed_dim: int = 64
    heads: int = 4

    def __post_init__(self):
        if self.depth != 3:
            raise ValueError("this architecture is fixed at 3 resolution levels")
        if len(self.attn_layers) < 4:
            raise ValueError("need at least 4 attention layers for injection")
        if tuple(self.attn_layers) != ATTN_LEVELS:
            raise ValueError(f"attention layout must be {ATTN_LEVELS}")

    @property
    def level_channels(self) -> tuple[int, int, int]:
        c = self.base_channels
        return (c, 2 * c, 4 * c)

    @property
    def attn_widths(self) -> tuple[int, ...]:
        return tuple(self.level_channels[lv] for lv in self.attn_layers)

    @property
    def injection_layers(self) -> tuple[int, ...]:
        return INJECTION_LAYERS

    @property
    def injection_widths(self) -> tuple[int, ...]:
        return tuple(self.attn_widths[i] for i in self.injection_layers)


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
        ).to(t.device)
        ang = t.double().unsqueeze(1) * freqs.unsqueeze(0)
        out_dtype = t.dtype if t.is_floating_point() else torch.get_default_dtype()
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1).to(out_dtype)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Self-attention over spatial tokens with optional garment keys/values
    and additive point-feature injection on queries and keys."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must divide heads")
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def weights(self, garm: "AttentionBlock | None" = None) -> dict[str, torch.Tensor]:
        w = {"wq": self.q.weight, "wk": self.k.weight, "wv": self.v.weight}
        if garm is not None:
            w["wkg"] = garm.k.weight
            w["wvg"] = garm.v.weight
        return w

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x).flatten(2).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        garm_kv: tuple[torch.Tensor, torch.Tensor] | None = None,
        f_person: torch.Tensor | None = None,
        f_garm: torch.Tensor | None = None,
        garm_drop: torch.Tensor | None = None,
        record: dict | None = None,
    ) -> torch.Tensor:
        B, C, H, W = x.shape
        tok = self.tokens(x)
        q = self.q(tok)
        k = self.k(tok)
        v = self.v(tok)
        if record is not None:
            record["state"] = tok
            record["kv"] = (k, v)
        if f_person is not None:
            q = q + f_person
            k = k + f_person
        if garm_kv is not None:
            kg, vg = garm_kv
            if f_garm is not None:
                kg = kg + f_garm
            k = torch.cat([k, kg], dim=1)
            v = torch.cat([v, vg], dim=1)
        mask = None
        if garm_drop is not None and garm_kv is not None and bool(garm_drop.any()):
            mask = torch.zeros(B, 1, 1, k.shape[1], dtype=q.dtype, device=x.device)
            mask[garm_drop, :, :, tok.shape[1]:] = float("-inf")

        def split(t):
            return t.view(B, t.shape[1], self.heads, C // self.heads).transpose(1, 2)

        out = F.scaled_dot_product_attention(split(q), split(k), split(v), attn_mask=mask)
        out = out.transpose(1, 2).reshape(B, tok.shape[1], C)
        y = x + self.proj(out).transpose(1, 2).reshape(B, C, H, W)
        return y.contiguous(memory_format=torch.channels_last)


class UNet(nn.Module):
    """3-level UNet with six tapped attention layers.

    ``forward`` serves both branches: the garment branch runs it with
    ``collect=`` dicts to expose per-layer hidden states and key/value
    projections; the main branch consumes those via ``garm_kv`` plus
    optional injection maps.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        c0, c1, c2 = config.level_channels
        te = config.time_embed_dim
        self.stem = nn.Conv2d(config.in_channels, c0, 3, padding=1)
        self.down0 = ResBlock(c0, c0, te)
        self.down1 = ResBlock(c0, c1, te)
        self.down2 = ResBlock(c1, c2, te)
        self.mid = ResBlock(c2, c2, te)
        self.up1 = ResBlock(c2 + c1, c1, te)
        self.up0 = ResBlock(c1 + c0, c0, te)
        self.attn = nn.ModuleList(
            AttentionBlock(self.config.level_channels[lv], config.heads)
            for lv in config.attn_layers
        )
        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        self.out_conv = nn.Conv2d(c0, config.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(
        self,
        x: torch.Tensor,
        temb: torch.Tensor,
        garm_kv: list[tuple[torch.Tensor, torch.Tensor]] | None = None,
        pack: InjectionPack | None = None,
        garm_drop: torch.Tensor | None = None,
        collect: list[dict] | None = None,
    ) -> torch.Tensor:
        inj = {li: i for i, li in enumerate(self.config.injection_layers)} if pack else {}

        def attend(i, h):
            rec = None
            if collect is not None:
                rec = {}
                collect.append(rec)
            f_p = pack.person_maps[inj[i]] if i in inj else None
            f_g = pack.garment_maps[inj[i]] if i in inj else None
            kv = garm_kv[i] if garm_kv is not None else None
            return self.attn[i](h, garm_kv=kv, f_person=f_p, f_garm=f_g,
                                garm_drop=garm_drop, record=rec)

        h0 = self.down0(self.stem(x), temb)
        h1 = attend(0, self.down1(F.avg_pool2d(h0, 2), temb))
        h2 = attend(1, self.down2(F.avg_pool2d(h1, 2), temb))
        m = self.mid(h2, temb)
        m = attend(3, attend(2, m))
        u = F.interpolate(m, scale_factor=2.0, mode="nearest")
        u = self.up1(torch.cat([u, h1], dim=1), temb)
        u = attend(5, attend(4, u))
        u = F.interpolate(u, scale_factor=2.0, mode="nearest")
        u = self.up0(torch.cat([u, h0], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(u)))

    def features(self, x: torch.Tensor, temb: torch.Tensor) -> list[torch.Tensor]:
        """Encoder-trunk feature pyramid: four maps halving in size."""
        h0 = self.down0(self.stem(x), temb)
        h1 = self.attn[0](self.down1(F.avg_pool2d(h0, 2), temb))
        h2 = self.attn[1](self.down2(F.avg_pool2d(h1, 2), temb))
        m = self.attn[3](self.attn[2](self.mid(h2, temb)))
        return [h0, h1, m, F.avg_pool2d(m, 2)]

    @property
    def feature_widths(self) -> list[int]:
        c0, c1, c2 = self.config.level_channels
        return [c0, c1, c2, c2]


class GarmentEmbedder(nn.Module):
    """Small convolutional global-pool encoder producing the garment
    embedding vector added to the generator's timestep embedding."""

    def __init__(self, embed_dim: int = 64, width: int = 32):
        super().__init__()
        chans = [3, width, width, 2 * width, 2 * width]
        layers: list[nn.Module] = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                       nn.GroupNorm(_groups(cout), cout), nn.SiLU()]
        self.net = nn.Sequential(*layers)
        self.head = nn.Linear(2 * width, embed_dim)

    def forward(self, garment: torch.Tensor) -> torch.Tensor:
        h = self.net(garment).mean(dim=(2, 3))
        return self.head(h)


@dataclass
class ConditionBundle:
    """Everything the conditioned denoiser consumes for one batch.

    Image members are (B, C, H, W) tensors sharing the person frame; the
    garment may use its own frame. ``drop_flags`` is a per-sample boolean
    tensor; a flagged sample has every condition zeroed, its garment keys
    masked and its injection disabled (the unconditional mode used both for
    training dropout and classifier-free guidance).
    """

    agnostic: torch.Tensor
    garment: torch.Tensor
    depth: torch.Tensor | None = None
    normal: torch.Tensor | None = None
    garment_embed: torch.Tensor | None = None
    points_garment: list[PointSet] | None = None
    points_person: list[PointSet] | None = None
    drop_flags: torch.Tensor | None = None

    def __post_init__(self):
        hw = self.agnostic.shape[-2:]
        for name in ("depth", "normal"):
            t = getattr(self, name)
            if t is not None and t.shape[-2:] != hw:
                raise ValueError(f"{name} spatial shape {tuple(t.shape[-2:])} != {tuple(hw)}")

    @property
    def batch(self) -> int:
        return self.agnostic.shape[0]


@dataclass
class ModelConfig:
    person_hw: tuple[int, int] = (32, 32)
    garment_hw: tuple[int, int] = (24, 24)
    base_channels: int = 32
    heads: int = 4
    time_embed_dim: int = 64
    embed_dim: int = 64
    use_geometry: bool = True
    use_injection: bool = False

    def __post_init__(self):
        for d in (*self.person_hw, *self.garment_hw):
            if d % 4:
                raise ValueError("resolutions must be divisible by 4")

    @property
    def main_in_channels(self) -> int:
        return 3 + 3 + (4 if self.use_geometry else 0)

    def layer_grids(self) -> list[tuple[int, int, int, int]]:
        """(person_th, person_tw, garment_th, garment_tw) per injection layer."""
        ph, pw = self.person_hw
        gh, gw = self.garment_hw
        grids = []
        for lv in (ATTN_LEVELS[i] for i in INJECTION_LAYERS):
            s = 2 ** lv
            grids.append((ph // s, pw // s, gh // s, gw // s))
        return grids


class DualBranchModel(nn.Module):
    """Main + garment UNets, embedder and (optionally) the injection
    projector bank. Holds only trainable state; the frozen feature encoders
    live outside (see training.FrozenEncoders)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        unet_kw = dict(
            base_channels=config.base_channels,
            time_embed_dim=config.time_embed_dim,
            heads=config.heads,
        )
        self.main = UNet(UNetConfig(in_channels=config.main_in_channels, **unet_kw))
        self.garm = UNet(UNetConfig(in_channels=3, **unet_kw))
        self.embedder = GarmentEmbedder(config.embed_dim, width=config.base_channels)
        self.time_embed = SinusoidalTimeEmbedding(config.time_embed_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embed_dim, config.time_embed_dim),
            nn.SiLU(),
            nn.Linear(config.time_embed_dim, config.time_embed_dim),
        )
        self.embed_proj = nn.Linear(config.embed_dim, config.time_embed_dim, bias=False)
        self.bank = (
            ProjectorBank(
                in_width=sum(self.garm.feature_widths),
                layer_widths=list(self.main.config.injection_widths),
            )
            if config.use_injection
            else None
        )
        self.trained = False

    def _temb(self, t: torch.Tensor, embed: torch.Tensor | None,
              drop: torch.Tensor | None) -> torch.Tensor:
        t = t.to(self.embed_proj.weight.dtype)
        emb = self.time_mlp(self.time_embed(t))
        if embed is not None:
            if drop is not None:
                embed = embed * (~drop).unsqueeze(1)
            emb = emb + self.embed_proj(embed)
        return emb

    def embed_garment(self, garment: torch.Tensor) -> torch.Tensor:
        return self.embedder(garment)

    def reference_pass(self, garment: torch.Tensor, embed: torch.Tensor):
        """Run the garment branch once (timestep-free, constant t = 0, plain
        self-attention) and return its per-layer hidden states and key/value
        projections for the main branch to attend over."""
        t0 = torch.zeros(garment.shape[0], device=garment.device)
        temb = self._temb(t0, embed, drop=None)
        collect: list[dict] = []
        self.garm(garment, temb, collect=collect)
        states = [c["state"] for c in collect]
        kv = [c["kv"] for c in collect]
        return states, kv

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        bundle: ConditionBundle,
        garm_kv: list[tuple[torch.Tensor, torch.Tensor]] | None,
        pack: InjectionPack | None = None,
        unconditional: bool = False,
    ):
        """Predict the noise; returns (eps_hat, attention states).

        ``unconditional=True`` zeroes every condition and detaches the
        garment branch entirely; per-sample ``bundle.drop_flags`` achieve
        the same effect inside a mixed batch via input zeroing and
        garment-key masking.
        """
        B = x_t.shape[0]
        drop = bundle.drop_flags
        if unconditional:
            drop = torch.ones(B, dtype=torch.bool, device=x_t.device)
            garm_kv = None
            pack = None
        keep = (~drop).float().view(B, 1, 1, 1) if drop is not None else None

        def gated(img):
            return img if keep is None else img * keep

        parts = [x_t, gated(bundle.agnostic)]
        if self.config.use_geometry:
            if bundle.depth is None or bundle.normal is None:
                raise ValueError("geometry conditioning requires depth and normal maps")
            parts += [gated(bundle.depth), gated(bundle.normal)]
        x_in = torch.cat(parts, dim=1)
        embed = bundle.garment_embed
        temb = self._temb(t, None if unconditional else embed, drop)
        if pack is not None and drop is not None and drop.any():
            pack = InjectionPack(
                person_maps=[m * (~drop).float().view(B, 1, 1) for m in pack.person_maps],
                garment_maps=[m * (~drop).float().view(B, 1, 1) for m in pack.garment_maps],
            )
        collect: list[dict] = []
        eps = self.main(
            x_in, temb, garm_kv=garm_kv, pack=pack,
            garm_drop=drop if garm_kv is not None else None, collect=collect,
        )
        return eps, [c["state"] for c in collect]
