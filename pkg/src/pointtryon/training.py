"""Training stages and the ablation protocol.

Stage 1 trains the flow estimator against ground-truth fields (skipped in
oracle-flow mode). Stage 2 pre-trains the plain dual-branch model with
geometry inputs ("base_geo"); its two branches are then frozen and reused
as the garment/geometry feature encoders. Stage 3 fine-tunes from that
checkpoint with point-feature injection and the point-focused loss.

The four ablation variants are:
    base                 -- dual branch, no geometry inputs
    base_geo             -- plus depth/normal conditioning
    base_geo_spm         -- plus point-feature injection (lambda = 0)
    base_geo_spm_ploss   -- plus the point-focused loss term
"""

from __future__ import annotations

import copy
import json
import math
import hashlib
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import diffusion, tensorio
from .diffusion import NoiseSchedule, build_schedule, point_focused_loss
from .flow import DisplacementField, apply_flow_to_points, warp_image
from .flownet import FlowEstimator, warp_with_flow
from .injection import InjectionPack, build_injection_pack_batched
from .metrics import correspondence_rate, match_points_into_image, point_match_mse, ssim
from .networks import ConditionBundle, DualBranchModel, ModelConfig, UNet, UNetConfig
from .points import PointSet, build_point_mask, detect_interest_points, farthest_point_sample
from .synthdata import SyntheticDataset

VARIANTS = ("base", "base_geo", "base_geo_spm", "base_geo_spm_ploss")

# Published full-scale results the toy ablation mirrors directionally
# (not reproducible at this scale; shown in reports for context).
REFERENCE_FULLSCALE_SSIM = {
    "base": 0.876,
    "base_geo": 0.881,
    "base_geo_spm": 0.904,
    "base_geo_spm_ploss": 0.911,
}
REFERENCE_FULLSCALE_K_SSIM = {10: 0.890, 25: 0.911, 50: 0.901, 75: 0.893}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    variant: str = "base_geo_spm_ploss"
    lam: float = 0.5              # point-focused loss weight ("lambda")
    K: int = 25                   # semantic point count
    drop_prob: float = 0.1        # condition dropout probability per sample
    guidance_scale: float = 2.0
    lr: float = 5e-5
    warmup_steps: int = 500
    total_steps: int = 2000
    batch: int = 16
    seed: int = 0
    base_channels: int = 32
    heads: int = 4
    time_embed_dim: int = 64
    embed_dim: int = 64
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    mask_radius: int = 1          # point-mask Chebyshev dilation
    detector_max_n: int = 200
    flow_mode: str = "oracle"     # "oracle" | "learned"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "base_geo_spm":
            self.lam = 0.0
        if self.lam < 0 or not 0 <= self.drop_prob <= 1:
            raise ValueError("bad lam/drop_prob")
        if self.flow_mode not in ("oracle", "learned"):
            raise ValueError("flow_mode must be 'oracle' or 'learned'")

    @property
    def use_geometry(self) -> bool:
        return self.variant != "base"

    @property
    def use_injection(self) -> bool:
        return self.variant in ("base_geo_spm", "base_geo_spm_ploss")

    def to_json(self) -> str:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)


class TensorData:
    """Dataset staged as stacked float32 torch tensors plus the raw samples."""

    def __init__(self, ds: SyntheticDataset):
        self.samples = ds.samples
        self.params = ds.params

        def stack(get):
            t = torch.stack([torch.from_numpy(get(s)) for s in ds.samples])
            # channels_last roughly halves CPU conv time at these sizes
            return t.contiguous(memory_format=torch.channels_last)

        self.person = stack(lambda s: s.person)
        self.agnostic = stack(lambda s: s.agnostic)
        self.depth = stack(lambda s: s.depth)
        self.normal = stack(lambda s: s.normal)
        self.garment = stack(lambda s: s.garment)
        self.garment_mask = torch.stack(
            [torch.from_numpy(s.garment_mask.astype(np.float32)) for s in ds.samples]
        )

    def __len__(self) -> int:
        return len(self.samples)


def add_noise_batch(x0: torch.Tensor, eps: torch.Tensor, ts: torch.Tensor,
                    sched: NoiseSchedule) -> torch.Tensor:
    """Vectorized forward noising with one timestep per sample."""
    ab = torch.as_tensor(sched.alpha_bar, dtype=x0.dtype)[ts - 1].view(-1, 1, 1, 1)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def sample_garment_points(garment: np.ndarray, K: int, max_n: int = 200) -> PointSet:
    """Detector + farthest-point subsampling on one garment image."""
    pts = detect_interest_points(garment, max_n=max_n)
    if len(pts) == 0:
        h, w = garment.shape[-2:]
        return PointSet(np.array([[h / 2.0, w / 2.0]]), frame=(h, w))
    return farthest_point_sample(pts, K)


def _model_config(cfg: TrainConfig, data: TensorData) -> ModelConfig:
    return ModelConfig(
        person_hw=tuple(data.person.shape[-2:]),
        garment_hw=tuple(data.garment.shape[-2:]),
        base_channels=cfg.base_channels,
        heads=cfg.heads,
        time_embed_dim=cfg.time_embed_dim,
        embed_dim=cfg.embed_dim,
        use_geometry=cfg.use_geometry,
        use_injection=cfg.use_injection,
    )


class FrozenEncoders(nn.Module):
    """Garment/geometry feature encoders: frozen copies of the two branches
    of a pre-trained base_geo model.

    The garment encoder is the garment branch verbatim; the geometry
    encoder shares the main branch's architecture with the stem rebuilt for
    the 4-channel depth+normal input (its weights are the stem slice for
    those channel slots, which is exactly the main branch applied to an
    input whose other slots are zero)."""

    def __init__(self, base: DualBranchModel):
        super().__init__()
        if not base.config.use_geometry:
            raise ValueError("feature encoders require a geometry-conditioned base model")
        self.garment_unet = copy.deepcopy(base.garm)
        main_cfg = base.main.config
        geo_cfg = UNetConfig(
            in_channels=4,
            out_channels=main_cfg.out_channels,
            base_channels=main_cfg.base_channels,
            time_embed_dim=main_cfg.time_embed_dim,
            heads=main_cfg.heads,
        )
        self.geometry_unet = UNet(geo_cfg)
        state = copy.deepcopy(base.main.state_dict())
        state["stem.weight"] = state["stem.weight"][:, 6:10]
        self.geometry_unet.load_state_dict(state)
        self.embedder = copy.deepcopy(base.embedder)
        self.time_embed = copy.deepcopy(base.time_embed)
        self.time_mlp = copy.deepcopy(base.time_mlp)
        self.embed_proj = copy.deepcopy(base.embed_proj)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def feature_width(self) -> int:
        return sum(self.garment_unet.feature_widths)

    def _t0(self, batch: int) -> torch.Tensor:
        dtype = next(self.time_mlp.parameters()).dtype
        return self.time_mlp(self.time_embed(torch.zeros(batch, dtype=dtype)))

    @torch.no_grad()
    def garment_pyramid(self, garment: torch.Tensor) -> list[torch.Tensor]:
        temb = self._t0(garment.shape[0]) + self.embed_proj(self.embedder(garment))
        return self.garment_unet.features(garment, temb)

    @torch.no_grad()
    def geometry_pyramid(self, depth: torch.Tensor, normal: torch.Tensor) -> list[torch.Tensor]:
        x = torch.cat([depth, normal], dim=1)
        return self.geometry_unet.features(x, self._t0(x.shape[0]))

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.numpy().tobytes())
        return h.hexdigest()


def _oracle_flows(data: TensorData, idx: np.ndarray) -> list[DisplacementField]:
    return [data.samples[i].gt_flow for i in idx]


class LearnedFlowProvider:
    def __init__(self, flow_net: FlowEstimator):
        if not flow_net.trained:
            raise ValueError("flow estimator is untrained")
        self.net = flow_net

    def __call__(self, data: TensorData, idx: np.ndarray) -> list[DisplacementField]:
        return self.net.predict(
            data.garment[idx], data.agnostic[idx], data.depth[idx], data.normal[idx]
        )


class EncoderCache:
    """Level-stacked frozen-encoder pyramids for a whole dataset. The
    encoders are frozen and their inputs constant per sample, so the
    pyramids are computed once up front and indexed per batch."""

    def __init__(self, encoders: FrozenEncoders, data: TensorData, chunk: int = 32):
        g_parts, h_parts = [], []
        for i0 in range(0, len(data), chunk):
            sl = slice(i0, min(i0 + chunk, len(data)))
            g_parts.append(encoders.garment_pyramid(data.garment[sl]))
            h_parts.append(encoders.geometry_pyramid(data.depth[sl], data.normal[sl]))
        self.garment = [torch.cat([p[l] for p in g_parts]) for l in range(len(g_parts[0]))]
        self.geometry = [torch.cat([p[l] for p in h_parts]) for l in range(len(h_parts[0]))]


def _make_pack(
    model: DualBranchModel,
    cache: EncoderCache,
    data: TensorData,
    idx: np.ndarray,
    flows: list[DisplacementField],
    cfg: TrainConfig,
) -> tuple[InjectionPack, list[PointSet], list[PointSet]]:
    pts_g = [
        sample_garment_points(data.samples[i].garment, cfg.K, cfg.detector_max_n)
        for i in idx
    ]
    pts_h = [apply_flow_to_points(p, f) for p, f in zip(pts_g, flows)]
    pack = build_injection_pack_batched(
        garment_pyramid=[lvl[idx] for lvl in cache.garment],
        geometry_pyramid=[lvl[idx] for lvl in cache.geometry],
        points_g=pts_g,
        points_h=pts_h,
        bank=model.bank,
        layer_grids=model.config.layer_grids(),
        person_hw=model.config.person_hw,
        garment_hw=model.config.garment_hw,
    )
    return pack, pts_g, pts_h


def _point_masks(pts_h: list[PointSet], hw: tuple[int, int], r: int) -> torch.Tensor:
    grids = [build_point_mask(p, hw[0], hw[1], downscale=1, r=r).grid for p in pts_h]
    return torch.from_numpy(np.stack(grids)).unsqueeze(1)


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    return cfg.lr


def train_variant(
    cfg: TrainConfig,
    train_ds: SyntheticDataset | TensorData,
    base_model: DualBranchModel | None = None,
    encoders: FrozenEncoders | None = None,
    flow_net: FlowEstimator | None = None,
    log_every: int = 0,
) -> tuple[DualBranchModel, FrozenEncoders | None, list[float]]:
    """Train one ablation variant from scratch or from a base checkpoint.

    For injection variants, ``base_model`` (a trained base_geo model)
    provides both the weight initialization and the frozen feature
    encoders. Returns (model, encoders or None, per-step loss history).
    """
    data = train_ds if isinstance(train_ds, TensorData) else TensorData(train_ds)
    sched = cfg.schedule()
    torch.manual_seed(cfg.seed)
    model = DualBranchModel(_model_config(cfg, data))
    model.to(memory_format=torch.channels_last)
    if cfg.use_injection:
        if base_model is None:
            raise ValueError("injection variants require a pre-trained base_geo model")
        missing, unexpected = model.load_state_dict(base_model.state_dict(), strict=False)
        if unexpected:
            raise ValueError(f"incompatible base checkpoint: {unexpected[:3]}")
        if encoders is None:
            encoders = FrozenEncoders(base_model)
    flow_provider = None
    enc_cache = None
    if cfg.use_injection:
        enc_cache = EncoderCache(encoders, data)
        if cfg.flow_mode == "learned":
            provider = LearnedFlowProvider(flow_net)
            flow_provider = lambda idx: provider(data, idx)
        else:
            flow_provider = lambda idx: _oracle_flows(data, idx)

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    hw = tuple(data.person.shape[-2:])
    history: list[float] = []
    model.train()
    for step in range(cfg.total_steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(step, cfg)
        idx = rng.choice(n, size=min(cfg.batch, n), replace=False)
        x0 = data.person[idx]
        drop = torch.from_numpy(rng.random(len(idx)) < cfg.drop_prob)
        ts = torch.from_numpy(rng.integers(1, sched.T + 1, size=len(idx)))
        eps = torch.from_numpy(
            rng.standard_normal(size=tuple(x0.shape), dtype=np.float32)
        ).contiguous(memory_format=torch.channels_last)
        x_t = add_noise_batch(x0, eps, ts, sched)
        embed = model.embed_garment(data.garment[idx])
        _, garm_kv = model.reference_pass(data.garment[idx], embed)
        bundle = ConditionBundle(
            agnostic=data.agnostic[idx],
            garment=data.garment[idx],
            depth=data.depth[idx] if cfg.use_geometry else None,
            normal=data.normal[idx] if cfg.use_geometry else None,
            garment_embed=embed,
            drop_flags=drop,
        )
        pack = None
        mask = None
        if cfg.use_injection:
            flows = flow_provider(idx)
            pack, _, pts_h = _make_pack(model, enc_cache, data, idx, flows, cfg)
            if cfg.lam > 0:
                mask = _point_masks(pts_h, hw, cfg.mask_radius)
        eps_hat, _ = model(x_t, ts.float(), bundle, garm_kv, pack)
        loss = (
            point_focused_loss(eps, eps_hat, mask, cfg.lam)
            if mask is not None
            else diffusion.diffusion_loss(eps, eps_hat)
        )
        if not torch.isfinite(loss):
            raise TrainingDiverged(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean(history[-log_every:]))
            print(f"[{cfg.variant} seed={cfg.seed}] step {step + 1}/{cfg.total_steps} "
                  f"loss {recent:.4f}")
    model.trained = True
    return model, encoders, history


def pretrain_base_geo(
    cfg: TrainConfig, train_ds: SyntheticDataset | TensorData, log_every: int = 0
) -> tuple[DualBranchModel, list[float]]:
    """Stage 2: train the geometry-conditioned dual-branch model whose two
    branches become the frozen feature encoders."""
    if cfg.variant != "base_geo":
        cfg = replace(cfg, variant="base_geo")
    model, _, history = train_variant(cfg, train_ds, log_every=log_every)
    return model, history


def finetune_spm(
    cfg: TrainConfig,
    train_ds: SyntheticDataset | TensorData,
    base_model: DualBranchModel,
    flow_net: FlowEstimator | None = None,
    encoders: FrozenEncoders | None = None,
    log_every: int = 0,
) -> tuple[DualBranchModel, FrozenEncoders, list[float]]:
    """Stage 3: fine-tune from a base_geo checkpoint with point injection
    (and the point-focused loss unless the variant pins lambda to 0)."""
    if cfg.variant not in ("base_geo_spm", "base_geo_spm_ploss"):
        raise ValueError("finetune_spm expects an injection variant")
    model, encoders, history = train_variant(
        cfg, train_ds, base_model=base_model, encoders=encoders,
        flow_net=flow_net, log_every=log_every,
    )
    return model, encoders, history


def train_flow(
    cfg: TrainConfig, train_ds: SyntheticDataset | TensorData, log_every: int = 0
) -> tuple[FlowEstimator, list[float]]:
    """Stage 1: supervise the flow estimator with ground-truth fields plus a
    photometric warp term."""
    data = train_ds if isinstance(train_ds, TensorData) else TensorData(train_ds)
    torch.manual_seed(cfg.seed)
    net = FlowEstimator()
    opt = torch.optim.AdamW(net.parameters(), lr=max(cfg.lr, 1e-4), betas=(0.9, 0.999))
    rng = np.random.default_rng(cfg.seed)
    gt = torch.stack(
        [torch.from_numpy(s.gt_flow.offsets.astype(np.float32)).permute(2, 0, 1)
         for s in data.samples]
    )
    gh, gw = data.garment.shape[-2:]
    h, w = data.person.shape[-2:]
    weight = torch.full((1, 1, h, w), 0.2)
    weight[..., :gh, :gw] = 1.0
    history: list[float] = []
    n = len(data)
    for step in range(cfg.total_steps):
        idx = rng.choice(n, size=min(cfg.batch, n), replace=False)
        pred = net(data.garment[idx], data.agnostic[idx], data.depth[idx], data.normal[idx])
        epe = ((pred - gt[idx]) ** 2).sum(dim=1, keepdim=True).sqrt()
        loss = (epe * weight).mean()
        warped = warp_with_flow(data.garment[idx], pred)
        m = data.garment_mask[idx].unsqueeze(1)
        loss = loss + 0.1 * ((warped - data.person[idx]).abs() * m).sum() / (m.sum() * 3 + 1)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"[flow] step {step + 1}/{cfg.total_steps} "
                  f"loss {np.mean(history[-log_every:]):.4f}")
    net.trained = True
    return net, history


def flow_epe(net: FlowEstimator, data: TensorData) -> float:
    """Mean endpoint error on the garment coordinate block (where the field
    is consumed by point projection)."""
    gh, gw = data.garment.shape[-2:]
    fields = net.predict(data.garment, data.agnostic, data.depth, data.normal)
    errs = []
    for f, s in zip(fields, data.samples):
        d = f.offsets[:gh, :gw] - s.gt_flow.offsets[:gh, :gw]
        errs.append(float(np.sqrt((d ** 2).sum(-1)).mean()))
    return float(np.mean(errs))


# --- checkpointing -----------------------------------------------------------

def save_model(path: str | Path, model: nn.Module, cfg: TrainConfig | None = None) -> None:
    entries = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    tensorio.save_checkpoint(path, entries)
    if cfg is not None:
        Path(path).with_suffix(".json").write_text(cfg.to_json())


def load_model_state(path: str | Path, model: nn.Module) -> nn.Module:
    expected = set(model.state_dict().keys())
    entries = tensorio.load_checkpoint(path, expected_names=expected)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in entries.items()})
    model.trained = True
    return model


def load_dual_branch(path: str | Path, data: TensorData,
                     cfg: TrainConfig | None = None) -> tuple[DualBranchModel, TrainConfig]:
    if cfg is None:
        cfg = TrainConfig.from_json(Path(path).with_suffix(".json").read_text())
    model = DualBranchModel(_model_config(cfg, data))
    load_model_state(path, model)
    return model, cfg


# --- sampling and evaluation -------------------------------------------------

class TryOnSampler:
    """Adapter giving :func:`pointtryon.diffusion.sample` a conditioned
    noise predictor. Garment-branch key/values and the injection pack are
    computed once per bundle and cached across denoising steps."""

    def __init__(
        self,
        model: DualBranchModel,
        cfg: TrainConfig,
        encoders: FrozenEncoders | None = None,
        flows: list[DisplacementField] | None = None,
        points_g: list[PointSet] | None = None,
        cache: bool = True,
    ):
        self.model = model
        self.cfg = cfg
        self.encoders = encoders
        self.flows = flows
        self.points_g = points_g
        self.cache = cache
        self._cached: tuple[int, list, InjectionPack | None] | None = None

    @property
    def trained(self) -> bool:
        return bool(getattr(self.model, "trained", False))

    def sample_shape(self, bundle: ConditionBundle) -> tuple[int, ...]:
        return tuple(bundle.agnostic.shape)

    def _conditioning(self, bundle: ConditionBundle):
        if self._cached is not None and self._cached[0] == id(bundle) and self.cache:
            return self._cached[1], self._cached[2]
        with torch.no_grad():
            embed = bundle.garment_embed
            if embed is None:
                embed = self.model.embed_garment(bundle.garment)
                bundle.garment_embed = embed
            _, kv = self.model.reference_pass(bundle.garment, embed)
            pack = None
            if self.model.config.use_injection:
                if self.flows is None:
                    raise ValueError("injection sampling needs per-sample flows")
                pts_g = self.points_g
                if pts_g is None:
                    pts_g = [
                        sample_garment_points(g.numpy(), self.cfg.K, self.cfg.detector_max_n)
                        for g in bundle.garment
                    ]
                pts_h = [apply_flow_to_points(p, f) for p, f in zip(pts_g, self.flows)]
                g_pyr = self.encoders.garment_pyramid(bundle.garment)
                h_pyr = self.encoders.geometry_pyramid(bundle.depth, bundle.normal)
                pack = build_injection_pack_batched(
                    garment_pyramid=g_pyr,
                    geometry_pyramid=h_pyr,
                    points_g=pts_g,
                    points_h=pts_h,
                    bank=self.model.bank,
                    layer_grids=self.model.config.layer_grids(),
                    person_hw=self.model.config.person_hw,
                    garment_hw=self.model.config.garment_hw,
                )
        if self.cache:
            self._cached = (id(bundle), kv, pack)
        return kv, pack

    @torch.no_grad()
    def predict_pair(self, x_t: torch.Tensor, t: int, bundle: ConditionBundle,
                     need_uncond: bool = True):
        kv, pack = self._conditioning(bundle)
        tv = torch.full((x_t.shape[0],), float(t))
        eps_c, _ = self.model(x_t, tv, bundle, kv, pack)
        eps_u = None
        if need_uncond:
            eps_u, _ = self.model(x_t, tv, bundle, None, None, unconditional=True)
        return eps_u, eps_c


def evaluate_model(
    model: DualBranchModel,
    cfg: TrainConfig,
    test_data: TensorData,
    encoders: FrozenEncoders | None = None,
    flow_net: FlowEstimator | None = None,
    eval_seed: int = 0,
) -> dict:
    """Sample the full test split and score it.

    Metrics: masked-region L2 reconstruction error, SSIM against the paired
    ground truth, point-matching MSE of garment points located in the
    output, and the RANSAC correspondence inlier rate/count.
    """
    was_training = model.training
    model.eval()
    n = len(test_data)
    if cfg.use_injection:
        if cfg.flow_mode == "learned":
            flows = LearnedFlowProvider(flow_net)(test_data, np.arange(n))
        else:
            flows = [s.gt_flow for s in test_data.samples]
    else:
        flows = None
    bundle = ConditionBundle(
        agnostic=test_data.agnostic,
        garment=test_data.garment,
        depth=test_data.depth if cfg.use_geometry else None,
        normal=test_data.normal if cfg.use_geometry else None,
    )
    sampler = TryOnSampler(model, cfg, encoders=encoders, flows=flows)
    out = diffusion.sample(
        sampler, bundle, cfg.schedule(), guidance=cfg.guidance_scale,
        seed=eval_seed, num_steps=cfg.sample_steps,
    )
    out_np = out.clamp(-1, 1).numpy()
    l2s, ssims, pmses, rates, counts = [], [], [], [], []
    for i, s in enumerate(test_data.samples):
        m = s.garment_mask
        diff = (out_np[i] - s.person)[:, m]
        l2s.append(float((diff ** 2).mean()))
        ssims.append(ssim(out_np[i], s.person))
        flow_i = flows[i] if flows is not None else s.gt_flow
        template = warp_image(s.garment, flow_i)
        expected = apply_flow_to_points(s.gt_points_g, flow_i)
        pred = match_points_into_image(template, out_np[i], expected)
        pmses.append(point_match_mse(pred, s.gt_points_h))
        rep = correspondence_rate(s.garment, out_np[i], seed=eval_seed)
        rates.append(rep.inlier_rate)
        counts.append(rep.inlier_count)
    if was_training:
        model.train()
    return {
        "masked_l2": float(np.mean(l2s)),
        "ssim": float(np.mean(ssims)),
        "point_mse": float(np.mean(pmses)),
        "inlier_rate": float(np.mean(rates)),
        "inlier_count": float(np.mean(counts)),
    }


# --- ablation protocol -------------------------------------------------------

def _agg(values: list[float]) -> dict:
    return {
        "mean": float(np.mean(values)),
        "sd": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
        "values": [float(v) for v in values],
    }


def run_ablation(
    train_ds: SyntheticDataset,
    test_ds: SyntheticDataset,
    seeds: tuple[int, ...] = (0, 1, 2),
    k_sweep: tuple[int, ...] = (10, 25, 50, 75),
    cfg: TrainConfig | None = None,
    out_dir: str | Path | None = None,
    cache_dir: str | Path | None = None,
    log_every: int = 0,
) -> dict:
    """Train and evaluate the four variants plus a point-count sweep over
    the given seeds; returns (and optionally writes) the report.

    ``cache_dir`` lets interrupted protocols resume: finished (variant,
    seed) runs are reloaded from their metrics files.
    """
    base_cfg = cfg if cfg is not None else TrainConfig()
    train_data = TensorData(train_ds)
    test_data = TensorData(test_ds)
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)

    def cached_run(tag: str, fn):
        if cache:
            f = cache / f"{tag}.json"
            if f.exists():
                return json.loads(f.read_text())
        metrics = fn()
        if cache:
            (cache / f"{tag}.json").write_text(json.dumps(metrics))
        return metrics

    per_variant: dict[str, list[dict]] = {v: [] for v in VARIANTS}
    per_k: dict[int, list[dict]] = {k: [] for k in k_sweep}
    for seed in seeds:
        eval_seed = 77_000 + seed

        def run_plain(variant):
            c = replace(base_cfg, variant=variant, seed=seed)
            model, _, _ = train_variant(c, train_data, log_every=log_every)
            return model, evaluate_model(model, c, test_data, eval_seed=eval_seed)

        metrics = cached_run(f"base_s{seed}", lambda: run_plain("base")[1])
        per_variant["base"].append(metrics)

        # base_geo is also the checkpoint the injection variants start from,
        # so it is always (re)trained even when its metrics are cached.
        c_bg = replace(base_cfg, variant="base_geo", seed=seed)
        bg_model, _, _ = train_variant(c_bg, train_data, log_every=log_every)
        metrics = cached_run(
            f"base_geo_s{seed}",
            lambda: evaluate_model(bg_model, c_bg, test_data, eval_seed=eval_seed),
        )
        per_variant["base_geo"].append(metrics)
        encoders = FrozenEncoders(bg_model)

        def run_spm(variant, K):
            c = replace(base_cfg, variant=variant, seed=seed, K=K)
            model, enc, _ = finetune_spm(
                c, train_data, base_model=bg_model, encoders=encoders,
                log_every=log_every,
            )
            return evaluate_model(model, c, test_data, encoders=enc, eval_seed=eval_seed)

        metrics = cached_run(
            f"base_geo_spm_s{seed}", lambda: run_spm("base_geo_spm", base_cfg.K)
        )
        per_variant["base_geo_spm"].append(metrics)
        metrics = cached_run(
            f"base_geo_spm_ploss_s{seed}",
            lambda: run_spm("base_geo_spm_ploss", base_cfg.K),
        )
        per_variant["base_geo_spm_ploss"].append(metrics)
        for k in k_sweep:
            if k == base_cfg.K:
                per_k[k].append(per_variant["base_geo_spm_ploss"][-1])
                continue
            metrics = cached_run(
                f"k{k}_s{seed}", lambda: run_spm("base_geo_spm_ploss", k)
            )
            per_k[k].append(metrics)

    metric_names = ("masked_l2", "ssim", "point_mse", "inlier_rate", "inlier_count")
    report = {
        "protocol": {
            "n_train": len(train_ds),
            "n_test": len(test_ds),
            "person_hw": list(train_ds.params.person_hw),
            "garment_hw": list(train_ds.params.garment_hw),
            "seeds": list(seeds),
            "flow_mode": base_cfg.flow_mode,
            "total_steps": base_cfg.total_steps,
            "batch": base_cfg.batch,
            "lr": base_cfg.lr,
            "warmup_steps": base_cfg.warmup_steps,
            "base_channels": base_cfg.base_channels,
            "optimizer": "AdamW(beta1=0.9, beta2=0.999)",
        },
        "variants": {
            v: {m: _agg([r[m] for r in runs]) for m in metric_names}
            for v, runs in per_variant.items()
        },
        "k_sweep": {
            str(k): {m: _agg([r[m] for r in runs]) for m in metric_names}
            for k, runs in per_k.items()
        },
        "reference_fullscale_ssim": REFERENCE_FULLSCALE_SSIM,
        "reference_fullscale_k_ssim": {str(k): v for k, v in REFERENCE_FULLSCALE_K_SSIM.items()},
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation_report.json").write_text(json.dumps(report, indent=2))
    return report


def format_ablation_table(report: dict) -> str:
    """Human-readable summary of an ablation report."""
    lines = ["variant                      masked_l2        ssim        point_mse   ref_ssim"]
    for v in VARIANTS:
        agg = report["variants"][v]
        lines.append(
            f"{v:<26}  {agg['masked_l2']['mean']:.4f}±{agg['masked_l2']['sd']:.4f}"
            f"  {agg['ssim']['mean']:.4f}  {agg['point_mse']['mean']:>10.2f}"
            f"   {report['reference_fullscale_ssim'][v]:.3f}"
        )
    lines.append("point count sweep (full variant):")
    for k, agg in report["k_sweep"].items():
        ref = report["reference_fullscale_k_ssim"].get(k, "-")
        lines.append(
            f"  K={k:<4} masked_l2 {agg['masked_l2']['mean']:.4f}±{agg['masked_l2']['sd']:.4f}"
            f"  point_mse {agg['point_mse']['mean']:.2f}  ref_ssim {ref}"
        )
    return "\n".join(lines)
