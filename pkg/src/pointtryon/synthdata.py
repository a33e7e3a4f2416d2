"""Procedural garment/person pair generator with exact ground truth.

Every sample is fully determined by its integer seed: a body (ellipse torso
plus head) with an analytic hemispherical depth profile and derived surface
normals, a corner-rich garment texture with planted corner coordinates, a
ground-truth displacement field (affine placement plus a smooth bend), and
the person image built by backward-warping the garment onto the body. The
garment-agnostic image grays out a generous torso box, so the body geometry
maps carry real information about where the garment must be painted.

Construction guarantees, checked by the test-suite self-test:
  * gt_points_h == apply_flow_to_points(gt_points_g, gt_flow) exactly;
  * person restricted to garment_mask == warp_image(garment, gt_flow);
  * agnostic == person outside agnostic_mask, exactly;
  * normal == normalize(-d(depth)/dx, -d(depth)/dy, 1) at interior pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensorio
from .flow import DisplacementField, make_affine_flow, make_smooth_flow, warp_image, apply_flow_to_points
from .points import PointSet, farthest_point_sample

FAMILIES = ("plaid", "dots", "patches")


@dataclass(frozen=True)
class GeneratorParams:
    person_hw: tuple[int, int] = (64, 48)
    garment_hw: tuple[int, int] = (48, 48)
    cell: int = 3            # texture block pitch in px
    num_points: int = 25     # K ground-truth semantic points
    bend_amp: float = 1.25   # nonrigid drape amplitude in px
    bend_freq: float = 1.5
    agnostic_dilation: int = 2

    def __post_init__(self):
        ph, pw = self.person_hw
        gh, gw = self.garment_hw
        if ph % 4 or pw % 4 or gh % 4 or gw % 4:
            raise ValueError("resolutions must be divisible by 4")
        if gh > ph or gw > pw:
            raise ValueError("garment frame must fit inside the person frame")
        if self.cell < 2:
            raise ValueError("cell must be >= 2")
        if self.bend_amp < 0:
            raise ValueError("bend_amp must be >= 0")


@dataclass
class Sample:
    garment: np.ndarray        # (3, H', W') in [-1, 1]
    person: np.ndarray         # (3, H, W)
    agnostic: np.ndarray       # (3, H, W)
    depth: np.ndarray          # (1, H, W)
    normal: np.ndarray         # (3, H, W), unit normals stored channelwise
    gt_flow: DisplacementField
    gt_points_g: PointSet
    gt_points_h: PointSet
    garment_mask: np.ndarray   # (H, W) bool: warped garment coverage
    agnostic_mask: np.ndarray  # (H, W) bool: grayed-out region
    planted: PointSet          # all planted garment texture corners
    family: str
    seed: int


def _body_depth(rng: np.random.Generator, h: int, w: int):
    """Hemispherical depth over an ellipse torso + head; returns the
    [-1, 1] depth map, the torso parameters and the body mask."""
    tc_r = h * rng.uniform(0.57, 0.63)
    tc_c = w * rng.uniform(0.46, 0.54)
    ta = h * 0.30 * rng.uniform(0.88, 1.12)
    tb = w * 0.27 * rng.uniform(0.88, 1.12)
    hc_r = max(tc_r - ta - h * 0.02, h * 0.04)
    hc_c = tc_c
    hr = h * 0.10 * rng.uniform(0.9, 1.1)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    u = (rr - tc_r) / ta
    v = (cc - tc_c) / tb
    z_torso = np.sqrt(np.clip(1.0 - u * u - v * v, 0.0, None))
    u = (rr - hc_r) / hr
    v = (cc - hc_c) / hr
    z_head = np.sqrt(np.clip(1.0 - u * u - v * v, 0.0, None))
    z = np.maximum(z_torso, 0.9 * z_head)
    depth = 2.0 * z - 1.0
    return depth, (tc_r, tc_c, ta, tb), z > 0.0


def _normals_from_depth(depth: np.ndarray) -> np.ndarray:
    gr, gc = np.gradient(depth)
    n = np.stack([-gr, -gc, np.ones_like(depth)])
    return n / np.linalg.norm(n, axis=0, keepdims=True)


def _palette(rng: np.random.Generator, n: int) -> np.ndarray:
    """n well-separated colors in unit RGB space."""
    cols = rng.uniform(0.05, 0.95, size=(n, 3))
    for i in range(1, n):
        while np.abs(cols[i] - cols[i - 1]).sum() < 0.6:
            cols[i] = rng.uniform(0.05, 0.95, 3)
    return cols


def _texture_plaid(rng, gh, gw, cell):
    # thin bright lines on a dark base: the crossings are sparse, localized
    # corner features that survive the detector's 3 px suppression radius;
    # brightness varies along each line (woven look) so crossings carry a
    # locally distinctive signature for descriptor matching
    pitch = max(cell + 2, 6)
    base = rng.uniform(0.08, 0.3, 3)
    img = np.tile(base, (gh, gw, 1))
    rows = list(range(3, gh - 2, pitch))
    cols = list(range(3, gw - 2, pitch))

    def thread(n):
        prof = ndimage.gaussian_filter(rng.normal(0, 1, n), sigma=2.0, mode="wrap")
        prof = prof / (np.abs(prof).max() + 1e-9)
        return rng.uniform(0.55, 0.85, 3)[None, :] + 0.28 * prof[:, None]

    for r in rows:
        img[r, :] = thread(gw)
    for c in cols:
        img[:, c] = thread(gh)
    corners = [(float(r), float(c)) for r in rows for c in cols]
    return img, corners


def _texture_dots(rng, gh, gw, cell):
    # single-pixel dots: isolated impulses survive non-maximum suppression
    # at any spacing > its radius, and the planted coordinate is the center
    base = rng.uniform(0.1, 0.4, 3)
    img = np.tile(base, (gh, gw, 1))
    pitch = max(cell + 1, 5)
    corners = []
    for r in range(2, gh - 1, pitch):
        for c in range(2, gw - 1, pitch):
            img[r, c] = rng.uniform(0.65, 0.95, 3)
            corners.append((float(r), float(c)))
    return img, corners


def _texture_patches(rng, gh, gw, cell):
    # sparse solid rectangles: every rect corner is an isolated L-junction
    base = rng.uniform(0.15, 0.4, 3)
    img = np.tile(base, (gh, gw, 1))
    corners = []
    macro = max(max(gh, gw) // 5, 9)
    for r0 in range(2, gh - 6, macro):
        for c0 in range(2, gw - 6, macro):
            rh = int(rng.integers(4, min(macro - 2, 7) + 1))
            rw = int(rng.integers(4, min(macro - 2, 7) + 1))
            r = min(r0 + int(rng.integers(0, 2)), gh - rh - 2)
            c = min(c0 + int(rng.integers(0, 2)), gw - rw - 2)
            img[r: r + rh, c: c + rw] = rng.uniform(0.55, 0.95, 3)
            for dr in (0, rh):
                for dc in (0, rw):
                    corners.append((r + dr - 0.5, c + dc - 0.5))
    return img, corners


_TEXTURES = {"plaid": _texture_plaid, "dots": _texture_dots, "patches": _texture_patches}


def _weave_field(rng, gh, gw, amp=0.22):
    """Smooth per-garment luminance modulation: gives local patches a
    distinctive identity for descriptor matching without adding corner
    responses (the field is band-limited well below the detector scale)."""
    noise = rng.normal(0.0, 1.0, (gh, gw))
    field = ndimage.gaussian_filter(noise, sigma=2.5, mode="reflect")
    peak = np.abs(field).max()
    return amp * field / (peak + 1e-9)


def generate_sample(seed: int, params: GeneratorParams = GeneratorParams()) -> Sample:
    """Deterministically build one paired try-on sample."""
    rng = np.random.default_rng(int(seed))
    ph, pw = params.person_hw
    gh, gw = params.garment_hw

    depth, (tc_r, tc_c, ta, tb), body = _body_depth(rng, ph, pw)
    normal = _normals_from_depth(depth)
    light = np.array([-0.35, 0.25, 0.9])
    light /= np.linalg.norm(light)
    lambert = np.clip((normal * light[:, None, None]).sum(axis=0), 0.0, 1.0)

    skin = rng.uniform(0.5, 0.8, 3)
    bg = 0.08
    person_u = np.full((3, ph, pw), bg)
    shade = 0.45 + 0.55 * lambert
    person_u = np.where(body, skin[:, None, None] * shade, person_u)

    family = FAMILIES[seed % len(FAMILIES)]
    tex_u, corner_list = _TEXTURES[family](rng, gh, gw, params.cell)
    tex_u = np.clip(tex_u + _weave_field(rng, gh, gw)[..., None], 0.02, 0.98)
    garment = (2.0 * np.moveaxis(tex_u, -1, 0) - 1.0).astype(np.float64)

    # garment placement: overhang the torso so scales stay near 1, which
    # keeps the point-projection vs backward-warp mismatch sub-pixel
    scale_r = (2.3 * ta) / gh * rng.uniform(0.96, 1.04)
    scale_c = (3.0 * tb) / gw * rng.uniform(0.96, 1.04)
    theta = rng.uniform(-0.08, 0.08)
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    A = R @ np.diag([scale_r, scale_c])
    centre_g = np.array([(gh - 1) / 2.0, (gw - 1) / 2.0])
    centre_t = np.array([tc_r, tc_c]) + rng.uniform(-1.0, 1.0, 2)
    b = centre_t - A @ centre_g
    gt_flow = make_smooth_flow(
        make_affine_flow(A, b, ph, pw), params.bend_amp, params.bend_freq,
        seed=int(rng.integers(0, 2 ** 31)),
    )

    warped = warp_image(garment, gt_flow)
    alpha = warp_image(np.ones((gh, gw)), gt_flow)
    garment_mask = alpha > 0.5
    person = 2.0 * person_u - 1.0
    person[:, garment_mask] = warped[:, garment_mask]
    person = np.clip(person, -1.0, 1.0)

    # agnostic region: generous torso box union the (dilated) coverage
    rr, cc = np.meshgrid(np.arange(ph), np.arange(pw), indexing="ij")
    torso_box = (
        (np.abs(rr - tc_r) <= ta * 1.05) & (np.abs(cc - tc_c) <= tb * 1.45)
    )
    agnostic_mask = torso_box | ndimage.binary_dilation(
        garment_mask, iterations=params.agnostic_dilation
    )
    agnostic = person.copy()
    agnostic[:, agnostic_mask] = 0.0

    planted = PointSet(
        np.unique(np.array(corner_list, dtype=np.float64), axis=0), frame=(gh, gw)
    )
    gt_points_g = farthest_point_sample(planted, params.num_points)
    gt_points_h = apply_flow_to_points(gt_points_g, gt_flow)

    return Sample(
        garment=garment.astype(np.float32),
        person=person.astype(np.float32),
        agnostic=agnostic.astype(np.float32),
        depth=depth[None].astype(np.float32),
        normal=normal.astype(np.float32),
        gt_flow=gt_flow,
        gt_points_g=gt_points_g,
        gt_points_h=gt_points_h,
        garment_mask=garment_mask,
        agnostic_mask=agnostic_mask,
        planted=planted,
        family=family,
        seed=int(seed),
    )


@dataclass
class SyntheticDataset:
    samples: list[Sample]
    seed0: int
    params: GeneratorParams

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def seed_range(self) -> range:
        return range(self.seed0, self.seed0 + len(self.samples))


def generate_split(n: int, seed0: int, params: GeneratorParams = GeneratorParams()) -> SyntheticDataset:
    """n samples with consecutive seeds seed0 .. seed0+n-1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return SyntheticDataset(
        samples=[generate_sample(s, params) for s in range(seed0, seed0 + n)],
        seed0=int(seed0),
        params=params,
    )


def ensure_disjoint(*splits: SyntheticDataset) -> None:
    """Reject overlapping seed ranges between dataset splits."""
    seen: set[int] = set()
    for ds in splits:
        rng = set(ds.seed_range)
        if seen & rng:
            raise ValueError(f"overlapping seed ranges: {sorted(seen & rng)[:5]} ...")
        seen |= rng


def make_train_test(
    n_train: int, n_test: int, params: GeneratorParams = GeneratorParams(),
    train_seed0: int = 0, test_seed0: int = 10_000,
) -> tuple[SyntheticDataset, SyntheticDataset]:
    train = generate_split(n_train, train_seed0, params)
    test = generate_split(n_test, test_seed0, params)
    ensure_disjoint(train, test)
    return train, test


def _points_to_arr(ps: PointSet) -> np.ndarray:
    return np.concatenate([ps.coords, [[float(ps.frame[0]), float(ps.frame[1])]]])


def _arr_to_points(arr: np.ndarray, unique: bool = True) -> PointSet:
    frame = (int(arr[-1, 0]), int(arr[-1, 1]))
    return PointSet(arr[:-1].astype(np.float64), frame=frame, unique=unique)


def save_dataset(ds: SyntheticDataset, out_dir: str | Path) -> None:
    """Persist a dataset as PNG images + raw tensors + JSON manifests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"n": len(ds), "seed0": ds.seed0, "params": asdict(ds.params)}
    (out / "manifest.json").write_text(json.dumps(meta, indent=2))
    for i, s in enumerate(ds.samples):
        d = out / f"sample_{i:05d}"
        d.mkdir(exist_ok=True)
        tensorio.save_image_png(d / "garment.png", s.garment)
        tensorio.save_image_png(d / "person.png", s.person)
        tensorio.save_image_png(d / "agnostic.png", s.agnostic)
        tensorio.save_image_png(d / "depth.png", s.depth)
        tensorio.save_image_png(d / "normal.png", s.normal)
        tensorio.save_image_png(d / "garment_mask.png", s.garment_mask.astype(np.float64) * 2 - 1)
        tensorio.save_image_png(d / "agnostic_mask.png", s.agnostic_mask.astype(np.float64) * 2 - 1)
        tensorio.save_tensor(d / "flow.bin", "flow", s.gt_flow.offsets)
        tensorio.save_checkpoint(
            d / "points.bin",
            {
                "points_g": _points_to_arr(s.gt_points_g),
                "points_h": _points_to_arr(s.gt_points_h),
                "planted": _points_to_arr(s.planted),
            },
        )
        (d / "meta.json").write_text(json.dumps({"seed": s.seed, "family": s.family}))


def load_dataset(in_dir: str | Path) -> SyntheticDataset:
    """Load a persisted dataset. Images come back 8-bit quantized; flows and
    point coordinates are float32-exact."""
    root = Path(in_dir)
    meta = json.loads((root / "manifest.json").read_text())
    p = meta["params"]
    params = GeneratorParams(
        person_hw=tuple(p["person_hw"]), garment_hw=tuple(p["garment_hw"]),
        cell=p["cell"], num_points=p["num_points"], bend_amp=p["bend_amp"],
        bend_freq=p["bend_freq"], agnostic_dilation=p["agnostic_dilation"],
    )
    samples = []
    for i in range(meta["n"]):
        d = root / f"sample_{i:05d}"
        sm = json.loads((d / "meta.json").read_text())
        pts = tensorio.load_checkpoint(d / "points.bin")
        samples.append(
            Sample(
                garment=tensorio.load_image_png(d / "garment.png"),
                person=tensorio.load_image_png(d / "person.png"),
                agnostic=tensorio.load_image_png(d / "agnostic.png"),
                depth=tensorio.load_image_png(d / "depth.png"),
                normal=tensorio.load_image_png(d / "normal.png"),
                gt_flow=DisplacementField(tensorio.load_tensor(d / "flow.bin")[1]),
                gt_points_g=_arr_to_points(pts["points_g"]),
                gt_points_h=_arr_to_points(pts["points_h"], unique=False),
                garment_mask=tensorio.load_image_png(d / "garment_mask.png")[0] > 0,
                agnostic_mask=tensorio.load_image_png(d / "agnostic_mask.png")[0] > 0,
                planted=_arr_to_points(pts["planted"]),
                family=sm["family"],
                seed=sm["seed"],
            )
        )
    return SyntheticDataset(samples=samples, seed0=meta["seed0"], params=params)
