"""Synthetic rectified stereo scenes with analytic disparity and labels.

Two pinhole cameras share focal length and principal point. The left camera
sits at the origin and the right camera at ``(-baseline, 0, 0)``, so a left
pixel at column ``u`` shows up in the right image at ``u + f*B/Z``. That is the
same convention ``geometry.warp_horizontal`` uses with ``direction=+1``.

Surfaces carry value-noise textures defined in world coordinates, so both
views see the same albedo at a given 3D point. Primitives are painted in list
order (far to near).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from depthreg.data import LabeledSample, StereoSample
from depthreg.types import ContractViolation

KINDS = ("fronto_plane", "slanted_plane", "sphere")

# base albedo per class, chosen to be distinguishable but not trivially so
CLASS_COLORS = np.array([
    [0.55, 0.35, 0.30],
    [0.85, 0.80, 0.70],
    [0.75, 0.60, 0.55],
    [0.90, 0.70, 0.60],
    [0.80, 0.50, 0.45],
])
LIGHT_DIR = np.array([0.35, 0.45, 1.0]) / np.linalg.norm([0.35, 0.45, 1.0])


@dataclass
class Primitive:
    """One textured surface.

    ``center`` is ``(X, Y, Z)`` in metres. For planes, ``extent`` holds the
    half-width/half-height in metres (``inf`` for unbounded) and ``slope`` the
    depth gradient ``(dZ/dX, dZ/dY)``. For spheres ``extent[0]`` is the radius.
    """

    kind: str
    center: tuple[float, float, float]
    extent: tuple[float, float] = (float("inf"), float("inf"))
    slope: tuple[float, float] = (0.0, 0.0)
    texture_seed: int = 0
    label: int = 0
    elliptic: bool = False


@dataclass
class SceneSpec:
    focal_px: float
    baseline_m: float
    image_size: tuple[int, int]
    primitives: list[Primitive] = field(default_factory=list)
    ambient: float = 0.35
    vignette: float = 0.0
    texture_scale_px: float = 10.0
    d_max: float = 0.3
    group: str = "scene0"

    def validate(self) -> None:
        h, w = self.image_size
        if self.focal_px <= 0 or self.baseline_m <= 0 or h < 2 or w < 2:
            raise ContractViolation("focal_px, baseline_m must be positive and image at least 2x2")
        depths = []
        for p in self.primitives:
            if p.kind not in KINDS:
                raise ContractViolation(f"unknown primitive kind {p.kind!r}")
            if not 0 <= p.label <= 4:
                raise ContractViolation(f"label {p.label} outside 0..4")
            if p.center[2] <= 0:
                raise ContractViolation("primitive behind the camera")
            depths.append(p.center[2])
        if any(b > a for a, b in zip(depths, depths[1:])):
            raise ContractViolation("primitives must be ordered far to near for painter's rendering")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["primitives"] = [Primitive(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})
                           for p in d["primitives"]]
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass
class SyntheticSample:
    stereo: StereoSample
    gt_disparity_left: np.ndarray   # (H, W), width units
    gt_disparity_right: np.ndarray
    mask_left: np.ndarray           # (H, W) int
    mask_right: np.ndarray
    valid_left: np.ndarray          # (H, W) bool, visible in the right view

    @property
    def labeled(self) -> LabeledSample:
        return LabeledSample(self.stereo.left, self.mask_left, self.stereo.scene_id, self.stereo.frame_index)


def _value_noise(seed: int, u: np.ndarray, v: np.ndarray, octaves: int = 3) -> np.ndarray:
    """Multi-octave bilinear value noise in [0, 1] at lattice coordinates (u, v)."""
    rng = np.random.default_rng(seed)
    out = np.zeros_like(u)
    total = 0.0
    amp, freq = 1.0, 1.0
    for _ in range(octaves):
        size = 64
        lattice = rng.random((size, size))
        x = (u * freq) % (size - 1)
        y = (v * freq) % (size - 1)
        out += amp * ndimage.map_coordinates(lattice, [y.ravel(), x.ravel()], order=1, mode="wrap").reshape(u.shape)
        total += amp
        amp *= 0.5
        freq *= 2.0
    return out / total


def _intersect(p: Primitive, ox: float, rx: np.ndarray, ry: np.ndarray):
    """Depth Z of the ray ``(ox, 0, 0) + Z * (rx, ry, 1)`` hitting ``p``; NaN on miss."""
    cx, cy, cz = p.center
    if p.kind == "sphere":
        r = p.extent[0]
        # |o + t d - c|^2 = r^2 with d = (rx, ry, 1)
        ocx, ocy, ocz = ox - cx, -cy, -cz
        a = rx ** 2 + ry ** 2 + 1.0
        b = 2 * (rx * ocx + ry * ocy + ocz)
        c = ocx ** 2 + ocy ** 2 + ocz ** 2 - r ** 2
        disc = b ** 2 - 4 * a * c
        with np.errstate(invalid="ignore"):
            z = (-b - np.sqrt(disc)) / (2 * a)
        z[disc < 0] = np.nan
        z[z <= 0] = np.nan
        return z
    a, b = p.slope if p.kind == "slanted_plane" else (0.0, 0.0)
    denom = 1.0 - a * rx - b * ry
    z = (cz + a * (ox - cx) - b * cy) / denom
    X, Y = ox + z * rx, z * ry
    hx, hy = p.extent
    if p.elliptic:
        inside = ((X - cx) / hx) ** 2 + ((Y - cy) / hy) ** 2 <= 1.0
    else:
        inside = (np.abs(X - cx) <= hx) & (np.abs(Y - cy) <= hy)
    z = np.where(inside & (z > 0), z, np.nan)
    return z


def _shade(p: Primitive, X, Y, Z, spec: SceneSpec) -> np.ndarray:
    if p.kind == "sphere":
        n = np.stack([X - p.center[0], Y - p.center[1], Z - p.center[2]], -1) / p.extent[0]
    else:
        a, b = p.slope if p.kind == "slanted_plane" else (0.0, 0.0)
        n = np.broadcast_to(np.array([a, b, -1.0]) / np.sqrt(a * a + b * b + 1.0), X.shape + (3,))
    lam = np.clip(-(n @ LIGHT_DIR), 0.0, 1.0)
    return spec.ambient + (1.0 - spec.ambient) * lam


def _render_view(spec: SceneSpec, cam_x: float):
    h, w = spec.image_size
    f = spec.focal_px
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    rx = (uu - (w - 1) / 2.0) / f
    ry = (vv - (h - 1) / 2.0) / f
    depth = np.full((h, w), np.nan)
    ids = np.full((h, w), -1, dtype=np.int64)
    for k, p in enumerate(spec.primitives):
        z = _intersect(p, cam_x, rx, ry)
        hit = np.isfinite(z)
        depth[hit] = z[hit]
        ids[hit] = k
    if np.isnan(depth).any():
        raise ContractViolation("scene does not cover every pixel; add an unbounded background plane")

    X, Y = cam_x + depth * rx, depth * ry
    img = np.zeros((h, w, 3))
    labels = np.zeros((h, w), dtype=np.int64)
    # texture lattice spacing scales with depth so features stay a few pixels wide
    metres_per_cell = spec.texture_scale_px / f
    for k, p in enumerate(spec.primitives):
        m = ids == k
        if not m.any():
            continue
        tex = _value_noise(p.texture_seed, X[m] / metres_per_cell + 17.0, Y[m] / metres_per_cell + 17.0)
        shade = _shade(p, X[m], Y[m], depth[m], spec)
        albedo = CLASS_COLORS[p.label] * (0.35 + 0.65 * tex)[:, None]
        img[m] = albedo * shade[:, None]
        labels[m] = p.label
    if spec.vignette:
        r2 = (rx ** 2 + ry ** 2) / (rx ** 2 + ry ** 2).max()
        img *= (1.0 - spec.vignette * r2)[..., None]
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img.astype(np.float32), depth, ids, labels


def _visible_in_other(depth_a, ids_a, depth_b, ids_b, shift_px):
    """Pixels of view A whose match at ``u + shift`` in view B is the same surface point."""
    h, w = depth_a.shape
    u = np.arange(w)[None, :] + shift_px
    inside = (u >= 0) & (u <= w - 1)
    uc = np.clip(u, 0, w - 1)
    u0 = np.clip(np.floor(uc).astype(int), 0, max(w - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    t = uc - u0
    rows = np.arange(h)[:, None]
    zb = (1 - t) * depth_b[rows, u0] + t * depth_b[rows, u1]
    same = (ids_b[rows, u0] == ids_a) & (ids_b[rows, u1] == ids_a)
    return inside & same & (np.abs(zb - depth_a) <= 0.01 * depth_a)


def render(spec: SceneSpec, seed: int = 0, frame_index: int = 0) -> SyntheticSample:
    """Render a stereo pair with ground-truth disparity, labels and visibility.

    ``seed`` only perturbs texture seeds, so ``(spec, seed)`` fixes the output.
    """
    spec.validate()
    if seed:
        spec = SceneSpec(**{**spec.__dict__, "primitives": [
            Primitive(**{**p.__dict__, "texture_seed": p.texture_seed + 7919 * seed}) for p in spec.primitives]})
    h, w = spec.image_size
    left, zl, idl, labl = _render_view(spec, 0.0)
    right, zr, idr, labr = _render_view(spec, -spec.baseline_m)
    disp_l_px = spec.focal_px * spec.baseline_m / zl
    disp_r_px = spec.focal_px * spec.baseline_m / zr
    if max(disp_l_px.max(), disp_r_px.max()) > spec.d_max * w:
        raise ContractViolation(
            f"max disparity {max(disp_l_px.max(), disp_r_px.max()):.2f}px exceeds d_max*W = {spec.d_max * w:.2f}px")
    valid = _visible_in_other(zl, idl, zr, idr, disp_l_px)
    stereo = StereoSample(left=left, right=right, scene_id=spec.group, frame_index=frame_index)
    return SyntheticSample(
        stereo=stereo,
        gt_disparity_left=(disp_l_px / w).astype(np.float32),
        gt_disparity_right=(disp_r_px / w).astype(np.float32),
        mask_left=labl,
        mask_right=labr,
        valid_left=valid,
    )


def random_scene(rng: np.random.Generator, image_size=(64, 64), group: str = "scene0",
                 focal_scale: float = 0.9, baseline_m: float = 0.1) -> SceneSpec:
    """A knee-like layout whose classes occupy characteristic depth bands.

    Background is a far slanted plane; tibia a mid-depth floor; meniscus a
    small near ellipse on the floor; femur a sphere above it; the ACL a thin
    vertical strip between. Every structure appears with fixed probability.
    """
    h, w = image_size
    f = focal_scale * w

    def xy(u, v, z):
        return ((u - (w - 1) / 2) * z / f, (v - (h - 1) / 2) * z / f)

    prims = []
    zb = rng.uniform(1.8, 2.2)
    prims.append(Primitive("slanted_plane", (0.0, 0.0, zb), slope=(rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.0)),
                           texture_seed=int(rng.integers(1 << 30)), label=0))
    if rng.random() < 0.8:
        z = rng.uniform(1.3, 1.5)
        X, Y = xy(rng.uniform(0.3, 0.7) * w, rng.uniform(0.75, 0.85) * h, z)
        prims.append(Primitive("slanted_plane", (X, Y, z), extent=(rng.uniform(0.25, 0.4) * w * z / f, 0.25 * h * z / f),
                               slope=(0.0, -0.8), texture_seed=int(rng.integers(1 << 30)), label=2))
    if rng.random() < 0.6:
        z = rng.uniform(1.05, 1.2)
        X, Y = xy(rng.uniform(0.35, 0.65) * w, rng.uniform(0.2, 0.6) * h, z)
        prims.append(Primitive("fronto_plane", (X, Y, z), extent=(0.04 * w * z / f, rng.uniform(0.18, 0.3) * h * z / f),
                               texture_seed=int(rng.integers(1 << 30)), label=4))
    if rng.random() < 0.8:
        z = rng.uniform(0.95, 1.05)
        r = rng.uniform(0.16, 0.24) * w * z / f
        X, Y = xy(rng.uniform(0.25, 0.75) * w, rng.uniform(0.2, 0.4) * h, z)
        prims.append(Primitive("sphere", (X, Y, z + r), extent=(r, r), texture_seed=int(rng.integers(1 << 30)), label=1))
        # sphere's reference depth is its centre; keep painter's order by sorting below
    if rng.random() < 0.7:
        z = rng.uniform(0.7, 0.85)
        X, Y = xy(rng.uniform(0.3, 0.7) * w, rng.uniform(0.65, 0.85) * h, z)
        prims.append(Primitive("fronto_plane", (X, Y, z), extent=(rng.uniform(0.1, 0.16) * w * z / f, 0.06 * h * z / f),
                               texture_seed=int(rng.integers(1 << 30)), label=3, elliptic=True))
    prims.sort(key=lambda p: -p.center[2])
    return SceneSpec(focal_px=f, baseline_m=baseline_m, image_size=(h, w), primitives=prims, group=group)


def degrade(sample: SyntheticSample, kind: str, rng: np.random.Generator) -> SyntheticSample:
    """Label-preserving corruption applied identically to both views."""
    def op(img):
        if kind == "overexposure":
            out = img * rng_gain
        elif kind == "blur":
            out = ndimage.gaussian_filter(img, sigma=(1.2, 1.2, 0))
        elif kind == "low_texture":
            mean = ndimage.uniform_filter(img, size=(9, 9, 1))
            out = mean + 0.3 * (img - mean)
        else:
            raise ContractViolation(f"unknown degradation {kind!r}")
        return (np.round(np.clip(out, 0, 1) * 255) / 255).astype(np.float32)

    rng_gain = rng.uniform(1.5, 2.0)
    st = sample.stereo
    stereo = StereoSample(op(st.left), op(st.right), st.scene_id, st.frame_index)
    return SyntheticSample(stereo, sample.gt_disparity_left, sample.gt_disparity_right,
                           sample.mask_left, sample.mask_right, sample.valid_left)


DEGRADATIONS = ("overexposure", "blur", "low_texture")


def write_gt_disparity(path: Path, disp: np.ndarray) -> None:
    """Flat little-endian file: int32 H, int32 W, then float32 row-major."""
    h, w = disp.shape
    with open(path, "wb") as fh:
        fh.write(np.array([h, w], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(disp, dtype="<f4").tobytes())


def read_gt_disparity(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    h, w = np.frombuffer(raw[:8], dtype="<i4")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(int(h), int(w)).copy()


def emit_dataset(specs: list[SceneSpec], root, split_fractions=(0.8, 0.2), seed: int = 0,
                 degrade_suite: bool = False):
    """Render ``specs`` and write them in the on-disk dataset layout.

    Returns the loaded manifest. With ``degrade_suite`` every scene is also
    written in a corrupted copy (same ground truth) cycling through
    ``DEGRADATIONS``; copies share the split of their source scene.
    """
    from depthreg import data

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    n = len(specs)
    names = ("train", "test") if len(split_fractions) == 2 else ("train", "val", "test")
    counts = [int(round(fr * n)) for fr in split_fractions]
    counts[0] = n - sum(counts[1:])
    order = np.random.default_rng(seed).permutation(n)
    split_of = {}
    pos = 0
    for name, cnt in zip(names, counts):
        for idx in order[pos:pos + cnt]:
            split_of[int(idx)] = name
        pos += cnt

    frame_counter: dict[str, int] = {}
    records = []
    for i, spec in enumerate(specs):
        frame = frame_counter.get(spec.group, 0)
        frame_counter[spec.group] = frame + 1
        sample = render(spec, seed=0, frame_index=frame)
        variants = [("", sample)]
        if degrade_suite:
            kind = DEGRADATIONS[i % len(DEGRADATIONS)]
            variants.append((f"_{kind}", degrade(sample, kind, np.random.default_rng([seed, i]))))
        for suffix, s in variants:
            stem = f"{frame:05d}{suffix}"
            records.extend(data.write_sample(root, s, stem, split_of[i]))
    manifest = data.write_manifest(root, records)
    (root / "scenes.json").write_text(json.dumps([s.to_dict() for s in specs]))
    return manifest
