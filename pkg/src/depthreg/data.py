"""Dataset records, on-disk layout, preprocessing and augmentation.

Layout under a dataset root::

    stereo/<scene_id>/<frame>_L.png, <frame>_R.png      8-bit RGB
    stereo/<scene_id>/<frame>_gtdisp.bin, _valid.png    synthetic only, evaluation side-cars
    seg/<knee_id>/<frame>.png, <frame>_mask.png         RGB image, 8-bit labels 0..4
    manifest.json

Images are ``(H, W, C)`` float32 arrays in ``[0, 1]``; masks ``(H, W)`` ints.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from depthreg.types import CLASS_NAMES, FOREGROUND_CLASSES, NUM_CLASSES, ContractViolation

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    scene_id: str = ""
    frame_index: int = 0

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ContractViolation(f"left/right shapes differ: {self.left.shape} vs {self.right.shape}")


@dataclass
class LabeledSample:
    image: np.ndarray
    mask: np.ndarray
    knee_id: str = ""
    frame_index: int = 0

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ContractViolation(f"image {self.image.shape} and mask {self.mask.shape} disagree")


class DatasetError(Exception):
    """Raised with every problem found while loading a dataset."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__(f"{len(problems)} dataset problem(s):\n" + "\n".join(f"  - {p}" for p in problems))


# --------------------------------------------------------------------------- preprocessing

def _resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=True)
    return t[0].permute(1, 2, 0).numpy()


def preprocess_raw(image: np.ndarray, source_kind: str) -> np.ndarray:
    """Bring a raw frame to 384x384.

    ``endoscope_1280x720`` frames are centre-cropped to 720x720 and resized;
    ``stereo_384`` frames pass through.
    """
    if source_kind == "endoscope_1280x720":
        if image.shape[:2] != (720, 1280):
            raise ContractViolation(f"endoscope frame must be 720x1280, got {image.shape}")
        x0 = (1280 - 720) // 2
        out = _resize(image[:, x0:x0 + 720], (384, 384))
    elif source_kind == "stereo_384":
        if image.shape[:2] != (384, 384):
            raise ContractViolation(f"stereo frame must be 384x384, got {image.shape}")
        out = image
    else:
        raise ContractViolation(f"unknown source kind {source_kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------- augmentation

@dataclass
class DepthAugParams:
    gamma: float = 1.0
    brightness: float = 1.0
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    hflip: bool = False
    vflip: bool = False


@dataclass
class SegAugConfig:
    elastic_prob: float = 0.5
    elastic_spacing: float = 64.0
    elastic_amplitude: float = 10.0
    elastic_sigma: float = 8.0
    brightness: float = 0.2
    contrast: float = 0.2


@dataclass
class SegAugParams:
    hflip: bool = False
    vflip: bool = False
    brightness: float = 0.0
    contrast: float = 1.0
    displacement: np.ndarray | None = None  # (2, H, W) row/col offsets in pixels


def sample_depth_params(rng: np.random.Generator) -> DepthAugParams:
    return DepthAugParams(
        gamma=rng.uniform(0.8, 1.2),
        brightness=rng.uniform(0.5, 2.0),
        color=tuple(rng.uniform(0.8, 1.2, size=3)),
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
    )


def apply_depth_aug(sample: StereoSample, p: DepthAugParams) -> StereoSample:
    def photometric(img):
        out = img ** p.gamma * p.brightness * np.asarray(p.color, dtype=np.float64)[: img.shape[2]]
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    left, right = photometric(sample.left), photometric(sample.right)
    if p.hflip:
        # mirrored left view becomes the right view of the mirrored scene
        left, right = right[:, ::-1], left[:, ::-1]
    if p.vflip:
        left, right = left[::-1], right[::-1]
    return StereoSample(np.ascontiguousarray(left), np.ascontiguousarray(right), sample.scene_id, sample.frame_index)


def augment_depth(sample: StereoSample, rng: np.random.Generator) -> StereoSample:
    return apply_depth_aug(sample, sample_depth_params(rng))


def elastic_field(rng: np.random.Generator, shape: tuple[int, int], cfg: SegAugConfig) -> np.ndarray:
    """Smooth random displacement: coarse uniform grid, cubic upsampling, Gaussian blur."""
    h, w = shape
    gh = int(np.ceil(h / cfg.elastic_spacing)) + 1
    gw = int(np.ceil(w / cfg.elastic_spacing)) + 1
    coarse = rng.uniform(-cfg.elastic_amplitude, cfg.elastic_amplitude, size=(2, gh, gw))
    out = np.empty((2, h, w))
    for k in range(2):
        fine = ndimage.zoom(coarse[k], (h / gh, w / gw), order=3, mode="nearest")[:h, :w]
        out[k] = ndimage.gaussian_filter(fine, cfg.elastic_sigma, mode="nearest")
    return out


def sample_seg_params(rng: np.random.Generator, shape: tuple[int, int], cfg: SegAugConfig | None = None) -> SegAugParams:
    cfg = cfg or SegAugConfig()
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    brightness = rng.uniform(-cfg.brightness, cfg.brightness)
    contrast = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    disp = elastic_field(rng, shape, cfg) if rng.random() < cfg.elastic_prob else None
    return SegAugParams(hflip, vflip, brightness, contrast, disp)


def warp_array(arr: np.ndarray, p: SegAugParams, order: int) -> np.ndarray:
    """Apply the geometric part of ``p`` (elastic, then flips) to an ``(H, W[, C])`` array."""
    out = arr
    if p.displacement is not None:
        h, w = arr.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        coords = [yy + p.displacement[0], xx + p.displacement[1]]
        if arr.ndim == 2:
            out = ndimage.map_coordinates(arr, coords, order=order, mode="reflect")
        else:
            out = np.stack([ndimage.map_coordinates(arr[..., c], coords, order=order, mode="reflect")
                            for c in range(arr.shape[2])], axis=-1)
    if p.hflip:
        out = out[:, ::-1]
    if p.vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def apply_seg_aug(sample: LabeledSample, p: SegAugParams) -> LabeledSample:
    image = warp_array(sample.image, p, order=1)
    mask = warp_array(sample.mask, p, order=0).astype(sample.mask.dtype)
    image = np.clip(p.contrast * image + p.brightness, 0.0, 1.0).astype(np.float32)
    return LabeledSample(image, mask, sample.knee_id, sample.frame_index)


def augment_seg(sample: LabeledSample, rng: np.random.Generator, cfg: SegAugConfig | None = None) -> LabeledSample:
    return apply_seg_aug(sample, sample_seg_params(rng, sample.mask.shape, cfg))


# --------------------------------------------------------------------------- files

def save_png(path: Path, arr: np.ndarray) -> None:
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValueError(f"mask must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_sample(root: Path, sample, stem: str, split: str) -> list[dict]:
    """Write a synthetic sample as one stereo record and one seg record."""
    from depthreg.synthgen import write_gt_disparity

    st = sample.stereo
    group = st.scene_id
    sdir, gdir = root / "stereo" / group, root / "seg" / group
    sdir.mkdir(parents=True, exist_ok=True)
    gdir.mkdir(parents=True, exist_ok=True)
    files_s = {"left": f"stereo/{group}/{stem}_L.png", "right": f"stereo/{group}/{stem}_R.png",
               "gtdisp": f"stereo/{group}/{stem}_gtdisp.bin", "valid": f"stereo/{group}/{stem}_valid.png"}
    save_png(root / files_s["left"], st.left)
    save_png(root / files_s["right"], st.right)
    write_gt_disparity(root / files_s["gtdisp"], sample.gt_disparity_left)
    save_png(root / files_s["valid"], sample.valid_left.astype(np.uint8))
    files_g = {"image": f"seg/{group}/{stem}.png", "mask": f"seg/{group}/{stem}_mask.png"}
    save_png(root / files_g["image"], st.left)
    save_png(root / files_g["mask"], sample.mask_left.astype(np.uint8))
    out = []
    for kind, files in (("stereo", files_s), ("seg", files_g)):
        out.append({"kind": kind, "id": f"{kind}/{group}/{stem}", "group": group, "frame": st.frame_index,
                    "split": split, "files": files,
                    "sha256": {k: _sha256(root / v) for k, v in files.items()}})
    return out


def write_manifest(root, records: list[dict]) -> "DatasetManifest":
    root = Path(root)
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps({"version": MANIFEST_VERSION, "records": records}, indent=1))
    os.replace(tmp, root / MANIFEST_NAME)
    return load_manifest(root)


# --------------------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    root: Path
    records: list[dict]
    class_presence_stats: dict[str, dict[str, float]] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def select(self, kind: str, split: str | None = None, groups=None, exclude_groups=None) -> list[dict]:
        out = [r for r in self.records if r["kind"] == kind]
        if split is not None:
            out = [r for r in out if r["split"] == split]
        if groups is not None:
            out = [r for r in out if r["group"] in set(groups)]
        if exclude_groups is not None:
            out = [r for r in out if r["group"] not in set(exclude_groups)]
        return out

    @property
    def groups(self) -> list[str]:
        return sorted({r["group"] for r in self.records})

    def read(self, rel: str, kind: str = "image") -> np.ndarray:
        key = (rel, kind)
        if key not in self._cache:
            path = self.root / rel
            self._cache[key] = load_mask(path) if kind == "mask" else load_image(path)
        return self._cache[key]

    def stereo_sample(self, rec: dict) -> StereoSample:
        f = rec["files"]
        return StereoSample(self.read(f["left"]), self.read(f["right"]), rec["group"], rec["frame"])

    def labeled_sample(self, rec: dict) -> LabeledSample:
        f = rec["files"]
        return LabeledSample(self.read(f["image"]), self.read(f["mask"], "mask"), rec["group"], rec["frame"])


def load_manifest(root, verify_checksums: bool = True) -> DatasetManifest:
    """Validate a dataset root and compute per-group class presence.

    Every problem (missing file, checksum mismatch, undecodable image, label
    outside 0..4, image/mask size disagreement) is collected and raised
    together as a :class:`DatasetError`.
    """
    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise DatasetError([f"missing {mpath}"])
    try:
        doc = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError([f"corrupt manifest: {exc}"]) from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetError([f"unsupported manifest version {doc.get('version')!r}"])

    problems: list[str] = []
    manifest = DatasetManifest(root=root, records=doc["records"])
    presence: dict[str, list[np.ndarray]] = {}
    for rec in manifest.records:
        for key, rel in rec["files"].items():
            path = root / rel
            if not path.exists():
                problems.append(f"{rec['id']}: missing {key} file {rel}")
                continue
            if verify_checksums and key in rec.get("sha256", {}) and _sha256(path) != rec["sha256"][key]:
                problems.append(f"{rec['id']}: checksum mismatch for {rel}")
        if any(not (root / rel).exists() for rel in rec["files"].values()):
            continue
        try:
            if rec["kind"] == "stereo":
                s = manifest.stereo_sample(rec)
                if s.left.shape[2] != 3:
                    problems.append(f"{rec['id']}: stereo image must be RGB")
            elif rec["kind"] == "seg":
                s = manifest.labeled_sample(rec)
                if s.mask.min() < 0 or s.mask.max() >= NUM_CLASSES:
                    problems.append(f"{rec['id']}: mask values outside 0..{NUM_CLASSES - 1} "
                                    f"(found {int(s.mask.min())}..{int(s.mask.max())})")
                    continue
                present = np.bincount(s.mask.ravel(), minlength=NUM_CLASSES) > 0
                presence.setdefault(rec["group"], []).append(present)
            else:
                problems.append(f"{rec['id']}: unknown record kind {rec['kind']!r}")
        except ContractViolation as exc:
            problems.append(f"{rec['id']}: {exc}")
        except (OSError, ValueError) as exc:
            problems.append(f"{rec['id']}: cannot decode ({exc})")
    if problems:
        raise DatasetError(problems)
    manifest.class_presence_stats = {
        g: {CLASS_NAMES[c]: float(np.mean([p[c] for p in ps])) for c in FOREGROUND_CLASSES}
        for g, ps in sorted(presence.items())
    }
    return manifest


# --------------------------------------------------------------------------- batching

def to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def make_batch(manifest: DatasetManifest, kind: str, records: list[dict], chunk, seed: int, epoch: int,
               augment: Callable | None = None, pool: ThreadPoolExecutor | None = None) -> dict:
    """Load (and optionally augment) ``records[chunk]`` into one batch dict."""

    def prepare(idx):
        rec = records[idx]
        sample = manifest.stereo_sample(rec) if kind == "stereo" else manifest.labeled_sample(rec)
        if augment is not None:
            sample = augment(sample, np.random.default_rng([seed, epoch, int(idx)]))
        return rec["id"], sample

    items = list(pool.map(prepare, chunk)) if pool else [prepare(i) for i in chunk]
    ids = [i for i, _ in items]
    if kind == "stereo":
        return {"ids": ids,
                "left": torch.stack([to_tensor(s.left) for _, s in items]),
                "right": torch.stack([to_tensor(s.right) for _, s in items])}
    return {"ids": ids,
            "image": torch.stack([to_tensor(s.image) for _, s in items]),
            "mask": torch.stack([torch.from_numpy(np.ascontiguousarray(s.mask)).long() for _, s in items])}


def iterate(manifest: DatasetManifest, kind: str, split: str | None, batch_size: int, seed: int,
            epoch: int = 0, augment: Callable | None = None, num_workers: int = 0,
            groups=None, exclude_groups=None) -> Iterator[dict]:
    """Yield shuffled batches of ``kind`` records.

    The order depends only on ``(seed, epoch)``; each sample's augmentation
    RNG is keyed by ``(seed, epoch, record index)``, so the worker count does
    not change what is produced.
    """
    records = manifest.select(kind, split, groups, exclude_groups)
    if not records:
        raise DatasetError([f"no {kind} records for split={split!r} groups={groups!r}"])
    pool = ThreadPoolExecutor(num_workers) if num_workers > 0 else None
    try:
        for chunk in batch_order(len(records), batch_size, seed, epoch):
            yield make_batch(manifest, kind, records, chunk, seed, epoch, augment, pool)
    finally:
        if pool:
            pool.shutdown()
