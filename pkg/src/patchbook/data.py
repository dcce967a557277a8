"""Synthetic face data, face alignment/crop/pad, and JSON-lines dataset manifests."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import cv2
import numpy as np
import torch
from PIL import Image
from skimage.transform import SimilarityTransform

CLASS_NAMES = ("background", "skin", "left_eye", "right_eye", "nose", "mouth", "hair")
NUM_CLASSES = len(CLASS_NAMES)
LANDMARK_NAMES = (
    "left_eye_outer", "left_eye_inner", "right_eye_inner", "right_eye_outer",
    "left_eye_center", "right_eye_center", "nose_tip", "mouth_left", "mouth_right", "chin",
)
NUM_LANDMARKS = len(LANDMARK_NAMES)
EYE_CENTERS = (4, 5)
FIVE_POINT_INDICES = (4, 5, 6, 7, 8)  # eye centers, nose tip, mouth corners


class DataError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class FaceSample:
    image: np.ndarray  # float32 [H, W, C] in [0, 1]
    seg_mask: Optional[np.ndarray] = None  # int64 [H, W]
    landmarks: Optional[np.ndarray] = None  # float64 [L, 2] as (x, y) pixels

    def validate(self, require_labels: bool = False) -> None:
        img = self.image
        if img.ndim != 3 or img.shape[2] not in (1, 3):
            raise DataError(f"image must be [H, W, 1|3], got {img.shape}")
        if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
            raise DataError("image values must lie in [0, 1]")
        h, w = img.shape[:2]
        if self.seg_mask is not None:
            if self.seg_mask.shape != (h, w):
                raise DataError(f"seg mask {self.seg_mask.shape} does not match image {h}x{w}")
            if self.seg_mask.min() < 0 or self.seg_mask.max() >= NUM_CLASSES:
                raise DataError("seg mask class id out of range")
        if self.landmarks is not None:
            lm = self.landmarks
            if lm.ndim != 2 or lm.shape[1] != 2:
                raise DataError(f"landmarks must be [L, 2], got {lm.shape}")
            if (lm[:, 0] < 0).any() or (lm[:, 0] > w - 1).any() or (lm[:, 1] < 0).any() or (lm[:, 1] > h - 1).any():
                raise DataError("landmark outside image bounds")
        if require_labels:
            if self.seg_mask is None or self.landmarks is None:
                raise DataError("sample is missing labels")
            present = set(np.unique(self.seg_mask).tolist())
            missing = set(range(1, NUM_CLASSES)) - present
            if missing:
                raise DataError(f"classes {sorted(missing)} absent from seg mask")
            if self.landmarks.shape[0] != NUM_LANDMARKS:
                raise DataError(f"expected {NUM_LANDMARKS} landmarks")


# --------------------------------------------------------------------------
# procedural faces

def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _ellipse(qx, qy, cx, cy, ax, ay):
    return ((qx - cx) / ax) ** 2 + ((qy - cy) / ay) ** 2 <= 1.0


def _triangle(qx, qy, verts):
    (x1, y1), (x2, y2), (x3, y3) = verts
    d1 = (qx - x2) * (y1 - y2) - (x1 - x2) * (qy - y2)
    d2 = (qx - x3) * (y2 - y3) - (x2 - x3) * (qy - y3)
    d3 = (qx - x1) * (y3 - y1) - (x3 - x1) * (qy - y1)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def render_face(rng: np.random.Generator, image_size: int = 64, channels: int = 3,
                noise: float = 0.02, lighting: float = 0.0) -> FaceSample:
    """Draw one face: hair band, skin ellipse, two eyes, nose triangle, mouth.

    Geometry is jittered around a fixed canonical layout so that components stay in
    similar regions across samples, as in aligned face crops.
    """
    S = float(image_size)
    center = np.array([0.5, 0.5]) * S + np.clip(rng.normal(0, 0.03, 2), -0.06, 0.06) * S
    scale = rng.uniform(0.85, 1.1)
    theta = np.deg2rad(rng.uniform(-15, 15))
    a, b = 0.27 * scale * S, 0.34 * scale * S
    R = _rot(theta)

    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    # pixel -> face-local frame
    dx, dy = xs - center[0], ys - center[1]
    qx = R[0, 0] * dx + R[1, 0] * dy
    qy = R[0, 1] * dx + R[1, 1] * dy

    def to_image(px, py):
        return center + R @ np.array([px, py])

    eye_dx = 0.38 * a * rng.uniform(0.92, 1.08)
    eye_y = -0.22 * b
    eye_ax, eye_ay = 0.2 * a, 0.1 * b
    nose_tip_y = 0.22 * b
    nose_w = 0.13 * a
    mouth_y = 0.5 * b * rng.uniform(0.95, 1.05)
    mouth_ax, mouth_ay = 0.32 * a * rng.uniform(0.85, 1.15), 0.08 * b

    regions = [
        (6, _ellipse(qx, qy, 0, -0.25 * b, 1.12 * a, 0.9 * b)),
        (1, _ellipse(qx, qy, 0, 0, a, b)),
        (2, _ellipse(qx, qy, -eye_dx, eye_y, eye_ax, eye_ay)),
        (3, _ellipse(qx, qy, eye_dx, eye_y, eye_ax, eye_ay)),
        (4, _triangle(qx, qy, [(0, -0.05 * b), (-nose_w, nose_tip_y), (nose_w, nose_tip_y)])),
        (5, _ellipse(qx, qy, 0, mouth_y, mouth_ax, mouth_ay)),
    ]
    seg = np.zeros((image_size, image_size), dtype=np.int64)
    for cls, region in regions:
        seg[region] = cls

    landmarks = np.array([
        to_image(-eye_dx - eye_ax, eye_y), to_image(-eye_dx + eye_ax, eye_y),
        to_image(eye_dx - eye_ax, eye_y), to_image(eye_dx + eye_ax, eye_y),
        to_image(-eye_dx, eye_y), to_image(eye_dx, eye_y),
        to_image(0, nose_tip_y),
        to_image(-mouth_ax, mouth_y), to_image(mouth_ax, mouth_y),
        to_image(0, b),
    ])
    landmarks = np.clip(landmarks, 0, S - 1)

    # tiny components can vanish at low resolution; keep at least the pixel under their landmark
    anchors = {2: 4, 3: 5, 4: 6, 5: 7}
    for cls, lm_idx in anchors.items():
        if not (seg == cls).any():
            x, y = np.round(landmarks[lm_idx]).astype(int)
            seg[y, x] = cls

    skin = rng.uniform([0.55, 0.4, 0.3], [0.95, 0.8, 0.7])
    palette = np.stack([
        rng.uniform(0.0, 1.0, 3),  # background
        skin,
        rng.uniform(0.0, 0.25, 3),  # eyes
        rng.uniform(0.0, 0.25, 3),
        skin * rng.uniform(0.7, 0.85),  # nose
        np.array([rng.uniform(0.55, 0.9), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.35)]),  # mouth
        rng.uniform(0.05, 0.45, 3) * rng.uniform(0.3, 1.0),  # hair
    ])
    palette[3] = palette[2]
    image = palette[seg]
    if lighting:
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        ramp = ((xs - S / 2) * direction[0] + (ys - S / 2) * direction[1]) / S
        image = image * (1.0 + lighting * rng.uniform(0.5, 1.0) * 2 * ramp)[..., None]
    image = image + rng.normal(0, noise, (image_size, image_size, 3))
    image = np.clip(image, 0.0, 1.0)
    if channels == 1:
        image = image.mean(axis=2, keepdims=True)
    return FaceSample(image.astype(np.float32), seg, landmarks)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_synthetic(count: int, seed: int = 0, image_size: int = 64, channels: int = 3,
                       start: int = 0, noise: float = 0.02, lighting: float = 0.0) -> list[FaceSample]:
    """``count`` procedural faces; sample ``i`` depends only on ``(seed, start + i)``."""
    if count <= 0:
        raise ValueError("count must be positive")
    return [render_face(sample_rng(seed, start + i), image_size, channels, noise, lighting)
            for i in range(count)]


def stack_images(samples: Sequence[FaceSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]))


# --------------------------------------------------------------------------
# alignment

# Five-point face template (eye centers, nose tip, mouth corners) in a 200x200 crop,
# approximating the FFHQ alignment layout.
FFHQ_TEMPLATE_200 = np.array([
    [75.4, 93.8],
    [124.6, 93.8],
    [100.0, 117.0],
    [80.0, 137.0],
    [120.0, 137.0],
])


@dataclass
class AlignTemplate:
    points: np.ndarray = field(default_factory=lambda: FFHQ_TEMPLATE_200.copy())
    crop_size: int = 200
    pad_size: int = 256
    background: float = 0.5

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (5, 2):
            raise AlignmentError("template needs 5 points")
        if (self.points < 0).any() or (self.points > self.crop_size - 1).any():
            raise AlignmentError("template points outside the crop frame")
        if self.pad_size < self.crop_size:
            raise AlignmentError("pad_size must be at least crop_size")

    @classmethod
    def from_json(cls, path) -> "AlignTemplate":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        d = asdict(self)
        d["points"] = self.points.tolist()
        return json.dumps(d)


def estimate_similarity(src: np.ndarray, dst: np.ndarray, collinear_tol: float = 1e-3) -> np.ndarray:
    """Least-squares rotation + uniform scale + translation mapping ``src`` onto ``dst``; 3x3 matrix."""
    src = np.asarray(src, dtype=np.float64)
    if src.shape != (5, 2) or not np.isfinite(src).all():
        raise AlignmentError(f"expected 5 finite (x, y) landmarks, got shape {src.shape}")
    sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if sv[0] == 0 or sv[1] / sv[0] < collinear_tol:
        raise AlignmentError("landmarks are degenerate (collinear or coincident)")
    tform = SimilarityTransform()
    if not tform.estimate(src, np.asarray(dst, dtype=np.float64)):
        raise AlignmentError("similarity estimation failed")
    return tform.params


def align_crop_pad(image: np.ndarray, landmarks5: np.ndarray, template: Optional[AlignTemplate] = None,
                   output_size: Optional[int] = None, return_matrix: bool = False):
    """Warp a face onto the template crop, pad it onto a uniform canvas, optionally resize.

    The crop is ``template.crop_size`` square, centered on a ``template.pad_size`` canvas
    filled with ``template.background``; a final bilinear resize to ``output_size``
    follows when given. With ``return_matrix`` the 3x3 map from input pixels to output
    pixels is returned too.
    """
    template = template or AlignTemplate()
    matrix = estimate_similarity(landmarks5, template.points)
    img = np.asarray(image, dtype=np.float32)
    squeeze = img.ndim == 2 or img.shape[2] == 1
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    bg = float(template.background)
    border = bg if img.ndim == 2 else (bg,) * img.shape[2]
    crop = cv2.warpAffine(img, matrix[:2], (template.crop_size, template.crop_size), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=border)
    off = (template.pad_size - template.crop_size) // 2
    canvas = np.full((template.pad_size, template.pad_size) + crop.shape[2:], bg, dtype=np.float32)
    canvas[off:off + template.crop_size, off:off + template.crop_size] = crop
    full = np.array([[1, 0, off], [0, 1, off], [0, 0, 1]], dtype=np.float64) @ matrix
    out = canvas
    if output_size is not None and output_size != template.pad_size:
        out = cv2.resize(canvas, (output_size, output_size), interpolation=cv2.INTER_LINEAR)
        # pixel-center convention of cv2.resize
        s = output_size / template.pad_size
        full = np.array([[s, 0, 0.5 * s - 0.5], [0, s, 0.5 * s - 0.5], [0, 0, 1]]) @ full
    if squeeze:
        out = out[:, :, None]
    out = np.clip(out, 0.0, 1.0)
    if return_matrix:
        return out, full
    return out


def apply_transform(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ matrix[:2, :2].T + matrix[:2, 2]


def warp_seg(seg: np.ndarray, matrix: np.ndarray, size: int) -> np.ndarray:
    return cv2.warpAffine(seg.astype(np.uint8), matrix[:2], (size, size), flags=cv2.INTER_NEAREST,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0).astype(np.int64)


# --------------------------------------------------------------------------
# manifests

@dataclass
class ManifestRecord:
    image: str
    landmarks: Union[str, list, None] = None
    seg: Optional[str] = None
    split: str = "train"


@dataclass
class DatasetManifest:
    records: list
    root: Path = Path(".")

    @classmethod
    def read(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        records = []
        for i, line in enumerate(path.read_text().splitlines()):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                records.append(ManifestRecord(**raw))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"record {i}: malformed manifest entry ({exc})") from None
            if not isinstance(records[-1].image, str):
                raise DataError(f"record {i}: 'image' must be a path string")
        manifest = cls(records, path.parent)
        manifest.check_splits()
        return manifest

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        return path

    def check_splits(self) -> None:
        seen = {}
        for i, rec in enumerate(self.records):
            prev = seen.setdefault(rec.image, rec.split)
            if prev != rec.split:
                raise DataError(f"record {i}: image {rec.image} appears in splits {prev!r} and {rec.split!r}")

    def split(self, name: str) -> list:
        return [(i, r) for i, r in enumerate(self.records) if r.split == name]


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return arr.astype(np.float32) / 255.0


def write_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def _load_record(manifest: DatasetManifest, index: int, rec: ManifestRecord) -> FaceSample:
    def resolve(p):
        full = (manifest.root / p) if not Path(p).is_absolute() else Path(p)
        if not full.exists():
            raise DataError(f"record {index}: missing file {full}")
        return full

    try:
        image = read_png(resolve(rec.image))
        seg = None
        if rec.seg:
            with Image.open(resolve(rec.seg)) as im:
                seg = np.asarray(im).astype(np.int64)
        landmarks = None
        if isinstance(rec.landmarks, str):
            landmarks = np.asarray(json.loads(resolve(rec.landmarks).read_text())["landmarks"], dtype=np.float64)
        elif rec.landmarks is not None:
            landmarks = np.asarray(rec.landmarks, dtype=np.float64)
        sample = FaceSample(image, seg, landmarks)
        sample.validate()
    except DataError as exc:
        msg = str(exc)
        raise DataError(msg if msg.startswith("record ") else f"record {index}: {msg}") from None
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"record {index}: {exc}") from None
    return sample


def load_dataset(manifest: Union[DatasetManifest, str, Path], split: str = "train", shuffle: bool = False,
                 seed: int = 0) -> Iterator[FaceSample]:
    """Lazily yield validated samples of one split, optionally in a seeded shuffled order."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    entries = manifest.split(split)
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(entries))
        entries = [entries[i] for i in order]
    for index, rec in entries:
        yield _load_record(manifest, index, rec)


def write_synthetic_dataset(out_dir: Union[str, Path], count: int, seed: int = 0, image_size: int = 64,
                            channels: int = 3, test_fraction: float = 0.2) -> Path:
    """Render ``count`` faces to PNG/JSON files plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("images", "masks", "landmarks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n_test = int(round(count * test_fraction))
    records = []
    for i, sample in enumerate(generate_synthetic(count, seed, image_size, channels)):
        stem = f"{i:05d}"
        write_png(out / "images" / f"{stem}.png", sample.image)
        Image.fromarray(sample.seg_mask.astype(np.uint8), mode="L").save(out / "masks" / f"{stem}.png")
        (out / "landmarks" / f"{stem}.json").write_text(json.dumps({
            "names": list(LANDMARK_NAMES), "landmarks": sample.landmarks.tolist()}))
        records.append(ManifestRecord(f"images/{stem}.png", f"landmarks/{stem}.json", f"masks/{stem}.png",
                                      "test" if i >= count - n_test else "train"))
    return DatasetManifest(records, out).write(out / "manifest.jsonl")


def prepare_dataset(manifest: Union[DatasetManifest, str, Path], out_dir: Union[str, Path],
                    template: Optional[AlignTemplate] = None, output_size: Optional[int] = None) -> Path:
    """Align every record that carries landmarks; write images, warped masks and landmarks."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    template = template or AlignTemplate()
    out = Path(out_dir)
    for sub in ("images", "masks", "landmarks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    size = output_size or template.pad_size
    records = []
    for index, rec in enumerate(manifest.records):
        sample = _load_record(manifest, index, rec)
        if sample.landmarks is None:
            raise DataError(f"record {index}: alignment needs landmarks")
        lm = sample.landmarks
        five = lm[list(FIVE_POINT_INDICES)] if lm.shape[0] == NUM_LANDMARKS else lm
        try:
            aligned, matrix = align_crop_pad(sample.image, five, template, output_size, return_matrix=True)
        except AlignmentError as exc:
            raise DataError(f"record {index}: {exc}") from None
        stem = f"{index:05d}"
        write_png(out / "images" / f"{stem}.png", aligned)
        new = ManifestRecord(f"images/{stem}.png", None, None, rec.split)
        new_lm = np.clip(apply_transform(matrix, lm), 0, size - 1)
        (out / "landmarks" / f"{stem}.json").write_text(json.dumps({"landmarks": new_lm.tolist()}))
        new.landmarks = f"landmarks/{stem}.json"
        if sample.seg_mask is not None:
            Image.fromarray(warp_seg(sample.seg_mask, matrix, size).astype(np.uint8), mode="L").save(
                out / "masks" / f"{stem}.png")
            new.seg = f"masks/{stem}.png"
        records.append(new)
    return DatasetManifest(records, out).write(out / "manifest.jsonl")
