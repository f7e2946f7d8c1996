"""Synthetic aerial-ground pedestrian data: generation, manifests, PK batches.

Every identity is a procedurally coloured sprite (hair, striped top, trousers,
shoes, optional bag).  Ground cameras see it upright; aerial cameras see the
same render pushed through a view transform whose severity is set by
``view_bias_strength``: vertical squash, in-plane rotation, a ground-plane
background tint and a down/up-sampling blur.  At strength 0 the aerial and
ground renders of an image slot are pixel-identical.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ManifestParseError

log = logging.getLogger(__name__)

GROUND, AERIAL = 0, 1
MANIFEST_HEADER = ("image_path", "person_id", "camera_id", "view")
MANIFEST_NAME = "manifest.tsv"
GEN_CONFIG_NAME = "gen_config.txt"
MAX_OCCLUSION_AREA = 0.5
_AERIAL_TINT = np.array([96.0, 112.0, 84.0])
_SUPERSAMPLE = 2


@dataclass
class GenConfig:
    num_ids: int = 64
    images_per_id_per_view: int = 4
    height: int = 32
    width: int = 16
    seed: int = 0
    view_bias_strength: float = 0.8
    occlusion_prob: float = 0.1
    id_offset: int = 0
    ground_cameras: int = 2
    aerial_cameras: int = 2

    def __post_init__(self):
        if self.num_ids < 2:
            raise ConfigError("num_ids must be >= 2")
        if self.images_per_id_per_view < 1:
            raise ConfigError("images_per_id_per_view must be >= 1")
        if not 0.0 <= self.view_bias_strength <= 1.0:
            raise ConfigError("view_bias_strength must lie in [0, 1]")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError("occlusion_prob must lie in [0, 1]")
        if self.ground_cameras < 1 or self.aerial_cameras < 1:
            raise ConfigError("need at least one ground and one aerial camera")
        if self.height < 4 or self.width < 4:
            raise ConfigError("images must be at least 4x4")

    def camera_view(self, camera_id):
        return GROUND if camera_id < self.ground_cameras else AERIAL

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ConfigError(f"unknown GenConfig key {key!r}")
            kwargs[key] = float(value) if types[key] in ("float", float) else int(value)
        return cls(**kwargs)


@dataclass(frozen=True)
class Sample:
    image_path: str
    person_id: int
    camera_id: int
    view: int


@dataclass
class Batch:
    images: np.ndarray
    ids: np.ndarray
    views: np.ndarray
    cameras: np.ndarray
    indices: np.ndarray
    erased: list = None

    def __len__(self):
        return len(self.ids)


# -- image I/O ------------------------------------------------------------------

def write_ppm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    h, w, c = image.shape
    if c != 3:
        raise ValueError("PPM P6 needs 3 channels")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).copy()


# -- rendering ------------------------------------------------------------------

def _identity_style(seed, person_id):
    rng = np.random.default_rng([seed, person_id, 0])
    return {
        "skin": rng.uniform([150, 100, 70], [240, 200, 170]),
        "hair": rng.uniform(0, 120, 3),
        "top": rng.uniform(0, 255, 3),
        "stripe": rng.uniform(0, 255, 3),
        "stripe_kind": int(rng.integers(0, 3)),   # none, horizontal, vertical
        "stripe_period": float(rng.uniform(0.05, 0.12)),
        "bottom": rng.uniform(0, 200, 3),
        "shoes": rng.uniform(0, 90, 3),
        "width": float(rng.uniform(0.85, 1.15)),
        "bag": rng.uniform(0, 255, 3) if rng.random() < 0.4 else None,
    }


def _nuisance(seed, person_id, slot, config):
    rng = np.random.default_rng([seed, person_id, 1, slot])
    nuis = {
        "dx": rng.uniform(-0.08, 0.08),
        "dy": rng.uniform(-0.04, 0.04),
        "spin": 1.0 if rng.random() < 0.5 else -1.0,
        "brightness": rng.uniform(0.8, 1.2),
        "background": rng.uniform(100, 200) + rng.uniform(-20, 20, 3),
        "noise": rng.normal(0.0, 5.0, (config.height, config.width, 3)),
        "occlusion": None,
    }
    if rng.random() < config.occlusion_prob:
        h, w = config.height, config.width
        oh = int(rng.integers(1, h + 1))
        ow = int(rng.integers(1, w + 1))
        while oh * ow > MAX_OCCLUSION_AREA * h * w:
            if oh > 1:
                oh -= 1
            if ow > 1:
                ow -= 1
        y0 = int(rng.integers(0, h - oh + 1))
        x0 = int(rng.integers(0, w - ow + 1))
        nuis["occlusion"] = (y0, x0, oh, ow, rng.uniform(0, 255, 3))
    return nuis


def _paint_sprite(u, v, style, canvas):
    """Colour the pixels whose body coordinates (u, v) fall on the sprite."""
    bw = style["width"]
    du = np.abs(u - 0.5)
    head = ((u - 0.5) / (0.13 * bw)) ** 2 + ((v - 0.12) / 0.08) ** 2 <= 1.0
    canvas[head] = style["skin"]
    canvas[head & (v < 0.1)] = style["hair"]
    torso = (v >= 0.2) & (v < 0.55) & (du < 0.24 * bw)
    arms = (v >= 0.22) & (v < 0.5) & (du >= 0.24 * bw) & (du < 0.32 * bw)
    canvas[arms] = style["top"]
    canvas[torso] = style["top"]
    if style["stripe_kind"]:
        coord = v if style["stripe_kind"] == 1 else u
        band = np.floor(coord / style["stripe_period"]).astype(int) % 2 == 1
        canvas[torso & band] = style["stripe"]
    legs = (v >= 0.55) & (v < 0.92) & (du >= 0.03) & (du < 0.2 * bw)
    canvas[legs] = style["bottom"]
    shoes = (v >= 0.92) & (v < 0.97) & (du >= 0.03) & (du < 0.21 * bw)
    canvas[shoes] = style["shoes"]
    if style["bag"] is not None:
        bag = (v >= 0.35) & (v < 0.52) & (u - 0.5 >= 0.32 * bw) & (u - 0.5 < 0.44 * bw)
        canvas[bag] = style["bag"]


def _box_blur(image):
    h, w, _ = image.shape
    ph, pw = h + h % 2, w + w % 2
    padded = np.pad(image, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")
    small = padded.reshape(ph // 2, 2, pw // 2, 2, 3).mean(axis=(1, 3))
    return np.repeat(np.repeat(small, 2, axis=0), 2, axis=1)[:h, :w]


def render(style, nuis, strength, height, width):
    """Render one image slot; ``strength`` is 0 for ground cameras."""
    s = _SUPERSAMPLE
    H, W = height * s, width * s
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    # canvas pixel -> body frame: undo shift, rotation, then vertical squash
    x = (xs + 0.5) / W - 0.5 - nuis["dx"]
    y = (ys + 0.5) / H - 0.5 - nuis["dy"]
    angle = math.radians(30.0) * strength * nuis["spin"]
    c, sn = math.cos(angle), math.sin(angle)
    aspect = H / W
    xr = c * x + sn * y * aspect
    yr = (-sn * x / aspect) + c * y
    squash = 1.0 - 0.45 * strength
    u = xr + 0.5
    v = yr / squash + 0.5

    background = nuis["background"] * (1.0 - 0.7 * strength) + _AERIAL_TINT * (0.7 * strength)
    canvas = np.empty((H, W, 3))
    canvas[:] = background
    _paint_sprite(u, v, style, canvas)
    image = canvas.reshape(height, s, width, s, 3).mean(axis=(1, 3))
    image = (1.0 - strength) * image + strength * _box_blur(image)
    image = image * nuis["brightness"] + nuis["noise"]
    if nuis["occlusion"] is not None:
        y0, x0, oh, ow, color = nuis["occlusion"]
        image[y0:y0 + oh, x0:x0 + ow] = color
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def render_identity(config, person_id, view, slot):
    style = _identity_style(config.seed, person_id)
    nuis = _nuisance(config.seed, person_id, slot, config)
    strength = config.view_bias_strength if view == AERIAL else 0.0
    return render(style, nuis, strength, config.height, config.width)


# -- datasets -------------------------------------------------------------------

class Dataset:
    """Samples listed in a manifest; images are read on first access."""

    def __init__(self, root, samples):
        self.root = Path(root)
        self.samples = list(samples)
        self._cache = {}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def person_ids(self):
        return np.array([s.person_id for s in self.samples], dtype=np.int64)

    @property
    def camera_ids(self):
        return np.array([s.camera_id for s in self.samples], dtype=np.int64)

    @property
    def views(self):
        return np.array([s.view for s in self.samples], dtype=np.int64)

    def identities(self):
        return sorted({s.person_id for s in self.samples})

    def id_histogram(self):
        hist = {}
        for s in self.samples:
            hist[s.person_id] = hist.get(s.person_id, 0) + 1
        return hist

    def load_image(self, i):
        if i not in self._cache:
            path = self.root / self.samples[i].image_path
            if not path.exists():
                raise FileNotFoundError(f"image file missing: {path}")
            self._cache[i] = read_ppm(path)
        return self._cache[i]

    def images(self, indices=None):
        """Float images scaled to [-1, 1], shape (n, H, W, 3)."""
        if indices is None:
            indices = range(len(self))
        raw = np.stack([self.load_image(int(i)) for i in indices]) if len(indices) else None
        if raw is None:
            return np.zeros((0, 0, 0, 3))
        return raw.astype(np.float64) / 127.5 - 1.0


def generate(config, out_dir):
    """Render a dataset into ``out_dir`` and return it as a :class:`Dataset`."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    samples = []
    n_views = {GROUND: config.ground_cameras, AERIAL: config.aerial_cameras}
    for i in range(config.num_ids):
        pid = config.id_offset + i
        for view in (GROUND, AERIAL):
            for slot in range(config.images_per_id_per_view):
                cam = slot % n_views[view] + (0 if view == GROUND else config.ground_cameras)
                rel = f"images/{pid:05d}_c{cam}_{slot:02d}.ppm"
                write_ppm(out_dir / rel, render_identity(config, pid, view, slot))
                samples.append(Sample(rel, pid, cam, view))
    write_manifest(out_dir / MANIFEST_NAME, samples)
    (out_dir / GEN_CONFIG_NAME).write_text(config.to_text())
    log.info("wrote %d images for %d identities to %s", len(samples), config.num_ids, out_dir)
    return Dataset(out_dir, samples)


def generate_splits(out_dir, num_train_ids=64, num_test_ids=64, **gen_kwargs):
    """Disjoint train/test identity splits under ``out_dir/train`` and ``out_dir/test``."""
    out_dir = Path(out_dir)
    train_cfg = GenConfig(num_ids=num_train_ids, id_offset=0, **gen_kwargs)
    test_cfg = GenConfig(num_ids=num_test_ids, id_offset=num_train_ids, **gen_kwargs)
    return generate(train_cfg, out_dir / "train"), generate(test_cfg, out_dir / "test")


def write_manifest(path, samples):
    lines = ["\t".join(MANIFEST_HEADER)]
    lines += [f"{s.image_path}\t{s.person_id}\t{s.camera_id}\t{s.view}" for s in samples]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path):
    """Parse a TSV manifest; ``path`` may be the file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    text = path.read_text()
    lines = text.splitlines()
    samples, camera_views = [], {}
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if line_no == 1 and tuple(cols) == MANIFEST_HEADER:
            continue
        if len(cols) != 4:
            raise ManifestParseError(path, line_no, f"expected 4 columns, got {len(cols)}")
        rel, pid, cam, view = cols
        try:
            pid, cam, view = int(pid), int(cam), int(view)
        except ValueError:
            raise ManifestParseError(path, line_no, "non-integer id, camera or view") from None
        if pid < 0 or cam < 0:
            raise ManifestParseError(path, line_no, "negative person or camera id")
        if view not in (GROUND, AERIAL):
            raise ManifestParseError(path, line_no, f"view must be 0 or 1, got {view}")
        if camera_views.setdefault(cam, view) != view:
            raise ManifestParseError(
                path, line_no, f"camera {cam} labelled both ground and aerial")
        samples.append(Sample(rel, pid, cam, view))
    root = path.parent
    for line_no, s in enumerate(samples, start=2):
        if not (root / s.image_path).exists():
            raise FileNotFoundError(f"{path}: image file missing: {s.image_path}")
    return Dataset(root, samples)


# -- batches --------------------------------------------------------------------

def pk_sample(dataset, P, K, seed, step):
    """P identities x K images, drawn deterministically from ``(seed, step)``.

    Identities are drawn without replacement; images within an identity are
    drawn without replacement when it has at least K of them, otherwise with
    replacement.
    """
    by_id = {}
    for idx, s in enumerate(dataset.samples):
        by_id.setdefault(s.person_id, []).append(idx)
    ids = sorted(by_id)
    if len(ids) < P:
        raise ContractError(f"dataset has {len(ids)} identities, PK batch needs P={P}")
    rng = np.random.default_rng([seed, step])
    chosen = rng.choice(len(ids), size=P, replace=False)
    indices = []
    for c in chosen:
        pool = by_id[ids[c]]
        picks = rng.choice(len(pool), size=K, replace=len(pool) < K)
        indices.extend(pool[p] for p in picks)
    indices = np.array(indices, dtype=np.int64)
    return Batch(
        images=dataset.images(indices),
        ids=dataset.person_ids[indices],
        views=dataset.views[indices],
        cameras=dataset.camera_ids[indices],
        indices=indices,
    )


def _erase_box(rng, h, w, area_range=(0.02, 0.4), ratio_range=(0.3, 3.3)):
    for _ in range(100):
        area = rng.uniform(*area_range) * h * w
        ratio = math.exp(rng.uniform(math.log(ratio_range[0]), math.log(ratio_range[1])))
        eh = int(round(math.sqrt(area * ratio)))
        ew = int(round(math.sqrt(area / ratio)))
        if 0 < eh < h and 0 < ew < w:
            return int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1)), eh, ew
    eh, ew = max(1, h // 4), max(1, w // 4)
    return int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1)), eh, ew


def augment(batch, train, seed, pad=2, erase_prob=0.5):
    """Pad-and-crop plus random erasing for training; identity at inference.

    Erased rectangles are recorded in ``batch.erased`` as ``(y, x, h, w)``
    or ``None`` per image.
    """
    if not train:
        return batch
    rng = np.random.default_rng(seed)
    n, h, w, c = batch.images.shape
    out = np.empty_like(batch.images)
    erased = []
    for i in range(n):
        padded = np.pad(batch.images[i], ((pad, pad), (pad, pad), (0, 0)))
        oy, ox = rng.integers(0, 2 * pad + 1, size=2)
        img = padded[oy:oy + h, ox:ox + w].copy()
        box = None
        if rng.random() < erase_prob:
            box = _erase_box(rng, h, w)
            y, x, eh, ew = box
            img[y:y + eh, x:x + ew] = 0.0
        out[i] = img
        erased.append(box)
    return dataclasses.replace(batch, images=out, erased=erased)


def directory_digest(path):
    """SHA-256 over relative file names and contents, for reproducibility checks."""
    digest = hashlib.sha256()
    root = Path(path)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            full = Path(dirpath) / name
            digest.update(str(full.relative_to(root)).encode())
            digest.update(full.read_bytes())
    return digest.hexdigest()
