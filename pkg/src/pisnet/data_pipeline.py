"""Synthetic pedestrian-interference data, manifests and MPSL-aware batches.

Images are float32 arrays shaped ``3xHxW`` with values in ``[0, 1]``. Boxes are
normalized to the frame of the image they belong to.
"""
from __future__ import annotations

import colorsys
import logging
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BatchError, ContractError, GenerationError, IngestionError
from .model_core import BoxLayout, PersonBox

log = logging.getLogger(__name__)

MIN_CONTAINMENT = 0.7
MIN_AREA_RATIO = 0.3
PATTERNS = ("solid", "hstripe", "vstripe", "checker", "split")
SPLITS = ("train", "query", "gallery", "distractor")
MANIFEST_HEADER = "# pisnet-manifest v1"


# ---------------------------------------------------------------------------
# Sprites
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpriteSpec:
    pid: int
    skin: tuple
    hair: tuple
    torso: tuple
    accent: tuple
    legs: tuple
    pattern: str
    aspect: float  # sprite width / height in pixels
    waist: float  # torso/leg boundary as a fraction of height

    @property
    def colors(self):
        return (self.torso, self.accent, self.legs)


def _hsv(rng, s=(0.35, 1.0), v=(0.3, 1.0)):
    return tuple(
        round(c, 4)
        for c in colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(*s), rng.uniform(*v))
    )


def synth_identity(seed: int, pid: int) -> SpriteSpec:
    """Deterministic appearance for identity ``pid`` under ``seed``."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(pid) & 0xFFFFFFFF, 0x5EED])
    skin_v = rng.uniform(0.35, 0.95)
    return SpriteSpec(
        pid=int(pid),
        skin=(round(skin_v, 4), round(skin_v * 0.78, 4), round(skin_v * 0.62, 4)),
        hair=_hsv(rng, s=(0.0, 0.6), v=(0.05, 0.7)),
        torso=_hsv(rng),
        accent=_hsv(rng),
        legs=_hsv(rng),
        pattern=PATTERNS[int(rng.integers(len(PATTERNS)))],
        aspect=round(float(rng.uniform(0.36, 0.5)), 4),
        waist=round(float(rng.uniform(0.5, 0.6)), 4),
    )


def _sprite_layers(spec: SpriteSpec, u, v, leg_gap):
    """Return ``(rgb, mask)`` for normalized sprite coordinates ``u`` (x), ``v`` (y)."""
    rgb = np.zeros(u.shape + (3,), dtype=np.float32)
    mask = np.zeros(u.shape, dtype=bool)

    def paint(region, color):
        rgb[region] = color
        mask[region] = True

    inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    w = spec.waist
    torso = inside & (v >= 0.17) & (v < w) & (u >= 0.12) & (u < 0.88)
    arms = inside & (v >= 0.18) & (v < w + 0.06) & ((u < 0.12) | (u >= 0.88))
    half = 0.5 * leg_gap
    legs = inside & (v >= w) & (((u >= 0.16) & (u < 0.5 - half)) | ((u >= 0.5 + half) & (u < 0.84)))
    head = inside & (((u - 0.5) / 0.2) ** 2 + ((v - 0.09) / 0.09) ** 2 <= 1.0)

    paint(arms, spec.torso)
    paint(legs, spec.legs)
    tv = (v - 0.17) / max(w - 0.17, 1e-6)
    if spec.pattern == "hstripe":
        accent = np.floor(tv * 6) % 2 == 1
    elif spec.pattern == "vstripe":
        accent = np.floor(u * 7) % 2 == 1
    elif spec.pattern == "checker":
        accent = (np.floor(tv * 4) + np.floor(u * 4)) % 2 == 1
    elif spec.pattern == "split":
        accent = u >= 0.5
    else:
        accent = np.zeros(u.shape, dtype=bool)
    paint(torso & ~accent, spec.torso)
    paint(torso & accent, spec.accent)
    paint(head, spec.skin)
    paint(head & (v < 0.06), spec.hair)
    return rgb, mask


def _background(rng, h, w, jitter: bool):
    if not jitter:
        return np.full((3, h, w), 0.5, dtype=np.float32)
    base = np.array(_hsv(rng, s=(0.0, 0.25), v=(0.25, 0.75)), dtype=np.float32)
    ramp = np.linspace(-1, 1, h, dtype=np.float32)[:, None] * rng.uniform(-0.12, 0.12)
    img = base[:, None, None] + ramp[None] + rng.normal(0, 0.04, (3, h, w)).astype(np.float32)
    return np.clip(img, 0, 1)


def _draw(canvas, occupancy, spec, box_px, rng, jitter: bool, owner: int):
    """Draw ``spec`` into ``canvas`` inside pixel box ``(top, left, height, width)``.

    Returns the boolean mask of pixels painted by this sprite.
    """
    _, h, w = canvas.shape
    top, left, bh, bw = box_px
    rows = (np.arange(h, dtype=np.float32) + 0.5 - top) / bh
    cols = (np.arange(w, dtype=np.float32) + 0.5 - left) / bw
    v, u = np.meshgrid(rows, cols, indexing="ij")
    gap = rng.uniform(0.02, 0.12) if jitter else 0.06
    rgb, mask = _sprite_layers(spec, u, v, gap)
    if jitter:
        light = rng.uniform(0.8, 1.2) * (1 + rng.uniform(-0.05, 0.05, 3))
        rgb = rgb * light.astype(np.float32) + rng.normal(0, 0.03, rgb.shape).astype(np.float32)
        rgb = np.clip(rgb, 0, 1)
    canvas[:, mask] = rgb[mask].T
    occupancy[mask] = owner
    return mask


@dataclass
class PISample:
    """An image with its persons; ``kind`` is derived from the person count."""

    image: np.ndarray
    persons: tuple
    z_order: tuple = None
    # for singles: the sprite's pixel mask; for multis: per-pixel owner slot (-1 background)
    mask: np.ndarray = None

    def __post_init__(self):
        self.persons = tuple(self.persons)
        if self.z_order is None:
            self.z_order = tuple(range(len(self.persons)))

    @property
    def kind(self) -> str:
        return "single" if len(self.persons) == 1 else "multi"

    @property
    def ids(self) -> tuple:
        return tuple(p.pid for p in self.persons)


def render_single(spec: SpriteSpec, rng=None, size=(64, 32), min_box_area=0.15) -> PISample:
    """Render one person. ``rng=None`` gives the canonical, jitter-free sprite."""
    h, w = size
    jitter = rng is not None
    canvas = _background(rng, h, w, jitter)
    if jitter:
        for _ in range(100):
            bh = rng.uniform(0.8, 0.97) * h
            bw = min(spec.aspect * rng.uniform(0.92, 1.08) * bh, 0.98 * w)
            top = rng.uniform(0, h - bh)
            left = rng.uniform(0, w - bw)
            if (bh * bw) / (h * w) >= min_box_area:
                break
        else:  # pragma: no cover - bounds above make this unreachable
            raise GenerationError("could not place a sprite above the minimum box area")
    else:
        bh = 0.9 * h
        bw = min(spec.aspect * bh, w)
        top, left = (h - bh) / 2, (w - bw) / 2
    occupancy = np.full((h, w), -1, dtype=np.int8)
    mask = _draw(canvas, occupancy, spec, (top, left, bh, bw), rng, jitter, 0)
    box = PersonBox(
        spec.pid,
        max(0.0, left / w), max(0.0, top / h),
        min(1.0, (left + bw) / w), min(1.0, (top + bh) / h),
    )
    return PISample(canvas.astype(np.float32), (box,), (0,), mask)


# ---------------------------------------------------------------------------
# Multi-person composition
# ---------------------------------------------------------------------------

def _clip_box(b: PersonBox, crop: PersonBox) -> PersonBox:
    return PersonBox(b.pid, max(b.x0, crop.x0), max(b.y0, crop.y0), min(b.x1, crop.x1), min(b.y1, crop.y1))


def validate_pi_criteria(crop_box, person_boxes) -> bool:
    """Check the three multi-person crop selection rules.

    1. at least 70% of every person box lies inside ``crop_box``;
    2. every contained part covers at least 0.3 of the crop's area;
    3. every person box overlaps at least one other person box.
    """
    boxes = [b if isinstance(b, PersonBox) else PersonBox(-1, *b) for b in person_boxes]
    crop = crop_box if isinstance(crop_box, PersonBox) else PersonBox(-1, *crop_box)
    if len(boxes) < 2 or crop.area <= 0:
        return False
    for b in boxes:
        if b.area <= 0:
            return False
        inside = b.intersection(crop)
        if inside < MIN_CONTAINMENT * b.area or inside < MIN_AREA_RATIO * crop.area:
            return False
    for i, a in enumerate(boxes):
        if not any(i != j and a.intersection(b) > 0 for j, b in enumerate(boxes)):
            return False
    return True


def _cutout(sample: PISample):
    """Pixels and mask of the sprite inside a single sample's box."""
    _, h, w = sample.image.shape
    b = sample.persons[0]
    r0, r1 = int(np.floor(b.y0 * h)), int(np.ceil(b.y1 * h))
    c0, c1 = int(np.floor(b.x0 * w)), int(np.ceil(b.x1 * w))
    mask = sample.mask if sample.mask is not None else np.ones((h, w), dtype=bool)
    return sample.image[:, r0:r1, c0:c1], mask[r0:r1, c0:c1]


def _paste(canvas, occupancy, pixels, mask, box: PersonBox, owner: int):
    """Nearest-neighbour paste of a cutout into the (possibly partially visible) box."""
    _, h, w = canvas.shape
    _, sh, sw = pixels.shape
    top, left = box.y0 * h, box.x0 * w
    bh, bw = (box.y1 - box.y0) * h, (box.x1 - box.x0) * w
    r0, r1 = max(0, int(np.floor(top))), min(h, int(np.ceil(top + bh)))
    c0, c1 = max(0, int(np.floor(left))), min(w, int(np.ceil(left + bw)))
    rows = np.arange(r0, r1)
    cols = np.arange(c0, c1)
    sr = np.floor((rows + 0.5 - top) / bh * sh).astype(int)
    sc = np.floor((cols + 0.5 - left) / bw * sw).astype(int)
    rv = (sr >= 0) & (sr < sh)
    cv = (sc >= 0) & (sc < sw)
    rows, sr = rows[rv], sr[rv]
    cols, sc = cols[cv], sc[cv]
    m = mask[np.ix_(sr, sc)]
    region = canvas[:, rows[:, None], cols[None, :]]
    src = pixels[:, sr[:, None], sc[None, :]]
    canvas[:, rows[:, None], cols[None, :]] = np.where(m[None], src, region)
    occ = occupancy[rows[:, None], cols[None, :]]
    occupancy[rows[:, None], cols[None, :]] = np.where(m, owner, occ)


def sample_multi_boxes(singles, rng, size=(64, 32), max_tries=100, scale=(0.8, 1.05)):
    """Draw crop-relative boxes for ``singles`` satisfying the selection rules.

    Returned boxes are unclipped (they may extend past the crop). ``scale``
    bounds each person's height relative to the crop.
    """
    h, w = size
    crop = PersonBox(-1, 0.0, 0.0, 1.0, 1.0)
    for _ in range(max_tries):
        boxes = []
        for s in singles:
            b = s.persons[0]
            aspect_px = ((b.x1 - b.x0) * s.image.shape[2]) / ((b.y1 - b.y0) * s.image.shape[1])
            bh = rng.uniform(*scale)
            bw = aspect_px * bh * h / w
            x0 = rng.uniform(-0.3 * bw, 1 - 0.7 * bw)
            y0 = rng.uniform(-0.15 * bh, 1 - 0.85 * bh)
            boxes.append(PersonBox(b.pid, x0, y0, x0 + bw, y0 + bh))
        if validate_pi_criteria(crop, boxes):
            return boxes
    raise GenerationError(f"no valid multi-person placement after {max_tries} tries")


def compose_multi(a: PISample, b: PISample, rng, others=(), size=None, scale=(0.8, 1.05)) -> PISample:
    """Composite two (or more) single-person samples into one interfered crop.

    Sprites are pasted back to front in a random ``z_order``; the front sprite
    overwrites whatever it covers.
    """
    singles = (a, b) + tuple(others)
    if any(s.kind != "single" for s in singles):
        raise ContractError("compose_multi takes single-person samples")
    if len({s.persons[0].pid for s in singles}) != len(singles):
        raise ContractError("compose_multi needs distinct identities")
    size = size or a.image.shape[1:]
    h, w = size
    boxes = sample_multi_boxes(singles, rng, size, scale=scale)
    z_order = tuple(int(i) for i in rng.permutation(len(singles)))
    canvas = _background(rng, h, w, True)
    occupancy = np.full((h, w), -1, dtype=np.int8)
    for slot in z_order:
        pixels, mask = _cutout(singles[slot])
        _paste(canvas, occupancy, pixels, mask, boxes[slot], slot)
    crop = PersonBox(-1, 0.0, 0.0, 1.0, 1.0)
    clipped = tuple(_clip_box(bx, crop) for bx in boxes)
    return PISample(canvas, clipped, z_order, occupancy)


def extract_layout(sample) -> BoxLayout:
    """Crop-relative boxes and z-order of a multi-person sample or manifest entry."""
    if len(sample.persons) < 2:
        raise ContractError("extract_layout needs a multi-person sample")
    return BoxLayout(tuple(sample.persons), tuple(sample.z_order))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    file: str
    split: str
    persons: tuple
    cam: int = None

    @property
    def kind(self) -> str:
        return "single" if len(self.persons) == 1 else "multi"

    @property
    def ids(self) -> tuple:
        return tuple(p.pid for p in self.persons)

    @property
    def z_order(self) -> tuple:
        # persons are stored back to front
        return tuple(range(len(self.persons)))


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    skipped: int = 0
    vocabulary: tuple = field(init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.vocabulary = tuple(sorted({p for e in self.entries for p in e.ids}))
        for e in self.entries:
            if e.split not in SPLITS:
                raise IngestionError(f"{e.file}: unknown split {e.split!r}")
            if e.split == "query" and e.kind != "single":
                raise IngestionError(f"{e.file}: query entries must be single-person")
            if e.split == "distractor" and e.kind != "single":
                raise IngestionError(f"{e.file}: distractor entries must be single-person")

    def select(self, *splits):
        return [i for i, e in enumerate(self.entries) if e.split in splits]

    def ids_in(self, *splits) -> tuple:
        return tuple(sorted({p for i in self.select(*splits) for p in self.entries[i].ids}))

    def image_path(self, i: int) -> Path:
        return self.root / self.entries[i].file

    def load_image(self, i: int, size=None) -> np.ndarray:
        return load_image(self.image_path(i), size)


def load_image(path, size=None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, image: np.ndarray):
    arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def _format_boxes(persons) -> str:
    return ";".join(f"{p.pid}:{p.x0!r},{p.y0!r},{p.x1!r},{p.y1!r}" for p in persons)


def _parse_boxes(text: str) -> tuple:
    out = []
    for part in text.split(";"):
        pid, coords = part.split(":")
        out.append(PersonBox(int(pid), *(float(c) for c in coords.split(","))))
    return tuple(out)


def write_manifest(manifest: DatasetManifest, path=None):
    """One line per entry: ``file<TAB>split<TAB>id:x0,y0,x1,y1;...[<TAB>cam]``.

    Boxes of a multi-person entry are listed back to front.
    """
    path = Path(path) if path else manifest.root / "manifest.txt"
    lines = [MANIFEST_HEADER]
    for e in manifest.entries:
        row = [e.file, e.split, _format_boxes(e.persons)]
        if e.cam is not None:
            row.append(str(e.cam))
        lines.append("\t".join(row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise IngestionError(f"{path}: missing header {MANIFEST_HEADER!r}")
    entries = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        try:
            cam = int(parts[3]) if len(parts) > 3 else None
            entries.append(ManifestEntry(parts[0], parts[1], _parse_boxes(parts[2]), cam))
        except (IndexError, ValueError) as exc:
            raise IngestionError(f"{path}:{n}: malformed record {line!r}") from exc
    return DatasetManifest(path.parent, entries)


def entry_from_sample(file, split, sample: PISample, cam=None) -> ManifestEntry:
    persons = tuple(sample.persons[i] for i in sample.z_order)
    return ManifestEntry(file, split, persons, cam)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    ids: int = 50
    singles_per_id: int = 20
    multis: int = 500
    distractors: int = 500
    persons_per_multi: int = 2
    seed: int = 0
    height: int = 64
    width: int = 32
    train_id_frac: float = 0.5
    multi_train_frac: float = 0.7
    id_split: str = "closed"
    query_per_id: int = 4
    multi_scale: tuple = (0.6, 0.8)

    def __post_init__(self):
        if not 2 <= self.persons_per_multi <= 3:
            raise GenerationError("persons_per_multi must be 2 or 3")
        if self.id_split not in ("disjoint", "closed"):
            raise GenerationError("id_split must be 'disjoint' or 'closed'")
        if self.id_split == "closed" and not 0 < self.query_per_id < self.singles_per_id:
            raise GenerationError("query_per_id must leave at least one training single per id")

    @property
    def size(self):
        return (self.height, self.width)


def _stream(seed, kind, index):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, kind, index])


def synthesize(cfg: SynthConfig):
    """Yield ``(file, split, sample)`` for the whole corpus in a fixed order.

    With ``id_split="disjoint"`` identities ``[0, n_train)`` are training ids
    and the rest are test ids whose singles become queries. ``"closed"`` trains
    on every id and holds out the last ``query_per_id`` singles of each as
    queries. Distractors use fresh identities numbered from
    ``cfg.ids`` upward, so they never match a query. Every sample draws from
    its own random stream derived from ``(seed, kind, index)``.
    """
    closed = cfg.id_split == "closed"
    n_train = cfg.ids if closed else int(round(cfg.ids * cfg.train_id_frac))
    if n_train < cfg.persons_per_multi or (not closed and cfg.ids - n_train < cfg.persons_per_multi):
        raise GenerationError("both id splits need at least persons_per_multi identities")
    specs = {pid: synth_identity(cfg.seed, pid) for pid in range(cfg.ids + cfg.distractors)}
    for pid in range(cfg.ids):
        for k in range(cfg.singles_per_id):
            if closed:
                split = "query" if k >= cfg.singles_per_id - cfg.query_per_id else "train"
            else:
                split = "train" if pid < n_train else "query"
            rng = _stream(cfg.seed, 1, pid * 100003 + k)
            yield f"s{pid:04d}_{k:03d}.png", split, render_single(specs[pid], rng, cfg.size)
    n_train_multi = int(round(cfg.multis * cfg.multi_train_frac))
    for m in range(cfg.multis):
        rng = _stream(cfg.seed, 2, m)
        train = m < n_train_multi
        if closed:
            pool = np.arange(cfg.ids)
        else:
            pool = np.arange(n_train) if train else np.arange(n_train, cfg.ids)
        pids = rng.choice(pool, size=cfg.persons_per_multi, replace=False)
        singles = [render_single(specs[int(p)], rng, cfg.size) for p in pids]
        sample = compose_multi(singles[0], singles[1], rng, singles[2:], cfg.size, cfg.multi_scale)
        yield f"m{m:05d}.png", "train" if train else "gallery", sample
    for d in range(cfg.distractors):
        rng = _stream(cfg.seed, 3, d)
        yield f"d{d:05d}.png", "distractor", render_single(specs[cfg.ids + d], rng, cfg.size)


def write_dataset(cfg: SynthConfig, out) -> DatasetManifest:
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for file, split, sample in synthesize(cfg):
        save_image(out / "images" / file, sample.image)
        entries.append(entry_from_sample(f"images/{file}", split, sample))
    manifest = DatasetManifest(out, entries)
    write_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# Real Re-ID directories
# ---------------------------------------------------------------------------

_REID_NAME = re.compile(
    r"^(?P<pid>-?\d+)_c?(?P<cam>\d+)(?:s\d+)?_(?P<seq>\w+)\.(?:jpe?g|png|bmp)$", re.IGNORECASE
)
_SUBDIR_SPLITS = {
    "bounding_box_train": "train",
    "train": "train",
    "query": "query",
    "bounding_box_test": "gallery",
    "gallery": "gallery",
    "test": "gallery",
}


def ingest_reid_dir(path, split="train") -> DatasetManifest:
    """Build a manifest from ``<personid>_<camid>_<seq>.<ext>`` images.

    Market-1501 style subdirectories (``bounding_box_train``, ``query``,
    ``bounding_box_test``) are mapped to splits; otherwise every image in
    ``path`` gets ``split``. Gallery images with id <= 0 become distractors.
    Files that do not parse are skipped and counted in ``manifest.skipped``.
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"not a directory: {root}")
    sources = [(root / d, s) for d, s in _SUBDIR_SPLITS.items() if (root / d).is_dir()]
    if not sources:
        sources = [(root, split)]
    entries, seen, skipped = [], set(), 0
    for folder, fsplit in sources:
        for name in sorted(os.listdir(folder)):
            if (folder / name).is_dir():
                continue
            m = _REID_NAME.match(name)
            if m is None:
                skipped += 1
                continue
            if name in seen:
                raise IngestionError(f"duplicate image name {name!r}")
            seen.add(name)
            pid = int(m["pid"])
            esplit = "distractor" if fsplit == "gallery" and pid <= 0 else fsplit
            rel = (folder / name).relative_to(root).as_posix()
            entries.append(
                ManifestEntry(rel, esplit, (PersonBox(pid, 0.0, 0.0, 1.0, 1.0),), int(m["cam"]))
            )
    if not entries:
        raise IngestionError(f"no Re-ID images found in {root} ({skipped} files skipped)")
    if skipped:
        log.warning("skipped %d files with unrecognised names in %s", skipped, root)
    return DatasetManifest(root, entries, skipped)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class TrainBatch:
    """Entry indices per tuple plus the layout used for feature corruption."""

    galleries: list
    query_a: list
    query_b: list
    sources: list
    layouts: list
    ids_a: list
    ids_b: list

    def __len__(self):
        return len(self.galleries)


class BatchSampler:
    """Samples MPSL-aware tuples from a manifest split.

    The guided identity is drawn uniformly over eligible ids, i.e. ids that
    have single-person exemplars and share a multi-person crop with another
    such id.
    """

    def __init__(self, manifest: DatasetManifest, split="train"):
        self.manifest = manifest
        idx = manifest.select(split)
        entries = manifest.entries
        self.singles = defaultdict(list)
        for i in idx:
            if entries[i].kind == "single":
                self.singles[entries[i].ids[0]].append(i)
        self.all_singles = [i for i in idx if entries[i].kind == "single"]
        self.layout_pool = [i for i in idx if entries[i].kind == "multi"]
        self.galleries_of = defaultdict(list)
        for i in self.layout_pool:
            usable = [p for p in entries[i].ids if p in self.singles]
            if len(set(usable)) >= 2:
                for p in set(usable):
                    self.galleries_of[p].append(i)
        self.eligible = sorted(self.galleries_of)
        if not self.eligible:
            raise BatchError(
                f"split {split!r} has no multi-person crop with two identities that have "
                f"single-person exemplars (need 1, found 0 among {len(self.layout_pool)} crops)"
            )

    def sample(self, batch_size: int, rng) -> TrainBatch:
        entries = self.manifest.entries
        out = TrainBatch([], [], [], [], [], [], [])
        for _ in range(batch_size):
            pid_a = self.eligible[rng.integers(len(self.eligible))]
            cands = self.galleries_of[pid_a]
            g = cands[rng.integers(len(cands))]
            others = sorted({p for p in entries[g].ids if p != pid_a and p in self.singles})
            pid_b = others[rng.integers(len(others))]
            qa = self.singles[pid_a][rng.integers(len(self.singles[pid_a]))]
            qb = self.singles[pid_b][rng.integers(len(self.singles[pid_b]))]
            # eligibility guarantees a second identity with singles, so this terminates
            src = self.all_singles[rng.integers(len(self.all_singles))]
            while entries[src].ids[0] == pid_a:
                src = self.all_singles[rng.integers(len(self.all_singles))]
            lay = entries[self.layout_pool[rng.integers(len(self.layout_pool))]]
            z = tuple(int(i) for i in rng.permutation(len(lay.persons)))
            out.galleries.append(g)
            out.query_a.append(qa)
            out.query_b.append(qb)
            out.sources.append(src)
            out.layouts.append(BoxLayout(lay.persons, z))
            out.ids_a.append(pid_a)
            out.ids_b.append(pid_b)
        return out


def build_batch(manifest: DatasetManifest, batch_size: int, rng, split="train") -> TrainBatch:
    return BatchSampler(manifest, split).sample(batch_size, rng)
