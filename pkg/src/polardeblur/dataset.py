"""Synthetic paired blurry/sharp polarized corpora and their on-disk format.

Layout::

    <root>/manifest.txt
    <root>/<split>/<scene_id>/{sharp,blurry}_{i000,i045,i090,i135,unpol}.png
    <root>/<split>/<scene_id>/meta.txt

Images are 16-bit linear RGB PNGs. Every image in a record is snapped to the
16-bit grid when the record is built, so writing and reading are exact.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import config as cfgmod
from .blur_synth import (
    DEFAULT_LATENT_FRAMES,
    NoiseModel,
    TrajectoryParams,
    generate_trajectory,
    synthesize_blurry_scene,
)
from .errors import ConfigError, IntegrityError
from .polar_core import ANGLE_KEYS, PolarizedImageSet, render_polarized_set, validate_physical
from .scenes import generate_procedural_scene

FORMAT_VERSION = 1
QMAX = 65535
SPLITS = ("train", "test")
IMAGE_NAMES = tuple(f"{kind}_{k}" for kind in ("sharp", "blurry") for k in (*ANGLE_KEYS, "unpol"))
_SPLIT_CODE = {"train": 0, "test": 1}


@dataclass
class DatasetConfig:
    scenes_train: int = 400
    scenes_test: int = 30
    traj_per_scene_train: int = 20
    traj_per_scene_test: int = 10
    crop_train: int = 256
    crop_test: int = 512
    scene_margin: int = 16
    latent_frames: int = DEFAULT_LATENT_FRAMES
    augment: bool = True
    root_seed: int = 0
    traj: TrajectoryParams = field(default_factory=TrajectoryParams)
    noise: NoiseModel = field(default_factory=NoiseModel)

    def validate(self):
        for name in ("scenes_train", "scenes_test", "traj_per_scene_train", "traj_per_scene_test",
                     "scene_margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.latent_frames < 1:
            raise ConfigError("latent_frames must be >= 1")
        for split in SPLITS:
            if self.crop(split) < 8:
                raise ConfigError(f"crop_{split} too small")
        self.traj.validate()

    def crop(self, split):
        return self.crop_train if split == "train" else self.crop_test

    def scenes(self, split):
        return self.scenes_train if split == "train" else self.scenes_test

    def traj_per_scene(self, split):
        return self.traj_per_scene_train if split == "train" else self.traj_per_scene_test


def load_dataset_config(path=None, overrides: dict | None = None) -> DatasetConfig:
    values = cfgmod.read_kv(path) if path else {}
    values.update(overrides or {})
    cfg = cfgmod.apply_overrides(DatasetConfig(), values)
    cfg.validate()
    return cfg


def derive_seed(*parts: int) -> int:
    """Independent 32-bit seed for a (root, split, scene, ...) tuple."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --- 16-bit grid -----------------------------------------------------------

def quantize(img) -> np.ndarray:
    return (np.clip(np.round(np.asarray(img, dtype=np.float64) * QMAX), 0, QMAX) / QMAX).astype(np.float32)


def snap_polarized_set(pset: PolarizedImageSet) -> PolarizedImageSet:
    """Put a set on the 16-bit grid with i000+i090 == i045+i135 exactly."""
    q = [np.clip(np.round(np.asarray(a, dtype=np.float64) * QMAX), 0, QMAX) for a in pset.images()]
    q[3] = np.clip(q[0] + q[2] - q[1], 0, QMAX)
    return PolarizedImageSet(*[(a / QMAX).astype(np.float32) for a in q])


# --- augmentation ----------------------------------------------------------

def _flip_set(pset):
    # mirroring maps polarizer angle a -> -a: 45 and 135 trade places
    f = lambda a: np.ascontiguousarray(a[:, ::-1])  # noqa: E731
    return PolarizedImageSet(f(pset.i000), f(pset.i135), f(pset.i090), f(pset.i045))


def _rot90_set(pset):
    # a quarter turn maps a -> a + 90: (0, 45, 90, 135) <- (90, 135, 0, 45)
    r = lambda a: np.ascontiguousarray(np.rot90(a, 1, axes=(0, 1)))  # noqa: E731
    return PolarizedImageSet(r(pset.i090), r(pset.i135), r(pset.i000), r(pset.i045))


def augment_set(pset: PolarizedImageSet, rot90: int, flip: bool) -> PolarizedImageSet:
    if flip:
        pset = _flip_set(pset)
    for _ in range(rot90 % 4):
        pset = _rot90_set(pset)
    return pset


def augment_image(img, rot90: int, flip: bool):
    if flip:
        img = img[:, ::-1]
    return np.ascontiguousarray(np.rot90(img, rot90 % 4, axes=(0, 1)))


# --- records ---------------------------------------------------------------

@dataclass
class SceneRecord:
    scene_id: str
    sharp_set: PolarizedImageSet
    blurry_set: PolarizedImageSet
    sharp_unpolarized: np.ndarray
    blurry_unpolarized: np.ndarray
    meta: dict

    def images(self) -> dict[str, np.ndarray]:
        out = {}
        for kind, pset, unpol in (("sharp", self.sharp_set, self.sharp_unpolarized),
                                  ("blurry", self.blurry_set, self.blurry_unpolarized)):
            for key, img in zip(ANGLE_KEYS, pset.images()):
                out[f"{kind}_{key}"] = img
            out[f"{kind}_unpol"] = unpol
        return out

    @property
    def border_margin(self) -> int:
        return int(self.meta.get("border_margin", 0))


@dataclass(frozen=True)
class RecordSpec:
    split: str
    scene_index: int
    traj_index: int

    @property
    def scene_id(self):
        return f"s{self.scene_index:04d}_t{self.traj_index:02d}"


def plan_records(cfg: DatasetConfig, split: str) -> list[RecordSpec]:
    return [RecordSpec(split, i, j) for i in range(cfg.scenes(split)) for j in range(cfg.traj_per_scene(split))]


def _scene_fields(cfg, split, scene_index):
    seed = derive_seed(cfg.root_seed, _SPLIT_CODE[split], scene_index)
    size = cfg.crop(split) + 2 * cfg.scene_margin
    intensity, dolp, aolp = generate_procedural_scene(seed, size, size)
    sharp = snap_polarized_set(render_polarized_set(intensity, dolp, aolp))
    return seed, sharp


def make_record(cfg: DatasetConfig, spec: RecordSpec, _scene_cache=None) -> SceneRecord:
    """Deterministically build one record from the config and its spec."""
    key = (spec.split, spec.scene_index)
    if _scene_cache is not None and key in _scene_cache:
        scene_seed, sharp_full = _scene_cache[key]
    else:
        scene_seed, sharp_full = _scene_fields(cfg, spec.split, spec.scene_index)
        if _scene_cache is not None:
            _scene_cache.clear()
            _scene_cache[key] = (scene_seed, sharp_full)

    rec_seed = derive_seed(cfg.root_seed, _SPLIT_CODE[spec.split], spec.scene_index, spec.traj_index)
    traj = generate_trajectory(derive_seed(rec_seed, 1), cfg.latent_frames, cfg.traj)
    blurry_full, blurry_unpol_full, bmeta = synthesize_blurry_scene(
        sharp_full, traj, cfg.noise, derive_seed(rec_seed, 2)
    )
    sharp_unpol_full = quantize(0.5 * sum(np.asarray(a, np.float64) for a in sharp_full.images()))

    rng = np.random.default_rng(derive_seed(rec_seed, 3))
    crop = cfg.crop(spec.split)
    oy, ox = (int(v) for v in rng.integers(0, 2 * cfg.scene_margin + 1, size=2))
    cut = lambda a: np.ascontiguousarray(a[oy:oy + crop, ox:ox + crop])  # noqa: E731

    sharp = sharp_full.map(cut)
    blurry = blurry_full.map(cut).map(quantize)
    sharp_unpol = cut(sharp_unpol_full)
    blurry_unpol = quantize(cut(blurry_unpol_full))

    rot90, flip = 0, False
    if spec.split == "train" and cfg.augment:
        rot90, flip = int(rng.integers(0, 4)), bool(rng.integers(0, 2))
        sharp, blurry = augment_set(sharp, rot90, flip), augment_set(blurry, rot90, flip)
        sharp_unpol = augment_image(sharp_unpol, rot90, flip)
        blurry_unpol = augment_image(blurry_unpol, rot90, flip)

    meta = {
        "format_version": FORMAT_VERSION,
        "scene_id": spec.scene_id,
        "split": spec.split,
        "scene_index": spec.scene_index,
        "traj_index": spec.traj_index,
        "scene_seed": scene_seed,
        "record_seed": rec_seed,
        "crop_offset": [oy, ox],
        "crop": crop,
        "augment_rot90": rot90,
        "augment_flip": flip,
        **bmeta,
        "config": cfgmod.flatten(cfg),
    }
    return SceneRecord(spec.scene_id, sharp, blurry, sharp_unpol, blurry_unpol, meta)


def regenerate_record(meta: dict) -> SceneRecord:
    cfg = load_dataset_config(overrides=dict(meta["config"]))
    return make_record(cfg, RecordSpec(meta["split"], int(meta["scene_index"]), int(meta["traj_index"])))


# --- storage ---------------------------------------------------------------

def _write_png16(path: Path, img):
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[..., None]
    q = np.clip(np.round(arr.astype(np.float64) * QMAX), 0, QMAX).astype(np.uint16)
    if q.shape[-1] == 3:
        q = q[..., ::-1]  # RGB -> BGR for OpenCV
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"failed to write {path}")


def write_png16(path, img):
    """Atomically write a [0, 1] float image as 16-bit PNG."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(suffix=".png", dir=path.parent)
    os.close(fd)
    try:
        _write_png16(Path(tmp), img)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_png16(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"missing image file: {path}")
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None or arr.dtype != np.uint16:
        raise IntegrityError(f"unreadable or non-16-bit image: {path}")
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    return (arr.astype(np.float64) / QMAX).astype(np.float32)


def format_meta(meta: dict) -> str:
    return "".join(f"{k}={json.dumps(v, sort_keys=True)}\n" for k, v in meta.items())


def parse_meta(text: str, source="meta.txt") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise IntegrityError(f"{source}:{lineno}: malformed line")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            raise IntegrityError(f"{source}:{lineno}: malformed value for {key}") from None
    return out


def write_scene(record: SceneRecord, split_dir) -> Path:
    """Write a record as ``<split_dir>/<scene_id>/``; the directory appears atomically."""
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    final = split_dir / record.scene_id
    tmp = Path(tempfile.mkdtemp(prefix=f".{record.scene_id}.", dir=split_dir))
    try:
        for name, img in record.images().items():
            _write_png16(tmp / f"{name}.png", img)
        (tmp / "meta.txt").write_text(format_meta(record.meta))
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    return final


def read_scene(path) -> SceneRecord:
    path = Path(path)
    if not path.is_dir():
        raise IntegrityError(f"scene directory not found: {path}")
    meta_path = path / "meta.txt"
    if not meta_path.is_file():
        raise IntegrityError(f"missing meta file: {meta_path}")
    meta = parse_meta(meta_path.read_text(), str(meta_path))
    imgs = {name: read_png16(path / f"{name}.png") for name in IMAGE_NAMES}
    shapes = {a.shape for a in imgs.values()}
    if len(shapes) != 1:
        raise IntegrityError(f"images in {path} differ in shape: {sorted(shapes)}")
    return SceneRecord(
        scene_id=meta.get("scene_id", path.name),
        sharp_set=PolarizedImageSet(*[imgs[f"sharp_{k}"] for k in ANGLE_KEYS]),
        blurry_set=PolarizedImageSet(*[imgs[f"blurry_{k}"] for k in ANGLE_KEYS]),
        sharp_unpolarized=imgs["sharp_unpol"],
        blurry_unpolarized=imgs["blurry_unpol"],
        meta=meta,
    )


def read_blurry_inputs(path):
    """Blurry set plus meta from a scene directory (sharp files optional)."""
    path = Path(path)
    pset = PolarizedImageSet(*[read_png16(path / f"blurry_{k}.png") for k in ANGLE_KEYS])
    meta_path = path / "meta.txt"
    meta = parse_meta(meta_path.read_text(), str(meta_path)) if meta_path.is_file() else {}
    return pset, meta


# --- manifest --------------------------------------------------------------

@dataclass
class DatasetManifest:
    version: int
    split: str
    scene_ids: list[str]
    paths: list[str]
    crop: int
    augmentation: str
    root_seed: int

    def __len__(self):
        return len(self.scene_ids)


def format_manifest(manifests: dict[str, DatasetManifest]) -> str:
    first = next(iter(manifests.values()))
    lines = [f"version={first.version}", f"root_seed={first.root_seed}"]
    for split, m in manifests.items():
        lines += [f"crop.{split}={m.crop}", f"augmentation.{split}={m.augmentation}"]
    for split, m in manifests.items():
        lines += [f"record={p}" for p in m.paths]
    return "\n".join(lines) + "\n"


def load_manifest(root) -> dict[str, DatasetManifest]:
    root = Path(root)
    path = root / "manifest.txt"
    if not path.is_file():
        raise IntegrityError(f"missing manifest: {path}")
    header, records = {}, []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise IntegrityError(f"{path}:{lineno}: malformed line")
        if key == "record":
            records.append(value)
        else:
            header[key] = value
    try:
        version, root_seed = int(header["version"]), int(header["root_seed"])
    except (KeyError, ValueError):
        raise IntegrityError(f"{path}: bad or missing version/root_seed") from None
    out = {}
    for split in SPLITS:
        paths = [r for r in records if r.split("/", 1)[0] == split]
        ids = [p.split("/", 1)[1] for p in paths]
        if len(set(ids)) != len(ids):
            raise IntegrityError(f"{path}: duplicate scene ids in split {split}")
        for p in paths:
            if not (root / p / "meta.txt").is_file():
                raise IntegrityError(f"manifest references missing scene {root / p}")
        if f"crop.{split}" in header or paths:
            out[split] = DatasetManifest(version, split, ids, paths, int(header.get(f"crop.{split}", 0)),
                                         header.get(f"augmentation.{split}", "none"), root_seed)
    return out


def load_split(root, split="train") -> list[SceneRecord]:
    manifests = load_manifest(root)
    if split not in manifests:
        raise IntegrityError(f"dataset at {root} has no {split!r} split")
    return [read_scene(Path(root) / p) for p in manifests[split].paths]


def declared_record_count(cfg: DatasetConfig, split: str) -> int:
    return cfg.scenes(split) * cfg.traj_per_scene(split)


def build_dataset(cfg: DatasetConfig, root, splits=SPLITS, check=True) -> dict[str, DatasetManifest]:
    """Materialize every record of ``splits`` under ``root`` and publish the manifest."""
    cfg.validate()
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise IntegrityError(f"cannot write dataset to {root}: {exc}") from exc

    manifests = {}
    for split in splits:
        cache: dict = {}
        paths = []
        for spec in plan_records(cfg, split):
            rec = make_record(cfg, spec, cache)
            if check:
                report = validate_physical(rec.sharp_set, 1e-5)
                if not report.passed:
                    raise IntegrityError(f"{spec.scene_id}: sharp set violates physics: {report.lines()}")
            write_scene(rec, root / split)
            paths.append(f"{split}/{spec.scene_id}")
        aug = "dihedral" if (split == "train" and cfg.augment) else "none"
        manifests[split] = DatasetManifest(FORMAT_VERSION, split, [p.split("/")[1] for p in paths], paths,
                                           cfg.crop(split), aug, cfg.root_seed)

    cfgmod.write_text_atomic(root / "dataset_config.txt", cfgmod.dump_kv(cfgmod.flatten(cfg)))
    cfgmod.write_text_atomic(root / "manifest.txt", format_manifest(manifests))
    return manifests
