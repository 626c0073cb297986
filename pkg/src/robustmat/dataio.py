"""Dataset generation and the on-disk dataset format.

A dataset directory holds ``manifest.json`` and ``patches.bin``.
``patches.bin`` starts with the magic ``RMAT`` and a little-endian u16
version, followed by one record per patch::

    u32 frame_id | u32 identity | f32 u | f32 v | u16 S | 3*S*S f32 pixels

all little-endian. Pixel values and centers are stored as float32, so
generated data is rounded to float32 up front and a write/read/write cycle
is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DatasetConfig
from .graph import Frame, Patch
from .synth import PairRef, RenderConfig, gen_scene, make_pairs, perturb, random_scene_spec, render_frame

MAGIC = b"RMAT"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
NO_IDENTITY = 0xFFFFFFFF
_HEADER = struct.Struct("<4sH")
_RECORD = struct.Struct("<IIffH")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}byte offset {offset}: {message}")
        self.offset = offset
        self.path = path


@dataclass
class Dataset:
    frames: list[Frame]
    pairs: list[PairRef]
    frame_scene: list[int]
    frame_split: list[str]
    config: dict = field(default_factory=dict)

    def split_pairs(self, split: str) -> list[PairRef]:
        return [p for p in self.pairs if self.frame_split[p.frame_a] == split]

    def scenes(self, split: str) -> list[int]:
        return sorted({s for s, sp in zip(self.frame_scene, self.frame_split) if sp == split})

    def with_frames(self, frames: list[Frame]) -> "Dataset":
        return Dataset(frames, self.pairs, self.frame_scene, self.frame_split, self.config)


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def render_config(cfg: DatasetConfig) -> RenderConfig:
    return RenderConfig(cfg.patch_side, cfg.max_translation, tuple(cfg.scale_range), tuple(cfg.brightness_range),
                        tuple(cfg.saturation_range), cfg.noise_psnr, cfg.center_jitter, cfg.plane_size, cfg.seed)


def generate_dataset(cfg: DatasetConfig) -> Dataset:
    rcfg = render_config(cfg)
    frames, scene_of, split_of, pairs = [], [], [], []
    for s in range(cfg.n_scenes):
        scene = gen_scene(random_scene_spec(s, cfg.n_landmarks, cfg.plane_size, cfg.min_separation, cfg.seed))
        views = []
        for v in range(cfg.n_views):
            fr = render_frame(scene, v, rcfg, frame_id=s * cfg.n_views + v)
            fr = Frame(fr.frame_id, [Patch(_f32(p.pixels), tuple(_f32(p.center)), p.identity, p.frame_id)
                                     for p in fr.patches])
            views.append(fr)
        base = len(frames)
        if cfg.n_views >= 2:
            seed = int(np.random.SeedSequence([cfg.seed, s, 3]).generate_state(1)[0])
            for p in make_pairs(views, cfg.pair_ratio, seed):
                pairs.append(PairRef(p.frame_a + base, p.patch_a, p.frame_b + base, p.patch_b, p.label))
        frames.extend(views)
        scene_of.extend([s] * cfg.n_views)
        split_of.extend(["train" if s < cfg.n_train_scenes else "test"] * cfg.n_views)
    return Dataset(frames, pairs, scene_of, split_of, cfg.model_dump(mode="json"))


def noisy_copy(ds: Dataset, psnr_db: float, seed: int = 0, kind: str = "gauss") -> Dataset:
    """Every patch perturbed independently with a seed derived from its position."""
    frames = []
    for fi, fr in enumerate(ds.frames):
        patches = [perturb(p, kind, psnr_db, seed=int(np.random.SeedSequence([seed, fi, pi]).generate_state(1)[0]))
                   for pi, p in enumerate(fr.patches)]
        frames.append(Frame(fr.frame_id, patches))
    return ds.with_frames(frames)


# ---------------------------------------------------------------- files


def write_dataset(directory: str | Path, ds: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = bytearray(_HEADER.pack(MAGIC, FORMAT_VERSION))
    frame_records = []
    for fi, fr in enumerate(ds.frames):
        recs = []
        for p in fr.patches:
            offset = len(blob)
            ident = NO_IDENTITY if p.identity is None else int(p.identity)
            blob += _RECORD.pack(fr.frame_id, ident, p.center[0], p.center[1], p.side)
            blob += np.ascontiguousarray(p.pixels, dtype="<f4").tobytes()
            c = np.asarray(p.center, dtype=np.float32)
            recs.append({"offset": offset, "center": [float(c[0]), float(c[1])],
                         "identity": None if p.identity is None else int(p.identity)})
        frame_records.append({"frame_id": fr.frame_id, "scene": ds.frame_scene[fi], "split": ds.frame_split[fi],
                              "patches": recs})
    manifest = {
        "version": MANIFEST_VERSION,
        "config": ds.config,
        "frames": frame_records,
        "pairs": [[p.frame_a, p.patch_a, p.frame_b, p.patch_b, p.label] for p in ds.pairs],
    }
    (d / "patches.bin").write_bytes(bytes(blob))
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_patches(path: Path) -> dict[int, tuple]:
    data = path.read_bytes()
    name = str(path)
    if len(data) < _HEADER.size:
        raise DatasetFormatError("file shorter than the header", 0, name)
    magic, version = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0, name)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4, name)
    records = {}
    pos = _HEADER.size
    while pos < len(data):
        if pos + _RECORD.size > len(data):
            raise DatasetFormatError("truncated record header", pos, name)
        frame_id, ident, u, v, side = _RECORD.unpack_from(data, pos)
        n = 3 * side * side
        end = pos + _RECORD.size + 4 * n
        if side == 0 or end > len(data):
            raise DatasetFormatError(f"truncated pixel block (side {side})", pos, name)
        px = np.frombuffer(data, dtype="<f4", count=n, offset=pos + _RECORD.size).astype(np.float64)
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise DatasetFormatError("pixel values outside [0, 1]", pos, name)
        records[pos] = (frame_id, None if ident == NO_IDENTITY else ident, (float(u), float(v)),
                        px.reshape(3, side, side))
        pos = end
    return records


def read_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    records = _read_patches(d / "patches.bin")
    mpath = d / "manifest.json"
    raw = mpath.read_bytes()
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"manifest is not valid JSON: {exc}", getattr(exc, "pos", 0), str(mpath)) from None
    if not isinstance(manifest, dict) or manifest.get("version") != MANIFEST_VERSION:
        version = manifest.get("version") if isinstance(manifest, dict) else None
        raise DatasetFormatError(f"unsupported manifest version {version!r}", 0, str(mpath))
    try:
        return _assemble(manifest, records, d)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"malformed manifest: {type(exc).__name__}: {exc}", 0, str(mpath)) from None


def _assemble(manifest: dict, records: dict[int, tuple], d: Path) -> Dataset:
    mpath = d / "manifest.json"
    frames, scene_of, split_of = [], [], []
    for fr in manifest["frames"]:
        patches = []
        for rec in fr["patches"]:
            off = rec["offset"]
            if off not in records:
                raise DatasetFormatError("manifest offset does not start a patch record", off, str(d / "patches.bin"))
            frame_id, ident, center, px = records[off]
            if frame_id != fr["frame_id"] or ident != rec["identity"]:
                raise DatasetFormatError("record disagrees with manifest", off, str(d / "patches.bin"))
            patches.append(Patch(px, center, ident, frame_id))
        frames.append(Frame(fr["frame_id"], patches))
        scene_of.append(fr["scene"])
        split_of.append(fr["split"])
    pairs = []
    for fa, ia, fb, ib, label in manifest["pairs"]:
        if label not in (0, 1):
            raise DatasetFormatError(f"pair label {label!r} not in {{0, 1}}", 0, str(mpath))
        if not (0 <= fa < len(frames) and 0 <= fb < len(frames)
                and 0 <= ia < len(frames[fa]) and 0 <= ib < len(frames[fb])):
            raise DatasetFormatError(f"pair references a missing patch: {[fa, ia, fb, ib]}", 0, str(mpath))
        pairs.append(PairRef(fa, ia, fb, ib, label))
    return Dataset(frames, pairs, scene_of, split_of, manifest["config"])
