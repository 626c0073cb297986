"""Procedural landmark scenes, two-view rendering, perturbations and pair sampling.

Each landmark identity owns a seeded texture: a background colour with a
few stripes, rotated rectangles and disks on top, defined on the square
[-1, 1]^2. A view samples that texture through a small random zoom and
shift, then applies per-view brightness and saturation changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Frame, Patch

LUMA = np.array([0.299, 0.587, 0.114])
PSNR_SENTINEL = 99.0


@dataclass(frozen=True)
class SceneSpec:
    n_landmarks: int
    positions: tuple[tuple[float, float], ...]
    identity_seeds: tuple[int, ...]
    scene_seed: int
    scene_id: int = 0

    def __post_init__(self):
        if self.n_landmarks < 2:
            raise ValueError("a scene needs at least 2 landmarks")
        if len(self.positions) != self.n_landmarks or len(self.identity_seeds) != self.n_landmarks:
            raise ValueError("positions and identity_seeds must have n_landmarks entries")
        if len(set(map(tuple, self.positions))) != self.n_landmarks:
            raise ValueError("landmark positions must be distinct")


@dataclass
class Texture:
    background: np.ndarray
    layers: list[tuple] = field(default_factory=list)

    def evaluate(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """RGB values at canonical coordinates; returns ``[3, *u.shape]``."""
        img = np.broadcast_to(self.background[:, None, None], (3,) + u.shape).copy()
        for kind, color, *prm in self.layers:
            if kind == "stripes":
                angle, freq, phase, duty = prm
                s = u * np.cos(angle) + v * np.sin(angle)
                mask = np.mod(s * freq + phase, 1.0) < duty
            elif kind == "rect":
                cx, cy, hw, hh, angle = prm
                du, dv = u - cx, v - cy
                ru = du * np.cos(angle) + dv * np.sin(angle)
                rv = -du * np.sin(angle) + dv * np.cos(angle)
                mask = (np.abs(ru) < hw) & (np.abs(rv) < hh)
            else:  # disk
                cx, cy, r = prm
                mask = (u - cx) ** 2 + (v - cy) ** 2 < r * r
            img = np.where(mask[None], color[:, None, None], img)
        return img


def make_texture(identity_seed: int) -> Texture:
    rng = np.random.default_rng(np.random.SeedSequence([0x524D4154, identity_seed]))
    tex = Texture(rng.uniform(0.0, 1.0, 3))
    for _ in range(int(rng.integers(3, 6))):
        kind = rng.choice(["stripes", "rect", "disk"])
        color = rng.uniform(0.0, 1.0, 3)
        if kind == "stripes":
            tex.layers.append(("stripes", color, rng.uniform(0, np.pi), rng.uniform(0.6, 1.6),
                               rng.uniform(0, 1), rng.uniform(0.3, 0.6)))
        elif kind == "rect":
            tex.layers.append(("rect", color, *rng.uniform(-0.5, 0.5, 2), *rng.uniform(0.15, 0.5, 2),
                               rng.uniform(0, np.pi)))
        else:
            tex.layers.append(("disk", color, *rng.uniform(-0.5, 0.5, 2), rng.uniform(0.15, 0.45)))
    return tex


def sample_texture(tex: Texture, side: int, zoom: float = 1.0, shift: tuple[float, float] = (0.0, 0.0),
                   supersample: int = 2) -> np.ndarray:
    """Render ``tex`` to a ``[3, side, side]`` patch; ``shift`` is in patch pixels."""
    n = side * supersample
    grid = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    step = 2.0 / side
    u = (grid[None, :] + shift[0] * step) / zoom
    v = (grid[:, None] + shift[1] * step) / zoom
    img = tex.evaluate(np.broadcast_to(u, (n, n)), np.broadcast_to(v, (n, n)))
    img = img.reshape(3, side, supersample, side, supersample).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0)


@dataclass
class Scene:
    spec: SceneSpec
    textures: list[Texture]

    @property
    def identities(self) -> tuple[int, ...]:
        return self.spec.identity_seeds


def gen_scene(spec: SceneSpec) -> Scene:
    return Scene(spec, [make_texture(s) for s in spec.identity_seeds])


def random_scene_spec(scene_id: int, n_landmarks: int, plane_size: float, min_separation: float,
                      seed: int) -> SceneSpec:
    """Positions by rejection sampling; identities are unique per (scene, slot)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, scene_id, 1]))
    margin = 0.1 * plane_size
    pts: list[tuple[float, float]] = []
    tries = 0
    while len(pts) < n_landmarks:
        tries += 1
        if tries > 10_000:
            raise ValueError("cannot place landmarks with the requested separation")
        p = rng.uniform(margin, plane_size - margin, 2)
        if all(np.hypot(*(p - q)) >= min_separation for q in pts):
            pts.append((float(p[0]), float(p[1])))
    identities = tuple(scene_id * n_landmarks + j for j in range(n_landmarks))
    return SceneSpec(n_landmarks, tuple(pts), identities, scene_seed=int(seed * 1_000_003 + scene_id), scene_id=scene_id)


@dataclass(frozen=True)
class RenderConfig:
    side: int = 32
    max_translation: float = 2.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    brightness_range: tuple[float, float] = (-0.08, 0.08)
    saturation_range: tuple[float, float] = (0.8, 1.2)
    noise_psnr: float | None = None
    center_jitter: float = 4.0
    plane_size: float = 256.0
    seed: int = 0

    def __post_init__(self):
        if self.side < 8:
            raise ValueError("patch side must be >= 8")
        if self.noise_psnr is not None and not 5 <= self.noise_psnr <= 60:
            raise ValueError("noise_psnr must lie in [5, 60] dB")


def render_frame(scene: Scene, view_id: int, cfg: RenderConfig, frame_id: int | None = None) -> Frame:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, scene.spec.scene_seed, view_id, 2]))
    fid = scene.spec.scene_id * 1000 + view_id if frame_id is None else frame_id
    brightness = rng.uniform(*cfg.brightness_range)
    saturation = rng.uniform(*cfg.saturation_range)
    view_shift = rng.uniform(-cfg.center_jitter, cfg.center_jitter, 2)
    patches = []
    for k, (pos, tex) in enumerate(zip(scene.spec.positions, scene.textures)):
        zoom = rng.uniform(*cfg.scale_range)
        shift = rng.uniform(-cfg.max_translation, cfg.max_translation, 2)
        local = rng.uniform(-0.25 * cfg.center_jitter, 0.25 * cfg.center_jitter, 2)
        img = sample_texture(tex, cfg.side, zoom, (float(shift[0]), float(shift[1])))
        img = _adjust(img, brightness, saturation)
        center = np.clip(np.asarray(pos) + view_shift + local, 0.0, cfg.plane_size)
        patch = Patch(img, (float(center[0]), float(center[1])), scene.identities[k], fid)
        if cfg.noise_psnr is not None:
            patch = perturb(patch, "gauss", cfg.noise_psnr, seed=int(rng.integers(2**32)))
        patches.append(patch)
    return Frame(fid, patches)


def _adjust(img: np.ndarray, brightness: float, saturation: float) -> np.ndarray:
    luma = np.tensordot(LUMA, img, axes=1)[None]
    out = luma + saturation * (img - luma) + brightness
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- perturbations


def gauss_sigma(psnr_db: float) -> float:
    """Noise std giving ``psnr_db`` against a unit peak, before clipping."""
    return 10.0 ** (-psnr_db / 20.0)


def perturb(patch: Patch, kind: str, level: float, seed: int = 0) -> Patch:
    """Return a perturbed copy of ``patch``.

    kinds: ``gauss`` (level = target PSNR in dB), ``brightness`` (additive
    offset), ``saturation`` (chroma scale about the luma), ``blockout``
    (side fraction of a zeroed rectangle).
    """
    rng = np.random.default_rng(seed)
    x = patch.pixels
    if kind == "gauss":
        if not 0 < level <= 100:
            raise ValueError(f"gauss level must be a PSNR in (0, 100] dB, got {level}")
        out = np.clip(x + gauss_sigma(level) * rng.standard_normal(x.shape), 0.0, 1.0)
    elif kind == "brightness":
        if not -1.0 <= level <= 1.0:
            raise ValueError(f"brightness offset must lie in [-1, 1], got {level}")
        out = np.clip(x + level, 0.0, 1.0)
    elif kind == "saturation":
        if level < 0:
            raise ValueError(f"saturation scale must be >= 0, got {level}")
        out = _adjust(x, 0.0, level)
    elif kind == "blockout":
        if not 0 < level <= 1:
            raise ValueError(f"blockout fraction must lie in (0, 1], got {level}")
        s = patch.side
        w = max(1, int(round(level * s)))
        r0, c0 = rng.integers(0, s - w + 1, 2)
        out = x.copy()
        out[:, r0 : r0 + w, c0 : c0 + w] = 0.0
    else:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    return patch.replace_pixels(out)


def psnr(clean: Patch | np.ndarray, noisy: Patch | np.ndarray) -> float:
    a = clean.pixels if isinstance(clean, Patch) else np.asarray(clean)
    b = noisy.pixels if isinstance(noisy, Patch) else np.asarray(noisy)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * np.log10(1.0 / mse)


# ---------------------------------------------------------------- pairs


@dataclass(frozen=True)
class PairRef:
    frame_a: int  # index into the frame list
    patch_a: int
    frame_b: int
    patch_b: int
    label: int


def make_pairs(frames: list[Frame], ratio: float = 1.0, seed: int = 0) -> list[PairRef]:
    """Positives: same identity in two distinct frames. Negatives: different
    identities drawn from the same frame pairs, ``ratio`` per positive."""
    if len(frames) < 2:
        raise ValueError("make_pairs needs at least 2 frames")
    rng = np.random.default_rng(seed)
    pairs: list[PairRef] = []
    for a in range(len(frames)):
        ids_a = {p.identity: i for i, p in enumerate(frames[a].patches)}
        for b in range(a + 1, len(frames)):
            ids_b = {p.identity: j for j, p in enumerate(frames[b].patches)}
            shared = sorted(set(ids_a) & set(ids_b) - {None})
            if not shared:
                continue
            pos = [PairRef(a, ids_a[k], b, ids_b[k], 1) for k in shared]
            cand = [(i, j) for i, pa in enumerate(frames[a].patches) for j, pb in enumerate(frames[b].patches)
                    if pa.identity != pb.identity]
            n_neg = min(len(cand), int(round(ratio * len(pos))))
            pick = rng.choice(len(cand), size=n_neg, replace=False) if n_neg else []
            neg = [PairRef(a, cand[c][0], b, cand[c][1], 0) for c in sorted(pick)]
            pairs.extend(pos + neg)
    if not any(p.label for p in pairs):
        raise ValueError("no identity appears in two distinct frames")
    return pairs
