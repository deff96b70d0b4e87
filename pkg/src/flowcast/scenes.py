"""Synthetic scene generator: moving sprites over banded backgrounds.

Sequences come with exact per-frame labels, exact consecutive-frame flow, and
a per-pair disocclusion mask enumerating the pixels where warping the current
frame cannot reproduce the next one (newly revealed background, sprite leading
edges, samples that leave the frame). Sprite centers follow
``p(t) = p0 + v*t + 0.5*a*t**2`` rounded to the pixel grid, so consecutive
flows are integer-valued and warp consistency is exact rather than

approximate.

Flow files store the forward flow t -> t+1 on the frame-t grid. The transform
the warp layer needs (an offset per *target* pixel) is the negated forward
flow indexed at target coordinates; ``sampling_flow`` applies it. Both
conventions agree wherever motion is locally rigid, and the pixels where they
do not are exactly the generator's disocclusion set.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigError, DataError, GenerationError

NOISE_AMP = 0.05
_MAX_SPRITE_TRIES = 200
_MAX_SCENE_TRIES = 20
_MIN_VISIBLE_FRACTION = 0.5
_MIN_CLASS_FRACTION = 0.005

_PALETTE = np.array(
    [
        [0.35, 0.45, 0.85],
        [0.35, 0.65, 0.30],
        [0.85, 0.25, 0.25],
        [0.90, 0.75, 0.20],
        [0.60, 0.30, 0.70],
        [0.20, 0.75, 0.75],
        [0.85, 0.50, 0.20],
        [0.55, 0.55, 0.55],
    ]
)


def class_color(class_id: int) -> np.ndarray:
    return _PALETTE[class_id % len(_PALETTE)]


@dataclass(frozen=True)
class SpriteInit:
    """Explicit sprite placement; used by oracle scenes and tests."""

    class_id: int
    shape: str  # "rectangle" | "disc"
    size: int  # half-extent (rectangle) or radius (disc), px
    p0: tuple[float, float]  # (y, x) center at t=0
    v: tuple[float, float] = (0.0, 0.0)  # (vy, vx) px/frame
    a: tuple[float, float] = (0.0, 0.0)  # (ay, ax) px/frame^2


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    width: int = 128
    height: int = 64
    num_frames: int = 20
    # (class_id, moving) pairs; ids must be dense 0..C-1
    classes: tuple[tuple[int, bool], ...] = (
        (0, False),
        (1, False),
        (2, True),
        (3, True),
        (4, True),
        (5, True),
    )
    num_sprites: int = 4
    shapes: tuple[str, ...] = ("rectangle", "disc")
    speed_range: tuple[float, float] = (0.5, 2.0)  # px/frame
    accel_range: tuple[float, float] = (0.0, 0.05)  # px/frame^2
    size_range: tuple[int, int] = (4, 8)  # px half-extent / radius
    background_bands: tuple[int, ...] = (0, 1)  # static classes, top to bottom
    # optional explicit sprites; overrides random placement when non-empty
    sprites: tuple[SpriteInit, ...] = ()

    @property
    def moving_classes(self) -> tuple[int, ...]:
        return tuple(cid for cid, moving in self.classes if moving)

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def validate_spec(spec: SceneSpec) -> None:
    ids = sorted(cid for cid, _ in spec.classes)
    if ids != list(range(len(ids))):
        raise ConfigError(f"class ids must be dense 0..C-1, got {ids}")
    if len(spec.moving_classes) < 2:
        raise ConfigError("need at least 2 moving classes")
    if spec.num_frames < 2:
        raise ConfigError("need at least 2 frames for one flow pair")
    if spec.width < 8 or spec.height < 8:
        raise ConfigError(f"canvas {spec.width}x{spec.height} too small")
    static = {cid for cid, moving in spec.classes if not moving}
    if not spec.background_bands or set(spec.background_bands) != static:
        raise ConfigError(
            f"background bands {spec.background_bands} must cover exactly the static classes {sorted(static)}"
        )
    if spec.sprites:
        for s in spec.sprites:
            if s.class_id not in spec.moving_classes:
                raise ConfigError(f"sprite class {s.class_id} is not a moving class")
            if s.shape not in ("rectangle", "disc"):
                raise ConfigError(f"unknown sprite shape {s.shape!r}")
    elif spec.num_sprites < len(spec.moving_classes):
        raise ConfigError(
            f"{spec.num_sprites} sprites cannot cover {len(spec.moving_classes)} moving classes"
        )


@dataclass
class _Sprite:
    class_id: int
    offsets: np.ndarray  # (K, 2) int local (dy, dx) pixel offsets
    noise: np.ndarray  # (K,) per-pixel texture jitter
    positions: np.ndarray  # (T, 2) int rounded (y, x) centers


@dataclass(eq=False)
class SceneSequence:
    spec: SceneSpec
    frames: list  # (3, H, W) float64 in [0, 1], quantized to 255ths
    labels: list  # (H, W) uint8
    flows: list  # (2, H, W) float32, forward flow t -> t+1
    disocclusion: list  # (H, W) uint8 {0, 1}, on the t+1 grid
    # generator-only state, not persisted; regenerated on demand from spec
    owners: list | None = None  # (H, W) int16: sprite index, or -(band+1)
    sprites: list | None = None  # list[_Sprite]


def _sprite_offsets(shape: str, size: int) -> np.ndarray:
    r = np.arange(-size, size + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    if shape == "rectangle":
        keep = np.ones_like(dy, dtype=bool)
    else:  # disc
        keep = dy * dy + dx * dx <= size * size
    return np.stack([dy[keep], dx[keep]], axis=1)


def _round_positions(p0, v, a, num_frames: int) -> np.ndarray:
    t = np.arange(num_frames, dtype=np.float64)[:, None]
    exact = np.asarray(p0) + np.asarray(v) * t + 0.5 * np.asarray(a) * t * t
    return np.floor(exact + 0.5).astype(np.int64)


def _visible_counts(offsets, positions, h, w) -> np.ndarray:
    ys = positions[:, None, 0] + offsets[None, :, 0]
    xs = positions[:, None, 1] + offsets[None, :, 1]
    inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    return inside.sum(axis=1)


def _margin_ok(offsets, positions, h, w) -> bool:
    counts = _visible_counts(offsets, positions, h, w)
    return bool(np.all(counts >= _MIN_VISIBLE_FRACTION * len(offsets)))


def _place_sprites(spec: SceneSpec, rng) -> list[_Sprite]:
    """Choose trajectories satisfying the visibility margin, before rendering."""
    h, w, t = spec.height, spec.width, spec.num_frames
    inits: list[tuple[SpriteInit, np.ndarray]] = []
    if spec.sprites:
        for s in spec.sprites:
            positions = _round_positions(s.p0, s.v, s.a, t)
            offsets = _sprite_offsets(s.shape, s.size)
            if not _margin_ok(offsets, positions, h, w):
                raise GenerationError(
                    f"sprite {s} leaves the frame (needs >= {_MIN_VISIBLE_FRACTION:.0%} visible)"
                )
            inits.append((s, positions))
    else:
        moving = spec.moving_classes
        for i in range(spec.num_sprites):
            class_id = moving[i % len(moving)]
            for attempt in range(_MAX_SPRITE_TRIES):
                shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
                size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
                p0 = (rng.uniform(size, h - 1 - size), rng.uniform(size, w - 1 - size))
                speed = rng.uniform(*spec.speed_range)
                ang = rng.uniform(0, 2 * np.pi)
                v = (speed * np.sin(ang), speed * np.cos(ang))
                acc = rng.uniform(*spec.accel_range)
                ang_a = rng.uniform(0, 2 * np.pi)
                a = (acc * np.sin(ang_a), acc * np.cos(ang_a))
                init = SpriteInit(class_id, shape, size, p0, v, a)
                positions = _round_positions(p0, v, a, t)
                offsets = _sprite_offsets(shape, size)
                if _margin_ok(offsets, positions, h, w):
                    inits.append((init, positions))
                    break
            else:
                raise GenerationError(
                    f"no in-frame trajectory found for sprite {i} after {_MAX_SPRITE_TRIES} tries; "
                    f"speed range {spec.speed_range} is too fast for {w}x{h}x{t}"
                )
    sprites = []
    for idx, (init, positions) in enumerate(inits):
        offsets = _sprite_offsets(init.shape, init.size)
        noise_rng = np.random.default_rng([spec.seed % (2**32), 202, idx])
        noise = NOISE_AMP * (2.0 * noise_rng.random(len(offsets)) - 1.0)
        sprites.append(_Sprite(init.class_id, offsets, noise, positions))
    return sprites


def _band_maps(spec: SceneSpec):
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.uint8)
    owners = np.zeros((h, w), dtype=np.int16)
    edges = np.linspace(0, h, len(spec.background_bands) + 1).astype(int)
    for b, cid in enumerate(spec.background_bands):
        labels[edges[b] : edges[b + 1]] = cid
        owners[edges[b] : edges[b + 1]] = -(b + 1)
    noise_rng = np.random.default_rng([spec.seed % (2**32), 101])
    noise = NOISE_AMP * (2.0 * noise_rng.random((h, w)) - 1.0)
    rgb = class_color(labels.astype(int)).transpose(2, 0, 1) + noise[None]
    return labels, owners, rgb


def _render(spec: SceneSpec, sprites: list[_Sprite]):
    h, w, t = spec.height, spec.width, spec.num_frames
    bg_labels, bg_owners, bg_rgb = _band_maps(spec)
    frames, labels, owners = [], [], []
    for ti in range(t):
        lab = bg_labels.copy()
        own = bg_owners.copy()
        rgb = bg_rgb.copy()
        for i, s in enumerate(sprites):  # list order is back-to-front
            ys = s.positions[ti, 0] + s.offsets[:, 0]
            xs = s.positions[ti, 1] + s.offsets[:, 1]
            keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
            ys, xs = ys[keep], xs[keep]
            lab[ys, xs] = s.class_id
            own[ys, xs] = i
            rgb[:, ys, xs] = class_color(s.class_id)[:, None] + s.noise[keep][None]
        frames.append(np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0)
        labels.append(lab)
        owners.append(own)
    return frames, labels, owners


def _displacement_lut(sprites: list[_Sprite], t: int, s: int) -> np.ndarray:
    """(num_sprites, 2) integer displacement of each sprite from frame t to t+s."""
    return np.array([sp.positions[t + s] - sp.positions[t] for sp in sprites], dtype=np.int64)


def _flow_and_disocclusion(spec, sprites, owners, t: int, s: int):
    """Forward flow on the frame-t grid and the failure set on the t+s grid.

    A target pixel is disoccluded when sampling frame t at p minus the
    forward displacement stored at p lands out of frame or on a different
    object than the one visible at p in frame t+s.
    """
    h, w = spec.height, spec.width
    disp = _displacement_lut(sprites, t, s) if sprites else np.zeros((0, 2), np.int64)
    own_t, own_s = owners[t], owners[t + s]

    def owner_displacement(owner_map):
        d = np.zeros((2, h, w), dtype=np.int64)  # (dy, dx) per pixel; background 0
        for i in range(len(disp)):
            sel = owner_map == i
            d[0][sel] = disp[i, 0]
            d[1][sel] = disp[i, 1]
        return d

    dhat = owner_displacement(own_t)  # what the stored forward flow encodes at p
    dwant = owner_displacement(own_s)  # motion of the object actually visible at p
    flow = np.stack([dhat[1], dhat[0]]).astype(np.float32)

    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    qy = ys - dhat[0]
    qx = xs - dhat[1]
    inside = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
    src_owner = own_t[np.clip(qy, 0, h - 1), np.clip(qx, 0, w - 1)]
    # the sample must land on the object visible at p in frame t+s AND pick
    # the matching texel: displacement mismatch means a same-class sample of
    # the wrong object part
    ok = inside & (src_owner == own_s) & np.all(dhat == dwant, axis=0)
    return flow, (~ok).astype(np.uint8)


def generate(spec: SceneSpec) -> SceneSequence:
    """Render a sequence; pure function of the spec (seed included)."""
    validate_spec(spec)
    for scene_try in range(_MAX_SCENE_TRIES):
        rng = np.random.default_rng([spec.seed % (2**32), scene_try])
        sprites = _place_sprites(spec, rng)
        frames, labels, owners = _render(spec, sprites)
        if not spec.sprites:
            # sampled scenes must leave every class measurable in the last
            # frame; explicit sprites are oracle scenes, coverage is the
            # caller's business
            counts = np.bincount(labels[-1].ravel(), minlength=spec.num_classes)
            if np.any(counts[: spec.num_classes] < _MIN_CLASS_FRACTION * labels[-1].size):
                continue
        flows, masks = [], []
        for t in range(spec.num_frames - 1):
            flow, dis = _flow_and_disocclusion(spec, sprites, owners, t, 1)
            flows.append(flow)
            masks.append(dis)
        return SceneSequence(spec, frames, labels, flows, masks, owners, sprites)
    raise GenerationError(
        f"no class-balanced scene found for seed {spec.seed} after {_MAX_SCENE_TRIES} tries"
    )


def gt_step(seq: SceneSequence, t: int, s: int):
    """Ground-truth (forward flow, disocclusion) for the pair (t, t+s).

    Works on sequences read back from disk by regenerating from the spec.
    """
    if seq.owners is None or seq.sprites is None:
        seq = generate(seq.spec)
    if not (0 <= t and t + s < seq.spec.num_frames and s >= 1):
        raise ConfigError(f"pair ({t}, {t}+{s}) outside 0..{seq.spec.num_frames - 1}")
    return _flow_and_disocclusion(seq.spec, seq.sprites, seq.owners, t, s)


def sampling_flow(forward_flow: np.ndarray) -> np.ndarray:
    """Offsets for the warp layer: negated forward flow, indexed at target pixels."""
    return -np.asarray(forward_flow)


# ---------------------------------------------------------------------------
# serialization

def spec_to_text(spec: SceneSpec) -> str:
    lines = []
    for f in dataclasses.fields(spec):
        value = getattr(spec, f.name)
        if f.name == "sprites":
            value = tuple(dataclasses.astuple(s) for s in value)
        lines.append(f"{f.name} = {value!r}")
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> SceneSpec:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"scene spec line {lineno}: expected key = value, got {raw!r}")
        key, _, rhs = line.partition("=")
        try:
            values[key.strip()] = ast.literal_eval(rhs.strip())
        except (ValueError, SyntaxError) as e:
            raise DataError(f"scene spec line {lineno}: {e}") from e
    known = {f.name for f in dataclasses.fields(SceneSpec)}
    unknown = set(values) - known
    if unknown:
        raise DataError(f"unknown scene spec keys: {sorted(unknown)}")
    if "sprites" in values:
        values["sprites"] = tuple(SpriteInit(*s) for s in values["sprites"])
    return SceneSpec(**values)


def write_sequence(seq: SceneSequence, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for t, frame in enumerate(seq.frames):
        names.append(f"frame_{t:03d}.ppm")
        fileio.write_ppm(out / names[-1], frame)
    for t, lab in enumerate(seq.labels):
        names.append(f"label_{t:03d}.pgm")
        fileio.write_pgm(out / names[-1], lab)
    for t, flow in enumerate(seq.flows):
        names.append(f"flow_{t:03d}.flo")
        fileio.write_flo(out / names[-1], flow)
    for t, mask in enumerate(seq.disocclusion):
        names.append(f"mask_{t:03d}.pgm")
        fileio.write_pgm(out / names[-1], mask * np.uint8(255))
    (out / "manifest.txt").write_text("\n".join(names) + "\n")
    (out / "spec.txt").write_text(spec_to_text(seq.spec))


def read_sequence(seq_dir) -> SceneSequence:
    src = Path(seq_dir)
    manifest = src / "manifest.txt"
    if not manifest.is_file():
        raise DataError(f"{src}: no manifest.txt")
    frames, labels, flows, masks = [], [], [], []
    for name in manifest.read_text().split():
        path = src / name
        if not path.is_file():
            raise DataError(f"{manifest} lists missing file {name}")
        if name.startswith("frame_"):
            frames.append(fileio.read_ppm(path))
        elif name.startswith("label_"):
            labels.append(fileio.read_pgm(path))
        elif name.startswith("flow_"):
            flows.append(fileio.read_flo(path))
        elif name.startswith("mask_"):
            masks.append((fileio.read_pgm(path) > 0).astype(np.uint8))
        else:
            raise DataError(f"{manifest} lists unrecognized file {name}")
    spec_path = src / "spec.txt"
    if not spec_path.is_file():
        raise DataError(f"{src}: no spec.txt")
    spec = spec_from_text(spec_path.read_text())
    if len(frames) != spec.num_frames or len(flows) != spec.num_frames - 1:
        raise DataError(
            f"{src}: manifest lists {len(frames)} frames / {len(flows)} flows, "
            f"spec says {spec.num_frames}"
        )
    return SceneSequence(spec, frames, labels, flows, masks)


def generate_dataset(out_dir, base_spec: SceneSpec, num_train: int, num_val: int) -> dict:
    """Write train/val sequences under out_dir plus a dataset index.

    Sequence seeds are derived from the base seed; the index file lists one
    `split<TAB>relative_dir` entry per sequence.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": num_train, "val": num_val}
    entries = []
    for split, count in splits.items():
        for i in range(count):
            offset = i if split == "train" else num_train + i
            spec = dataclasses.replace(base_spec, seed=base_spec.seed + offset)
            rel = f"{split}/seq_{i:03d}"
            write_sequence(generate(spec), out / rel)
            entries.append(f"{split}\t{rel}")
    (out / "index.txt").write_text("\n".join(entries) + "\n")
    return {"train": num_train, "val": num_val, "index": str(out / "index.txt")}


def read_dataset_index(root) -> dict:
    """Parse index.txt into {'train': [dirs...], 'val': [dirs...]}."""
    root = Path(root)
    index = root / "index.txt"
    if not index.is_file():
        raise DataError(f"{root}: no index.txt")
    out: dict = {"train": [], "val": []}
    for lineno, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        split, _, rel = line.partition("\t")
        if split not in out or not rel:
            raise DataError(f"{index} line {lineno}: expected 'train|val<TAB>dir', got {line!r}")
        out[split].append(root / rel)
    return out
