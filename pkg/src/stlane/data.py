"""Sequence dataset pipeline: clip-directory ingestion, window sampling,
offline x4 augmentation, and the parametric road-scene generator that
provides exact ground truth at desk scale.

On-disk layout (the normative format, documented in the README):

    <root>/clips/<clip_id>/<frame>.ppm|png     RGB frames
    <root>/masks/<clip_id>.pgm|png             binary lane mask (last frame)
    <root>/index.txt                           one sequence per line:
                                               K frame paths + 1 mask path,
                                               space separated, relative to root

Masks label the analytic lane curves of the last frame with a fixed stroke
width, through dashes and through occluders: a lane hidden in the final frame
is still ground truth, which is exactly what rewards models that carry
information across frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError

LANE_SHADE = (242, 242, 218)  # bright paint, slightly warm
ROAD_BASE = 0.22
ROAD_GRADIENT = 0.18


# ---------------------------------------------------------------------------
# lossless image io (PPM/PGM written natively; PNG via Pillow)


def write_ppm(path, rgb: np.ndarray):
    """rgb uint8 (h, w, 3), binary P6."""
    h, w, c = rgb.shape
    if c != 3 or rgb.dtype != np.uint8:
        raise UsageError("write_ppm expects uint8 (h,w,3)")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.tobytes())


def write_pgm(path, gray: np.ndarray):
    h, w = gray.shape
    if gray.dtype != np.uint8:
        raise UsageError("write_pgm expects uint8 (h,w)")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(gray.tobytes())


def _read_pnm(path, magic: bytes):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} header")
    # header: magic, width, height, maxval; '#' comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported")
    return data[pos:], h, w


def read_ppm(path) -> np.ndarray:
    raw, h, w = _read_pnm(path, b"P6")
    if len(raw) < h * w * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw[: h * w * 3], dtype=np.uint8).reshape(h, w, 3)


def read_pgm(path) -> np.ndarray:
    raw, h, w = _read_pnm(path, b"P5")
    if len(raw) < h * w:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw[: h * w], dtype=np.uint8).reshape(h, w)


def write_png_rgb(path, rgb: np.ndarray):
    from PIL import Image

    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def read_image_rgb(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".ppm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask_gray(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".pgm"):
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        if not (arr[..., :1] == arr[..., :3]).all():
            raise DataError(f"{path}: color mask is not single-valued per pixel")
        arr = arr[..., 0]
    return arr.astype(np.uint8)


# ---------------------------------------------------------------------------
# resizing (corner-aligned, matching the network's upsampling convention)


def _axis_positions(n_out: int, n_in: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def resize_bilinear(img: np.ndarray, out_hw) -> np.ndarray:
    """img (h, w[, c]) float -> (oh, ow[, c])."""
    h, w = img.shape[:2]
    oh, ow = out_hw
    ys = _axis_positions(oh, h)
    xs = _axis_positions(ow, w)
    y0 = np.minimum(ys.astype(np.int64), max(h - 2, 0))
    x0 = np.minimum(xs.astype(np.int64), max(w - 2, 0))
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def resize_nearest(img: np.ndarray, out_hw) -> np.ndarray:
    h, w = img.shape[:2]
    ys = np.clip(np.rint(_axis_positions(out_hw[0], h)).astype(np.int64), 0, h - 1)
    xs = np.clip(np.rint(_axis_positions(out_hw[1], w)).astype(np.int64), 0, w - 1)
    return img[np.ix_(ys, xs)]


# ---------------------------------------------------------------------------
# samples


@dataclass
class SequenceSample:
    frames: np.ndarray  # (k, 3, h, w) float32 in [0, 1]
    mask: np.ndarray    # (h, w) uint8 in {0, 1}
    meta: dict = field(default_factory=dict)

    def validate(self):
        k, c, h, w = self.frames.shape
        if c != 3:
            raise UsageError("frames must be RGB")
        if self.mask.shape != (h, w):
            raise UsageError("mask dims must equal frame dims")
        if not np.isin(self.mask, (0, 1)).all():
            raise UsageError("mask must be binary")
        if self.frames.min() < 0 or self.frames.max() > 1:
            raise UsageError("frame values must lie in [0, 1]")
        return self


def sample_windows(labeled_index: int, stride: int, k: int = 5) -> list[int]:
    """Frame numbers (1-based) ending at the labeled frame with constant gap:
    [labeled-(k-1)*stride, ..., labeled-stride, labeled]."""
    if stride < 1 or k < 1:
        raise UsageError("stride and k must be >= 1")
    first = labeled_index - (k - 1) * stride
    if first < 1:
        raise UsageError(
            f"window underflows clip start: labeled {labeled_index}, "
            f"stride {stride}, k {k}")
    return [labeled_index - (k - 1 - i) * stride for i in range(k)]


# ---------------------------------------------------------------------------
# augmentation


def _rotate(img: np.ndarray, angle_deg: float, nearest: bool) -> np.ndarray:
    """Rotate about the image center, zero fill outside. img (h,w) or (h,w,c)."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = math.radians(angle_deg)
    cos, sin = math.cos(rad), math.sin(rad)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: source position for each destination pixel
    sy = cos * (yy - cy) + sin * (xx - cx) + cy
    sx = -sin * (yy - cy) + cos * (xx - cx) + cx
    if nearest:
        iy = np.rint(sy).astype(np.int64)
        ix = np.rint(sx).astype(np.int64)
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.zeros_like(img)
        out[valid] = img[iy[valid], ix[valid]]
        return out
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    if img.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    out = np.zeros(img.shape, dtype=np.float64)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi, xi = y0 + dy, x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
        sample = np.zeros(img.shape, dtype=np.float64)
        sample[valid] = img[yi[valid], xi[valid]]
        out += wgt * sample
    return out.astype(img.dtype)


def augment(sample: SequenceSample, rng: np.random.Generator) -> list[SequenceSample]:
    """The original plus three variants: horizontal flip, rotation by a
    uniform angle in +-5 degrees, and a random 90%-area crop rescaled back.
    Every transform is applied identically to all frames and the mask; masks
    go through nearest-neighbor and stay binary."""
    k, _, h, w = sample.frames.shape
    out = [sample]

    flipped = SequenceSample(
        frames=np.ascontiguousarray(sample.frames[:, :, :, ::-1]),
        mask=np.ascontiguousarray(sample.mask[:, ::-1]),
        meta={**sample.meta, "augment": "flip"})
    out.append(flipped)

    angle = float(rng.uniform(-5.0, 5.0))
    rot_frames = np.stack([
        np.stack([_rotate(sample.frames[t, c], angle, nearest=False)
                  for c in range(3)]) for t in range(k)])
    rot_mask = _rotate(sample.mask, angle, nearest=True)
    out.append(SequenceSample(
        frames=np.clip(rot_frames, 0.0, 1.0).astype(np.float32),
        mask=(rot_mask > 0).astype(np.uint8),
        meta={**sample.meta, "augment": f"rot{angle:+.2f}"}))

    scale = math.sqrt(0.9)
    ch, cw = max(1, round(h * scale)), max(1, round(w * scale))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop_frames = np.stack([
        np.stack([resize_bilinear(sample.frames[t, c, top:top + ch, left:left + cw], (h, w))
                  for c in range(3)]) for t in range(k)])
    crop_mask = resize_nearest(sample.mask[top:top + ch, left:left + cw], (h, w))
    out.append(SequenceSample(
        frames=np.clip(crop_frames, 0.0, 1.0).astype(np.float32),
        mask=(crop_mask > 0).astype(np.uint8),
        meta={**sample.meta, "augment": f"crop{top},{left}"}))
    return out


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class LaneSpec:
    curvature: float  # px contribution at the bottom row, quadratic in depth
    slope: float      # px contribution at the bottom row, linear in depth
    offset: float     # px at the top row
    dash: tuple[int, int] | None = None  # (on, off) row counts; None = solid
    dash_phase: int = 0


@dataclass(frozen=True)
class Occluder:
    x: float  # top-left at the final frame
    y: float
    w: float
    h: float
    vx: float = 0.0  # displacement per frame step (position slides backward in time)
    vy: float = 0.0
    shade: float = 0.45


@dataclass(frozen=True)
class SynthSpec:
    image_hw: tuple[int, int]
    k: int = 5
    lanes: tuple[LaneSpec, ...] = ()
    stroke_width: int | None = None  # default: 2 px at 32-row geometry, scaled
    drift: float = 0.0               # lateral ego drift in px per frame step
    occluders: tuple[Occluder, ...] = ()
    gradient: float = ROAD_GRADIENT
    dazzle: tuple[float, float, float, float] | None = None  # cy, cx, sigma, amp
    noise: float = 0.02
    seed: int = 0

    def stroke(self) -> int:
        if self.stroke_width is not None:
            return self.stroke_width
        return max(1, round(2 * self.image_hw[0] / 32))


def _lane_centers(spec: SynthSpec, lane: LaneSpec, frame_idx: int) -> np.ndarray:
    """Lane center x per row at one frame; the last frame sits at the nominal
    position, earlier frames are shifted by the accumulated ego drift."""
    h, _ = spec.image_hw
    t = np.arange(h) / max(h - 1, 1)
    shift = spec.drift * (frame_idx - (spec.k - 1))
    return lane.offset + lane.slope * t + lane.curvature * t * t + shift


def _lane_stroke_mask(spec: SynthSpec, lane: LaneSpec, frame_idx: int,
                      dashed: bool) -> np.ndarray:
    h, w = spec.image_hw
    centers = _lane_centers(spec, lane, frame_idx).reshape(-1, 1)
    cols = np.arange(w).reshape(1, -1)
    on = np.abs(cols - centers) <= spec.stroke() / 2.0
    if dashed and lane.dash is not None:
        on_len, off_len = lane.dash
        rows = (np.arange(h) + lane.dash_phase) % (on_len + off_len) < on_len
        on &= rows.reshape(-1, 1)
    return on


def synth_scene(spec: SynthSpec) -> SequenceSample:
    """Render K frames of the parametric road scene. Ground truth is the
    analytic lane stroke of the last frame, solid through dashes and through
    occluders."""
    h, w = spec.image_hw
    if not 2 <= len(spec.lanes) <= 5:
        raise UsageError(f"scene needs 2..5 lanes, got {len(spec.lanes)}")
    if spec.k < 1:
        raise UsageError("k must be >= 1")
    half = spec.stroke() / 2.0
    for lane in spec.lanes:
        for fi in range(spec.k):
            centers = _lane_centers(spec, lane, fi)
            if centers.min() - half < 0 or centers.max() + half > w - 1:
                raise UsageError(
                    f"lane leaves the image at frame {fi} "
                    f"(x range {centers.min():.1f}..{centers.max():.1f})")

    rng = np.random.default_rng(spec.seed)
    t_rows = (np.arange(h) / max(h - 1, 1)).reshape(-1, 1)
    base = ROAD_BASE + spec.gradient * t_rows + np.zeros((h, w))
    if spec.dazzle is not None:
        cy, cx, sigma, amp = spec.dazzle
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        base = base + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))

    lane_rgb = np.array(LANE_SHADE, dtype=np.float64) / 255.0
    frames = np.empty((spec.k, 3, h, w), dtype=np.float32)
    for fi in range(spec.k):
        img = np.repeat(base[None, :, :], 3, axis=0).astype(np.float64)
        img[2] *= 0.96  # slightly cool pavement
        for lane in spec.lanes:
            stroke = _lane_stroke_mask(spec, lane, fi, dashed=True)
            for c in range(3):
                img[c][stroke] = lane_rgb[c]
        for occ in spec.occluders:
            dx = occ.vx * (fi - (spec.k - 1))
            dy = occ.vy * (fi - (spec.k - 1))
            x0 = int(round(occ.x + dx))
            y0 = int(round(occ.y + dy))
            x1, y1 = x0 + int(round(occ.w)), y0 + int(round(occ.h))
            x0, y0 = max(0, x0), max(0, y0)
            x1, y1 = min(w, x1), min(h, y1)
            if x0 < x1 and y0 < y1:
                img[:, y0:y1, x0:x1] = occ.shade
        if spec.noise > 0:
            img += spec.noise * rng.standard_normal((3, h, w))
        # quantize exactly as the on-disk codec will, so that a generated
        # sample and its written/loaded twin are bit-identical
        q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        frames[fi] = q.astype(np.float32) / 255.0

    mask = np.zeros((h, w), dtype=np.uint8)
    for lane in spec.lanes:
        mask |= _lane_stroke_mask(spec, lane, spec.k - 1, dashed=False).astype(np.uint8)

    return SequenceSample(frames=frames, mask=mask,
                          meta={"seed": spec.seed, "k": spec.k}).validate()


def frames_to_uint8(frames: np.ndarray) -> list[np.ndarray]:
    """(k,3,h,w) float in [0,1] -> list of (h,w,3) uint8."""
    return [np.clip(np.rint(f.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
            for f in frames]


# ---------------------------------------------------------------------------
# corpus generation


def _draw_lane(rng, w, h, idx, count) -> LaneSpec:
    margin = 3.0
    lane_slot = w * (idx + 1) / (count + 1)
    for _ in range(64):
        offset = lane_slot + float(rng.uniform(-0.08 * w, 0.08 * w))
        slope = float(rng.uniform(-0.12 * w, 0.12 * w))
        curv = float(rng.uniform(-0.10 * w, 0.10 * w))
        xs = [offset, offset + slope + curv, offset + slope / 2 + curv / 4]
        if min(xs) > margin and max(xs) < w - 1 - margin:
            break
    else:
        slope = curv = 0.0
        offset = float(np.clip(lane_slot, margin, w - 1 - margin))
    dash = None
    if rng.random() < 0.5:
        on = int(rng.integers(2, 5))
        off = int(rng.integers(2, 4))
        dash = (on, off)
    return LaneSpec(curvature=curv, slope=slope, offset=offset, dash=dash,
                    dash_phase=int(rng.integers(0, 6)))


def _draw_scene(rng, image_hw, k, occluded_final: bool) -> SynthSpec:
    h, w = image_hw
    n_lanes = int(rng.integers(2, 5))
    lanes = tuple(_draw_lane(rng, w, h, i, n_lanes) for i in range(n_lanes))
    drift = float(rng.uniform(-1.2, 1.2)) * (w / 64.0)
    dazzle = None
    if rng.random() < 0.4:
        dazzle = (float(rng.uniform(0, h / 2)), float(rng.uniform(0, w)),
                  float(rng.uniform(h / 6, h / 2)), float(rng.uniform(0.1, 0.3)))
    occluders: list[Occluder] = []
    spec0 = SynthSpec(image_hw=image_hw, k=k, lanes=lanes)
    if occluded_final:
        # one large box parked on a lane in the final frame only; it slides in
        # from the side fast enough that earlier frames show the lane
        lane = lanes[int(rng.integers(0, n_lanes))]
        y_hit = float(rng.uniform(0.25 * h, 0.7 * h))
        x_hit = float(np.interp(y_hit / max(h - 1, 1), [0, 0.5, 1],
                                [lane.offset,
                                 lane.offset + lane.slope / 2 + lane.curvature / 4,
                                 lane.offset + lane.slope + lane.curvature]))
        bw = float(rng.uniform(0.3 * w, 0.55 * w))
        bh = float(rng.uniform(0.35 * h, 0.6 * h))
        direction = 1.0 if rng.random() < 0.5 else -1.0
        occluders.append(Occluder(
            x=x_hit - bw / 2, y=y_hit - bh / 2, w=bw, h=bh,
            vx=direction * (bw + float(rng.uniform(2, 6))),
            vy=float(rng.uniform(-1, 1)),
            shade=float(rng.uniform(0.35, 0.55))))
    n_extra = int(rng.integers(0, 3)) if not occluded_final else int(rng.integers(0, 2))
    for _ in range(n_extra):
        occluders.append(Occluder(
            x=float(rng.uniform(0, w - 6)), y=float(rng.uniform(0, h - 4)),
            w=float(rng.uniform(0.1 * w, 0.28 * w)),
            h=float(rng.uniform(0.15 * h, 0.4 * h)),
            vx=float(rng.uniform(-3, 3)), vy=float(rng.uniform(-1.5, 1.5)),
            shade=float(rng.uniform(0.1, 0.6))))
    return SynthSpec(image_hw=image_hw, k=k, lanes=lanes, drift=drift,
                     occluders=tuple(occluders), dazzle=dazzle,
                     noise=float(rng.uniform(0.01, 0.035)),
                     seed=int(rng.integers(0, 2 ** 31)))


def _write_split(root: Path, samples: list[SequenceSample]):
    clips = root / "clips"
    masks = root / "masks"
    clips.mkdir(parents=True, exist_ok=True)
    masks.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sample in enumerate(samples):
        clip_id = f"clip_{i:04d}"
        cdir = clips / clip_id
        cdir.mkdir(exist_ok=True)
        paths = []
        for t, frame in enumerate(frames_to_uint8(sample.frames), start=1):
            rel = f"clips/{clip_id}/f{t}.ppm"
            write_ppm(root / rel, frame)
            paths.append(rel)
        mask_rel = f"masks/{clip_id}.pgm"
        write_pgm(root / mask_rel, (sample.mask * 255).astype(np.uint8))
        lines.append(" ".join(paths + [mask_rel]))
    (root / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def gen_corpus(out_dir, n_train: int, n_test_normal: int, n_test_occluded: int,
               seed: int, image_hw=(32, 64), k: int = 5,
               augment_train: bool = False) -> dict[str, Path]:
    """Write train / test_normal / test_occluded splits in the clip layout.
    Every sample of the occluded split has a large last-frame occluder
    intersecting a lane; the other splits carry ordinary random occluders."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    splits: dict[str, Path] = {}
    for name, count, occluded in (("train", n_train, False),
                                  ("test_normal", n_test_normal, False),
                                  ("test_occluded", n_test_occluded, True)):
        samples = []
        for _ in range(count):
            sample = synth_scene(_draw_scene(rng, image_hw, k, occluded))
            if augment_train and name == "train":
                samples.extend(augment(sample, rng))
            else:
                samples.append(sample)
        split_root = out / name
        _write_split(split_root, samples)
        splits[name] = split_root
    return splits


# ---------------------------------------------------------------------------
# loading


def iter_dataset(root_dir, index_file: str = "index.txt", k: int = 5,
                 target_hw: tuple[int, int] | None = None):
    """Stream SequenceSamples in index order. Frames resize bilinearly, masks
    by nearest neighbor; masks binarize at threshold 128."""
    root = Path(root_dir)
    index_path = root / index_file
    if not index_path.exists():
        raise DataError(f"missing index file {index_path}")
    for lineno, line in enumerate(index_path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != k + 1:
            raise DataError(
                f"{index_path}:{lineno}: expected {k} frame paths + 1 mask path, "
                f"got {len(parts)} entries")
        frame_paths, mask_path = parts[:-1], parts[-1]
        frames = []
        for p in frame_paths:
            full = root / p
            if not full.exists():
                raise DataError(f"{index_path}:{lineno}: missing frame file {full}")
            rgb = read_image_rgb(full).astype(np.float32) / 255.0
            if target_hw is not None and rgb.shape[:2] != tuple(target_hw):
                rgb = resize_bilinear(rgb, target_hw)
            frames.append(rgb.transpose(2, 0, 1))
        full_mask = root / mask_path
        if not full_mask.exists():
            raise DataError(f"{index_path}:{lineno}: missing mask file {full_mask}")
        try:
            raw = read_mask_gray(full_mask)
        except DataError as e:
            raise DataError(f"{index_path}:{lineno}: {e}")
        mask = (raw >= 128).astype(np.uint8)
        if target_hw is not None and mask.shape != tuple(target_hw):
            mask = resize_nearest(mask, target_hw)
        clip_id = Path(frame_paths[0]).parent.name
        yield SequenceSample(
            frames=np.clip(np.stack(frames), 0.0, 1.0).astype(np.float32),
            mask=mask,
            meta={"clip": clip_id, "line": lineno}).validate()


def load_dataset(root_dir, index_file: str = "index.txt", k: int = 5,
                 target_hw: tuple[int, int] | None = None) -> list[SequenceSample]:
    return list(iter_dataset(root_dir, index_file, k, target_hw))
