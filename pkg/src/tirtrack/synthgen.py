"""Synthetic thermal-like sequences with exact ground truth.

A bright anisotropic Gaussian target moves at constant velocity over a smooth
low-frequency background. Optional distractor blobs (appearance within a
similarity factor of the target), occluders, intensity drift and scale change
produce the DI / OCC / IV / SV attribute mixes used for evaluation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import BBox
from .rng import stream

ATTRIBUTES = ("DI", "OCC", "IV", "SV")
BOX_SIGMAS = 2.0  # gt half-extent in blob standard deviations
MARGIN = 4.0
DISTRACTOR_IOU_MAX = 0.3
RETRY_CAP = 100
OCCLUDER_VALUE = 0.08


class SceneError(ValueError):
    """Infeasible scene configuration."""


class SequenceIOError(OSError):
    """Missing or corrupt exported sequence."""


@dataclass
class Occlusion:
    start: int
    end: int  # exclusive
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    n_frames: int = 120
    target_sigma: tuple[float, float] = (3.0, 2.2)
    target_peak: float = 0.6
    start: tuple[float, float] = (32.0, 32.0)
    velocity: tuple[float, float] = (0.15, 0.1)
    jitter: float = 0.0
    background: float = 0.25
    background_amp: float = 0.05
    pixel_noise: float = 0.0
    distractors: int = 0
    similarity: float = 0.8
    distractor_speed: float = 0.15
    occlusions: list[Occlusion] = field(default_factory=list)
    drift_amp: float = 0.0
    drift_period: float = 60.0
    scale_end: float = 1.0
    out_of_view: list[tuple[int, int]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.occlusions = [o if isinstance(o, Occlusion) else Occlusion(o["start"], o["end"], tuple(o["box"]))
                           for o in self.occlusions]
        self.target_sigma = tuple(self.target_sigma)
        self.start = tuple(self.start)
        self.velocity = tuple(self.velocity)
        self.out_of_view = [tuple(w) for w in self.out_of_view]
        if not 0.0 <= self.similarity <= 1.0:
            raise SceneError("similarity must lie in [0, 1]")
        if self.n_frames < 1 or self.height < 8 or self.width < 8:
            raise SceneError("scene too small")
        if min(self.target_sigma) <= 0 or self.scale_end <= 0:
            raise SceneError("blob size must be positive")


@dataclass
class Blob:
    cx: float
    cy: float
    sx: float
    sy: float
    peak: float

    def box(self) -> BBox:
        return BBox(self.cx, self.cy, 2 * BOX_SIGMAS * self.sx, 2 * BOX_SIGMAS * self.sy)


@dataclass
class SyntheticSequence:
    frames: np.ndarray  # [T, H, W] in [0, 1]
    gt: list[BBox]
    attributes: set[str]
    seed: int
    name: str = ""
    distractor_params: list[tuple[float, float, float]] = field(default_factory=list)
    n_distractors: int = 0

    def __len__(self) -> int:
        return len(self.gt)


def _q2(v: float) -> float:
    """Quantise to the 2-decimal text form used on disk."""
    return float(f"{v:.2f}")


def _scale_at(cfg: SceneConfig, t: int) -> float:
    if cfg.n_frames == 1:
        return 1.0
    return 1.0 + (cfg.scale_end - 1.0) * t / (cfg.n_frames - 1)


def _in_out_of_view(cfg: SceneConfig, t: int) -> bool:
    return any(a <= t < b for a, b in cfg.out_of_view)


def _target_track(cfg: SceneConfig, rng: np.random.Generator) -> list[Blob]:
    sx0, sy0 = cfg.target_sigma
    jit = np.clip(rng.normal(0.0, cfg.jitter, size=(cfg.n_frames, 2)), -3 * cfg.jitter, 3 * cfg.jitter) \
        if cfg.jitter > 0 else np.zeros((cfg.n_frames, 2))
    out = []
    for t in range(cfg.n_frames):
        s = _scale_at(cfg, t)
        cx = cfg.start[0] + cfg.velocity[0] * t
        cy = cfg.start[1] + cfg.velocity[1] * t
        blob = Blob(cx + jit[t, 0], cy + jit[t, 1], sx0 * s, sy0 * s, cfg.target_peak)
        if not _in_out_of_view(cfg, t):
            # the worst-case jitter bound, not the realised sample, decides feasibility
            half_w = BOX_SIGMAS * blob.sx
            half_h = BOX_SIGMAS * blob.sy
            j = 3 * cfg.jitter
            if (cx - j - half_w < MARGIN or cx + j + half_w > cfg.width - 1 - MARGIN
                    or cy - j - half_h < MARGIN or cy + j + half_h > cfg.height - 1 - MARGIN):
                raise SceneError(f"target leaves the frame at t={t}")
        out.append(blob)
    return out


def _iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def _distractor_tracks(cfg: SceneConfig, target: list[Blob], rng: np.random.Generator):
    tracks, params = [], []
    sx0, sy0 = cfg.target_sigma
    spread = 1.0 - cfg.similarity
    for _ in range(cfg.distractors):
        u = rng.uniform(-1.0, 1.0, size=3)
        sx = sx0 * (1.0 + spread * u[0])
        sy = sy0 * (1.0 + spread * u[1])
        peak = cfg.target_peak * (1.0 + spread * u[2])
        for _attempt in range(RETRY_CAP):
            x0 = rng.uniform(MARGIN + 2 * sx, cfg.width - 1 - MARGIN - 2 * sx)
            y0 = rng.uniform(MARGIN + 2 * sy, cfg.height - 1 - MARGIN - 2 * sy)
            ang = rng.uniform(0.0, 2 * math.pi)
            vx, vy = cfg.distractor_speed * math.cos(ang), cfg.distractor_speed * math.sin(ang)
            track = []
            ok = True
            for t, tb in enumerate(target):
                s = _scale_at(cfg, t)
                b = Blob(x0 + vx * t, y0 + vy * t, sx * s, sy * s, peak)
                if _iou(b.box(), tb.box()) > DISTRACTOR_IOU_MAX:
                    ok = False
                    break
                track.append(b)
            if ok:
                break
        else:
            raise SceneError(f"could not place distractor within {RETRY_CAP} attempts")
        tracks.append(track)
        params.append((sx, sy, peak))
    return tracks, params


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    bg = np.full((cfg.height, cfg.width), cfg.background)
    for _ in range(4):
        fx, fy = rng.uniform(0.5, 2.0, size=2) * 2 * math.pi / np.array([cfg.width, cfg.height])
        ph = rng.uniform(0, 2 * math.pi)
        bg += cfg.background_amp / 2 * np.cos(fx * xx + fy * yy + ph)
    return bg


def _render_blob(b: Blob, xx: np.ndarray, yy: np.ndarray, peak: float) -> np.ndarray:
    return peak * np.exp(-((xx - b.cx) ** 2) / (2 * b.sx ** 2) - ((yy - b.cy) ** 2) / (2 * b.sy ** 2))


def attributes_of(cfg: SceneConfig) -> set[str]:
    tags = set()
    if cfg.distractors > 0:
        tags.add("DI")
    if cfg.occlusions:
        tags.add("OCC")
    if cfg.drift_amp > 0:
        tags.add("IV")
    if cfg.scale_end != 1.0:
        tags.add("SV")
    return tags


def generate(cfg: SceneConfig, name: str = "") -> SyntheticSequence:
    """Render the sequence described by ``cfg``; a pure function of ``cfg``."""
    rng_motion = stream(cfg.seed, "motion")
    rng_distr = stream(cfg.seed, "distractors")
    rng_bg = stream(cfg.seed, "background")
    rng_noise = stream(cfg.seed, "noise")
    target = _target_track(cfg, rng_motion)
    dtracks, dparams = _distractor_tracks(cfg, target, rng_distr)
    base = _background(cfg, rng_bg)
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    frames = np.empty((cfg.n_frames, cfg.height, cfg.width))
    gt = []
    for t in range(cfg.n_frames):
        drift = cfg.drift_amp * math.sin(2 * math.pi * t / cfg.drift_period) if cfg.drift_amp else 0.0
        img = base + 0.5 * drift * cfg.background
        img = img + _render_blob(target[t], xx, yy, target[t].peak * (1.0 + drift))
        for tr in dtracks:
            img = img + _render_blob(tr[t], xx, yy, tr[t].peak * (1.0 + drift))
        for occ in cfg.occlusions:
            if occ.start <= t < occ.end:
                x1, y1, x2, y2 = (int(round(v)) for v in occ.box)
                img[max(y1, 0):max(y2, 0), max(x1, 0):max(x2, 0)] = OCCLUDER_VALUE
        if cfg.pixel_noise > 0:
            img = img + rng_noise.normal(0.0, cfg.pixel_noise, size=img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)
        b = target[t].box()
        gt.append(BBox(_q2(b.cx), _q2(b.cy), _q2(b.w), _q2(b.h)))
    return SyntheticSequence(frames, gt, attributes_of(cfg), cfg.seed, name, dparams, cfg.distractors)


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------

EVAL_PER_MIX = 12
N_TRAIN = 20
SUITE_FRAMES = 120


def _random_motion(rng: np.random.Generator, cfg_kw: dict, scale_end: float = 1.0) -> dict:
    """Start point and velocity whose straight path keeps the target inside the frame."""
    h, w, n = cfg_kw.get("height", 64), cfg_kw.get("width", 64), cfg_kw.get("n_frames", SUITE_FRAMES)
    sx, sy = cfg_kw["target_sigma"]
    j = 3 * cfg_kw.get("jitter", 0.0)
    smax = max(1.0, scale_end)
    lo_x, hi_x = MARGIN + BOX_SIGMAS * sx * smax + j + 0.5, w - 1 - MARGIN - BOX_SIGMAS * sx * smax - j - 0.5
    lo_y, hi_y = MARGIN + BOX_SIGMAS * sy * smax + j + 0.5, h - 1 - MARGIN - BOX_SIGMAS * sy * smax - j - 0.5
    x0, x1 = rng.uniform(lo_x, hi_x, size=2)
    y0, y1 = rng.uniform(lo_y, hi_y, size=2)
    return {"start": (float(x0), float(y0)),
            "velocity": (float((x1 - x0) / (n - 1)), float((y1 - y0) / (n - 1)))}


def _appearance(rng: np.random.Generator) -> dict:
    return {
        "target_sigma": (float(rng.uniform(2.2, 3.4)), float(rng.uniform(1.8, 3.0))),
        "target_peak": float(rng.uniform(0.45, 0.65)),
        "background": float(rng.uniform(0.15, 0.3)),
        "background_amp": float(rng.uniform(0.03, 0.08)),
        "pixel_noise": 0.01,
        "jitter": 0.3,
    }


def suite_config(seed: int, kind: str, index: int) -> SceneConfig:
    rng = stream(seed, "suite", kind, index)
    kw = _appearance(rng)
    kw["n_frames"] = SUITE_FRAMES
    kw["seed"] = int(rng.integers(2 ** 62))
    scale_end = 1.0
    if kind == "SV":
        scale_end = float(rng.choice([rng.uniform(0.65, 0.8), rng.uniform(1.25, 1.45)]))
        kw["scale_end"] = scale_end
    kw.update(_random_motion(rng, kw, scale_end))
    if kind == "DI":
        kw["distractors"] = int(rng.integers(2, 4))
        kw["similarity"] = float(rng.uniform(0.75, 0.95))
    elif kind == "OCC":
        start = int(rng.integers(30, 80))
        length = int(rng.integers(8, 16))
        t_mid = start + length // 2
        cx = kw["start"][0] + kw["velocity"][0] * t_mid
        cy = kw["start"][1] + kw["velocity"][1] * t_mid
        half = 2.2 * max(kw["target_sigma"])
        kw["occlusions"] = [Occlusion(start, start + length, (cx - half, cy - half, cx + half, cy + half))]
    elif kind == "IV":
        kw["drift_amp"] = float(rng.uniform(0.3, 0.45))
        kw["drift_period"] = float(rng.uniform(30.0, 70.0))
    return SceneConfig(**kw)


def make_suite(seed: int) -> list[SyntheticSequence]:
    """48 evaluation sequences (12 per attribute mix) followed by 20 clean training sequences."""
    out = []
    for kind in ATTRIBUTES:
        for i in range(EVAL_PER_MIX):
            out.append(generate(suite_config(seed, kind, i), name=f"{kind.lower()}_{i:02d}"))
    for i in range(N_TRAIN):
        out.append(generate(suite_config(seed, "train", i), name=f"train_{i:02d}"))
    return out


def split_suite(suite: list[SyntheticSequence]) -> tuple[list[SyntheticSequence], list[SyntheticSequence]]:
    ev = [s for s in suite if not s.name.startswith("train_")]
    tr = [s for s in suite if s.name.startswith("train_")]
    return ev, tr


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

def _write_pgm(path: Path, img: np.ndarray) -> None:
    h, w = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise SequenceIOError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise SequenceIOError(f"{path}: malformed PGM header") from exc
    if maxval != 255 or len(parts[3]) != w * h:
        raise SequenceIOError(f"{path}: expected {w * h} bytes of 8-bit data, got {len(parts[3])}")
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def export_sequence(seq: SyntheticSequence, path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(seq.frames):
        _write_pgm(d / f"frame_{t:04d}.pgm", img)
    lines = [f"{b.cx:.2f},{b.cy:.2f},{b.w:.2f},{b.h:.2f}" for b in seq.gt]
    (d / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    meta = {"name": seq.name, "seed": seq.seed, "attributes": sorted(seq.attributes),
            "n_frames": len(seq), "n_distractors": seq.n_distractors,
            "height": int(seq.frames.shape[1]), "width": int(seq.frames.shape[2])}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def import_sequence(path) -> SyntheticSequence:
    d = Path(path)
    if not d.is_dir():
        raise SequenceIOError(f"{d} is not a directory")
    gt_path, meta_path = d / "groundtruth.txt", d / "meta.json"
    if not gt_path.exists() or not meta_path.exists():
        raise SequenceIOError(f"{d}: missing groundtruth.txt or meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SequenceIOError(f"{meta_path}: invalid JSON") from exc
    gt = []
    for i, line in enumerate(gt_path.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            cx, cy, w, h = (float(v) for v in line.split(","))
            gt.append(BBox(cx, cy, w, h))
        except ValueError as exc:
            raise SequenceIOError(f"{gt_path}:{i + 1}: bad box line {line!r}") from exc
    frames = sorted(d.glob("frame_*.pgm"))
    if not frames:
        raise SequenceIOError(f"{d}: no frames")
    if len(frames) != len(gt) or len(gt) != meta.get("n_frames", len(gt)):
        raise SequenceIOError(f"{d}: {len(frames)} frames but {len(gt)} boxes")
    imgs = np.stack([_read_pgm(p) for p in frames])
    return SyntheticSequence(imgs, gt, set(meta.get("attributes", [])), int(meta.get("seed", 0)),
                             meta.get("name", d.name), n_distractors=int(meta.get("n_distractors", 0)))


def scene_to_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)
