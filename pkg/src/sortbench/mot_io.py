"""MOT-challenge detection ingestion, result writing and synthetic sequences.

Detection and result files share the MOT15 ten-column CSV layout::

    frame, id, left, top, width, height, conf, x, y, z

Detection files carry ``id = -1`` and unused world coordinates ``-1``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence as Seq, Tuple

import numpy as np

from .boxes import BBox, iou
from .tracker import FrameDetections, FrameEmissions

log = logging.getLogger(__name__)

N_COLUMNS = 10

# frame counts and peak object counts of the 11 MOT15 training sequences
MOT15_TRAIN: Dict[str, Tuple[int, int]] = {
    "PETS09-S2L1": (795, 8),
    "TUD-Campus": (71, 6),
    "TUD-Stadtmitte": (179, 7),
    "ETH-Bahnhof": (1000, 9),
    "ETH-Sunnyday": (354, 8),
    "ETH-Pedcross2": (837, 9),
    "KITTI-13": (340, 5),
    "KITTI-17": (145, 7),
    "ADL-Rundle-6": (525, 11),
    "ADL-Rundle-8": (654, 11),
    "Venice-2": (600, 13),
}


class MotParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class DetRecord(NamedTuple):
    frame: int
    id: int
    left: float
    top: float
    width: float
    height: float
    conf: float
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0

    def bbox(self) -> BBox:
        return BBox(self.left, self.top, self.left + self.width, self.top + self.height, self.conf)


@dataclass
class Sequence:
    name: str
    frames: List[FrameDetections]
    skipped: int = 0
    source: Optional[Path] = field(default=None, compare=False)

    @property
    def total_frames(self) -> int:
        return len(self.frames)

    @property
    def n_detections(self) -> int:
        return sum(len(f) for f in self.frames)


def parse_line(line: str, path="<string>", lineno: int = 1) -> DetRecord:
    parts = line.split(",")
    if len(parts) != N_COLUMNS:
        raise MotParseError(path, lineno, f"expected {N_COLUMNS} columns, got {len(parts)}")
    try:
        frame = int(float(parts[0]))
        ident = int(float(parts[1]))
        vals = [float(p) for p in parts[2:]]
    except ValueError as e:
        raise MotParseError(path, lineno, str(e)) from None
    if frame < 1 or frame != float(parts[0]):
        raise MotParseError(path, lineno, f"bad frame number {parts[0].strip()!r}")
    if not all(math.isfinite(v) for v in vals):
        raise MotParseError(path, lineno, "non-finite value")
    return DetRecord(frame, ident, *vals)


def read_records(path) -> List[DetRecord]:
    records = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                records.append(parse_line(line, path, lineno))
    return records


def sequence_name(path) -> str:
    """``<seq_dir>/<name>/det/det.txt`` -> name; otherwise the file stem."""
    p = Path(path)
    if p.parent.name == "det":
        return p.parent.parent.name
    return p.stem


def group_records(name: str, records: Iterable[DetRecord], conf_threshold: Optional[float] = None,
                  with_ids: bool = False) -> Sequence:
    by_frame: Dict[int, List[DetRecord]] = {}
    skipped = 0
    last = 0
    for r in records:
        last = max(last, r.frame)
        if not (r.width > 0 and r.height > 0):
            skipped += 1
            continue
        if conf_threshold is not None and r.conf < conf_threshold:
            continue
        by_frame.setdefault(r.frame, []).append(r)
    if skipped:
        log.warning("%s: skipped %d records with nonpositive width/height", name, skipped)
    frames = []
    for fi in range(1, last + 1):
        rows = by_frame.get(fi, ())
        dets = np.array([(r.left, r.top, r.left + r.width, r.top + r.height, r.conf) for r in rows],
                        dtype=np.float64).reshape(-1, 5)
        ids = np.array([r.id for r in rows], dtype=np.int64) if with_ids else None
        frames.append(FrameDetections(fi, dets, ids))
    return Sequence(name, frames, skipped)


def parse_det_file(path, conf_threshold: Optional[float] = None, name: Optional[str] = None) -> Sequence:
    """Read a MOT detection file into per-frame detections.

    Every frame from 1 to the highest frame number is present, empty ones
    included. Records with nonpositive width or height are dropped and
    counted in ``Sequence.skipped``.
    """
    seq = group_records(name or sequence_name(path), read_records(path), conf_threshold)
    seq.source = Path(path)
    return seq


def find_sequences(seq_dir, names: Optional[Seq[str]] = None) -> List[Path]:
    """Detection files under ``seq_dir/<name>/det/det.txt``, sorted by name."""
    root = Path(seq_dir)
    if names:
        paths = [root / n / "det" / "det.txt" for n in names]
        missing = [str(p) for p in paths if not p.is_file()]
        if missing:
            raise FileNotFoundError(f"missing detection files: {', '.join(missing)}")
        return paths
    return sorted(p for p in root.glob("*/det/det.txt") if p.is_file())


def format_result(frame: int, track_id: int, b: BBox, exact: bool = False) -> str:
    if exact:
        w = max(b[2] - b[0], 0.0)
        h = max(b[3] - b[1], 0.0)
        return f"{frame},{track_id},{b[0]!r},{b[1]!r},{w!r},{h!r},1,-1,-1,-1"
    # round the corners, not the extent, so each corner is off by <= 0.005
    x1, y1 = round(b[0], 2), round(b[1], 2)
    w = max(round(b[2], 2) - x1, 0.0)
    h = max(round(b[3], 2) - y1, 0.0)
    return f"{frame},{track_id},{x1:.2f},{y1:.2f},{w:.2f},{h:.2f},1,-1,-1,-1"


def results_text(emissions: Iterable[FrameEmissions], exact: bool = False) -> str:
    """MOT result lines ordered by frame then id; ``exact`` keeps full float
    precision instead of two decimals."""
    lines = []
    for frame, emitted in sorted(emissions, key=lambda fe: fe[0]):
        for b, tid in sorted(emitted, key=lambda e: e[1]):
            lines.append(format_result(frame, tid, b, exact) + "\n")
    return "".join(lines)


def write_results(path, emissions: Iterable[FrameEmissions]) -> None:
    """Write tracker output in MOT result format, ordered by frame then id."""
    text = results_text(emissions)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


def write_det_file(path, seq: Sequence) -> None:
    """Write detections in MOT layout with full float precision.

    Trailing frames without detections cannot be represented and are lost.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for f in seq.frames:
            ids = f.gt_ids if f.gt_ids is not None else np.full(len(f), -1)
            for (x1, y1, x2, y2, conf), gid in zip(f.dets.tolist(), ids.tolist()):
                fh.write(f"{f.frame_index},{gid},{x1!r},{y1!r},{x2 - x1!r},{y2 - y1!r},{conf!r},-1,-1,-1\n")


def write_seq_dir(seq_dir, seqs: Iterable[Sequence]) -> List[Path]:
    """Materialise sequences as ``seq_dir/<name>/det/det.txt``."""
    paths = []
    for s in seqs:
        p = Path(seq_dir) / s.name / "det" / "det.txt"
        write_det_file(p, s)
        paths.append(p)
    return paths


def save_bundle(path, seqs: Iterable[Sequence]) -> None:
    """Store sequences bit-exactly in one ``.npz`` file (no pickling)."""
    arrays = {}
    names = []
    for i, s in enumerate(seqs):
        names.append(s.name)
        arrays[f"n{i}"] = np.array([s.total_frames], dtype=np.int64)
        arrays[f"f{i}"] = np.concatenate(
            [np.full(len(f), f.frame_index, dtype=np.int64) for f in s.frames] or [np.zeros(0, np.int64)])
        arrays[f"d{i}"] = np.concatenate([f.dets for f in s.frames] or [np.zeros((0, 5))])
    np.savez(path, names=np.array(names, dtype=str), **arrays)


def load_bundle(path) -> List[Sequence]:
    seqs = []
    with np.load(path, allow_pickle=False) as z:
        for i, name in enumerate(z["names"].tolist()):
            n = int(z[f"n{i}"][0])
            fidx, dets = z[f"f{i}"], z[f"d{i}"]
            bounds = np.searchsorted(fidx, np.arange(1, n + 2))
            frames = [FrameDetections(k + 1, dets[bounds[k]:bounds[k + 1]]) for k in range(n)]
            seqs.append(Sequence(name, frames))
    return seqs


# ---------------------------------------------------------------------------
# synthetic data


def synth_sequence(n_frames: int, n_objects: int, motion_seed: int = 0, *, name: Optional[str] = None,
                   speed: float = 1.0, dropout: float = 0.0, noise: float = 0.0,
                   image_size: Tuple[float, float] = (1920.0, 1080.0)) -> Sequence:
    """Deterministic linear-motion boxes, one per object per frame.

    Each object lives in its own cell of a grid over the image and bounces
    off the cell walls, so objects never overlap. ``speed`` caps the
    per-axis displacement in pixels per frame; ``dropout`` is the
    probability a detection is missing from a frame; ``noise`` adds
    Gaussian jitter (pixels) to the corners. Ground-truth object ids are
    kept in ``FrameDetections.gt_ids``.
    """
    if n_frames < 1 or n_objects < 1:
        raise ValueError("n_frames and n_objects must be >= 1")
    rng = np.random.default_rng(motion_seed)
    cols = int(math.ceil(math.sqrt(n_objects * image_size[0] / image_size[1])))
    rows = int(math.ceil(n_objects / cols))
    cw, ch = image_size[0] / cols, image_size[1] / rows
    w = rng.uniform(0.15, 0.35, n_objects) * cw
    h = rng.uniform(0.3, 0.6, n_objects) * ch
    lo_x = (np.arange(n_objects) % cols) * cw
    lo_y = (np.arange(n_objects) // cols) * ch
    span_x, span_y = cw - w, ch - h
    pos_x = rng.uniform(0, 1, n_objects) * span_x
    pos_y = rng.uniform(0, 1, n_objects) * span_y
    vel_x = rng.uniform(-speed, speed, n_objects)
    vel_y = rng.uniform(-speed, speed, n_objects)
    conf = rng.uniform(0.5, 1.0, n_objects)
    frames = []
    for fi in range(1, n_frames + 1):
        keep = rng.uniform(size=n_objects) >= dropout
        jitter = rng.normal(0.0, noise, (n_objects, 4)) if noise > 0 else np.zeros((n_objects, 4))
        x1 = lo_x + pos_x
        y1 = lo_y + pos_y
        boxes = np.stack([x1, y1, x1 + w, y1 + h, conf], axis=1)
        boxes[:, :4] += jitter
        ids = np.arange(1, n_objects + 1)
        frames.append(FrameDetections(fi, boxes[keep], ids[keep]))
        pos_x = pos_x + vel_x
        pos_y = pos_y + vel_y
        # reflect at cell walls
        for pos, vel, span in ((pos_x, vel_x, span_x), (pos_y, vel_y, span_y)):
            under = pos < 0
            over = pos > span
            pos[under] = -pos[under]
            pos[over] = 2 * span[over] - pos[over]
            vel[under | over] *= -1
    return Sequence(name or f"synth-{n_frames}x{n_objects}-s{motion_seed}", frames)


def synth_mot_suite(seed: int = 0, **kwargs) -> List[Sequence]:
    """Eleven synthetic sequences shaped like the MOT15 training set
    (same frame counts, 5500 in total, and peak object counts)."""
    return [
        synth_sequence(frames, objects, seed + k, name=name, **kwargs)
        for k, (name, (frames, objects)) in enumerate(MOT15_TRAIN.items())
    ]


def identity_consistency(seq: Sequence, emissions: Seq[FrameEmissions], min_iou: float = 0.5) -> float:
    """Share of matched ground-truth observations carrying their object's
    majority track id. Emitted boxes are matched to ground truth greedily by
    IoU within each frame."""
    by_frame = {f.frame_index: f for f in seq.frames}
    votes: Dict[int, Dict[int, int]] = {}
    for frame, emitted in emissions:
        f = by_frame.get(frame)
        if f is None or f.gt_ids is None:
            continue
        gts = list(zip(f.gt_ids.tolist(), f.boxes))
        for b, tid in emitted:
            best, best_gid = min_iou, None
            for gid, gb in gts:
                v = iou(b, gb)
                if v >= best:
                    best, best_gid = v, gid
            if best_gid is not None:
                counts = votes.setdefault(best_gid, {})
                counts[tid] = counts.get(tid, 0) + 1
    total = sum(sum(c.values()) for c in votes.values())
    if total == 0:
        return 0.0
    return sum(max(c.values()) for c in votes.values()) / total


def peak_concurrent(emissions: Iterable[FrameEmissions]) -> int:
    return max((len(e) for _, e in emissions), default=0)


def default_seq_dir() -> Optional[Path]:
    """Dataset root from SORTBENCH_MOT_DIR, if set and present."""
    d = os.environ.get("SORTBENCH_MOT_DIR")
    return Path(d) if d and Path(d).is_dir() else None
