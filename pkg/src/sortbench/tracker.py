"""Per-frame SORT update: predict, associate, update, spawn, reap, emit.

Track state lives in preallocated struct-of-arrays buffers owned by a
``TrackerSet``; each phase of a frame is a single compiled call over those
buffers. Buffers only grow (by doubling) when a frame brings more tracks or
detections than ever seen before.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .assignment import HungarianWorkspace, solve_into
from .boxes import BBox, box_to_z_into, iou, iou_kernel, state_to_box_into
from .kalman import (
    P0_DIAG,
    KalmanModel,
    KalmanState,
    allocate_workspace,
    predict_inplace,
    update_inplace,
)
from .smallmat import jit

__all__ = [
    "BBox",
    "FrameDetections",
    "IntraFramePool",
    "Track",
    "TrackerConfig",
    "TrackerSet",
    "associate",
    "iou",
    "run_sequence",
]

Emission = Tuple[BBox, int]
FrameEmissions = Tuple[int, List[Emission]]

# columns of the integer track table
ID, TSU, HITS, STREAK, AGE = range(5)

# indices into the per-frame timestamp vector filled by TrackerSet.step
N_STAMPS = 6


@dataclass(frozen=True)
class TrackerConfig:
    max_age: int = 1
    min_hits: int = 3
    iou_threshold: float = 0.3

    def __post_init__(self):
        if self.max_age < 0 or self.min_hits < 0:
            raise ValueError("max_age and min_hits must be nonnegative")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in [0, 1]")


@dataclass
class FrameDetections:
    """Detections of one frame as an (N, 5) array of x1, y1, x2, y2, score.

    ``gt_ids`` optionally carries ground-truth object ids (synthetic data).
    """

    frame_index: int
    dets: np.ndarray
    gt_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        d = np.ascontiguousarray(self.dets, dtype=np.float64).reshape(-1, 5)
        if len(d) and not (np.isfinite(d).all() and (d[:, 2] > d[:, 0]).all() and (d[:, 3] > d[:, 1]).all()):
            raise ValueError(f"frame {self.frame_index}: detections must be finite with positive extent")
        self.dets = d

    @classmethod
    def from_boxes(cls, frame_index: int, boxes: Iterable[BBox]) -> "FrameDetections":
        return cls(frame_index, np.array([tuple(b) for b in boxes], dtype=np.float64).reshape(-1, 5))

    @property
    def boxes(self) -> List[BBox]:
        return [BBox(*row) for row in self.dets.tolist()]

    def __len__(self) -> int:
        return len(self.dets)


@dataclass
class Track:
    """Snapshot of one live track."""

    id: int
    state: KalmanState
    time_since_update: int
    hits: int
    hit_streak: int
    age: int


# ---------------------------------------------------------------------------
# compiled phases


@jit
def _predict_range(X, P, F, Q, bu, pbox, ok, lo, hi, ws):
    for t in range(lo, hi):
        predict_inplace(X[t], P[t], F, Q, bu, ws)
        ok[t] = state_to_box_into(X[t], pbox[t])


@jit
def _move(X, P, meta, pbox, src, dst):
    X[dst] = X[src]
    P[dst] = P[src]
    meta[dst] = meta[src]
    pbox[dst] = pbox[src]


@jit
def _compact(X, P, meta, pbox, ok, n):
    """Drop rows with ok == 0, preserving order; marks survivors ok."""
    w = 0
    for t in range(n):
        if ok[t]:
            if w != t:
                _move(X, P, meta, pbox, t, w)
            ok[w] = 1
            w += 1
    return w


@jit
def _predict_phase(X, P, meta, F, Q, bu, pbox, ok, n, ws):
    _predict_range(X, P, F, Q, bu, pbox, ok, 0, n, ws)
    return _compact(X, P, meta, pbox, ok, n)


@jit
def _cost_rows(dets, pbox, nt, ious, cost, lo, hi):
    for i in range(lo, hi):
        for t in range(nt):
            v = iou_kernel(dets[i, 0], dets[i, 1], dets[i, 2], dets[i, 3],
                           pbox[t, 0], pbox[t, 1], pbox[t, 2], pbox[t, 3])
            ious[i, t] = v
            cost[i, t] = 1.0 - v


@jit
def _match(ious, cost, nd, nt, thr, match_d, match_t, det_free, trk_free,
           square, fbuf, ibuf):
    for i in range(nd):
        det_free[i] = 1
    for t in range(nt):
        trk_free[t] = 1
    if nd == 0 or nt == 0:
        return 0
    solve_into(cost, nd, nt, square, fbuf, ibuf)
    r2c = ibuf[3]
    nm = 0
    for i in range(nd):
        t = r2c[i]
        if t < nt and ious[i, t] >= thr:
            match_d[nm] = i
            match_t[nm] = t
            nm += 1
            det_free[i] = 0
            trk_free[t] = 0
    return nm


@jit
def _assign_phase(dets, pbox, nd, nt, thr, ious, cost, match_d, match_t, det_free, trk_free,
                  square, fbuf, ibuf):
    _cost_rows(dets, pbox, nt, ious, cost, 0, nd)
    return _match(ious, cost, nd, nt, thr, match_d, match_t, det_free, trk_free,
                  square, fbuf, ibuf)


@jit
def _update_phase(X, P, meta, ok, H, R, dets, match_d, match_t, nm, z, ws):
    for q in range(nm):
        t = match_t[q]
        i = match_d[q]
        box_to_z_into(dets[i, 0], dets[i, 1], dets[i, 2], dets[i, 3], z)
        if update_inplace(X[t], P[t], H, R, z, ws):
            meta[t, TSU] = 0
            meta[t, HITS] += 1
            meta[t, STREAK] += 1
        else:
            ok[t] = 0


@jit
def _spawn_phase(X, P, meta, ok, n, dets, nd, det_free, p0, next_id):
    for i in range(nd):
        if det_free[i] == 0:
            continue
        x = X[n]
        box_to_z_into(dets[i, 0], dets[i, 1], dets[i, 2], dets[i, 3], x)
        x[4] = 0.0
        x[5] = 0.0
        x[6] = 0.0
        P[n, :, :] = 0.0
        for d in range(7):
            P[n, d, d] = p0[d]
        meta[n, ID] = next_id
        meta[n, TSU] = 0
        meta[n, HITS] = 0
        meta[n, STREAK] = 0
        meta[n, AGE] = 0
        ok[n] = 1
        n += 1
        next_id += 1
    return n, next_id


@jit
def _finalize_phase(X, P, meta, pbox, ok, n, n_old, trk_free, max_age, min_hits, frame_index,
                    out_box, out_id):
    for t in range(n_old):
        meta[t, AGE] += 1
        if trk_free[t]:
            meta[t, TSU] += 1
            meta[t, STREAK] = 0
    for t in range(n):
        if meta[t, TSU] > max_age:
            ok[t] = 0
    n = _compact(X, P, meta, pbox, ok, n)
    ne = 0
    for t in range(n):
        if meta[t, TSU] < 1 and (meta[t, STREAK] >= min_hits or frame_index <= min_hits):
            if state_to_box_into(X[t], out_box[ne]):
                out_id[ne] = meta[t, ID]
                ne += 1
    return n, ne


# ---------------------------------------------------------------------------


def _chunks(total: int, parts: int):
    parts = max(1, min(parts, total))
    step, extra = divmod(total, parts)
    lo = 0
    for k in range(parts):
        hi = lo + step + (1 if k < extra else 0)
        yield k, lo, hi
        lo = hi


class IntraFramePool:
    """Fork-join workers for splitting one frame's data-parallel work.

    Each worker gets its own Kalman workspace. With one worker everything
    runs inline on the calling thread.
    """

    def __init__(self, workers: int):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self.workspaces = [allocate_workspace() for _ in range(workers)]
        self._ex = ThreadPoolExecutor(workers, thread_name_prefix="frame") if workers > 1 else None

    def predict(self, ts: "TrackerSet", n: int) -> None:
        m = ts.model
        if self._ex is None or n < 2:
            _predict_range(ts.X, ts.P, m.F, m.Q, m.control, ts.pbox, ts.ok, 0, n, self.workspaces[0])
            return
        futs = [self._ex.submit(_predict_range, ts.X, ts.P, m.F, m.Q, m.control, ts.pbox, ts.ok,
                                lo, hi, self.workspaces[k])
                for k, lo, hi in _chunks(n, self.workers)]
        self._join(futs)

    def cost_rows(self, ts: "TrackerSet", dets: np.ndarray, nd: int, nt: int) -> None:
        if self._ex is None or nd < 2:
            _cost_rows(dets, ts.pbox, nt, ts.ious, ts.cost, 0, nd)
            return
        futs = [self._ex.submit(_cost_rows, dets, ts.pbox, nt, ts.ious, ts.cost, lo, hi)
                for _, lo, hi in _chunks(nd, self.workers)]
        self._join(futs)

    @staticmethod
    def _join(futs) -> None:
        wait(futs)
        for f in futs:
            f.result()

    def close(self) -> None:
        if self._ex is not None:
            self._ex.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TrackerSet:
    """All live tracks of one sequence. Single owner, mutated frame by frame."""

    def __init__(self, config: Optional[TrackerConfig] = None, model: Optional[KalmanModel] = None,
                 p0_diag=P0_DIAG, capacity: int = 32):
        self.config = config or TrackerConfig()
        self.model = model or KalmanModel.constant_velocity()
        self.p0 = np.asarray(p0_diag, dtype=np.float64)
        self.next_id = 1
        self.n = 0
        self.last_frame = 0
        self._cap = 0
        self._det_cap = 0
        self._grow_tracks(capacity)
        self._grow_dets(capacity)
        self._ws = allocate_workspace()
        self._hw = HungarianWorkspace(capacity)
        self._z = np.empty(4)

    # -- buffers --------------------------------------------------------

    def _grow_tracks(self, need: int) -> None:
        if need <= self._cap:
            return
        cap = max(need, 2 * self._cap)
        n = self.n

        def grown(old, shape, dtype=np.float64):
            new = np.zeros(shape, dtype=dtype)
            if old is not None:
                new[:n] = old[:n]
            return new

        self.X = grown(getattr(self, "X", None), (cap, 7))
        self.P = grown(getattr(self, "P", None), (cap, 7, 7))
        self.meta = grown(getattr(self, "meta", None), (cap, 5), np.int64)
        self.pbox = grown(getattr(self, "pbox", None), (cap, 4))
        self.ok = grown(getattr(self, "ok", None), cap, np.uint8)
        self.trk_free = np.zeros(cap, dtype=np.uint8)
        self.match_t = np.zeros(cap, dtype=np.int64)
        self.out_box = np.zeros((cap, 4))
        self.out_id = np.zeros(cap, dtype=np.int64)
        self._cap = cap
        self._resize_cost()

    def _grow_dets(self, need: int) -> None:
        if need <= self._det_cap:
            return
        self._det_cap = max(need, 2 * self._det_cap)
        self.det_free = np.zeros(self._det_cap, dtype=np.uint8)
        self.match_d = np.zeros(self._det_cap, dtype=np.int64)
        self._resize_cost()

    def _resize_cost(self) -> None:
        if self._cap and self._det_cap:
            self.ious = np.zeros((self._det_cap, self._cap))
            self.cost = np.zeros((self._det_cap, self._cap))

    # -- public ---------------------------------------------------------

    @property
    def tracks(self) -> List[Track]:
        return [
            Track(int(m[ID]), KalmanState(self.X[t].copy(), self.P[t].copy()),
                  int(m[TSU]), int(m[HITS]), int(m[STREAK]), int(m[AGE]))
            for t, m in enumerate(self.meta[: self.n])
        ]

    def step(self, frame: FrameDetections, stamps: Optional[np.ndarray] = None,
             pool: Optional[IntraFramePool] = None) -> List[Emission]:
        """Advance every track by one frame and return the emitted (box, id) pairs.

        If ``stamps`` is given, it receives ``time.perf_counter_ns()`` at the
        six phase boundaries: start, after predict, after assignment, after
        update, after spawn, after reap/emit.
        """
        if frame.frame_index <= self.last_frame:
            raise ValueError(f"frame index {frame.frame_index} does not follow {self.last_frame}")
        self.last_frame = frame.frame_index
        cfg, m = self.config, self.model
        dets = frame.dets
        nd = len(dets)
        self._grow_dets(nd)
        self._grow_tracks(self.n + nd)
        hw = self._hw
        hw.ensure(max(nd, self.n))
        timed = stamps is not None
        if timed:
            stamps[0] = time.perf_counter_ns()

        if pool is None:
            n = _predict_phase(self.X, self.P, self.meta, m.F, m.Q, m.control, self.pbox, self.ok,
                               self.n, self._ws)
        else:
            pool.predict(self, self.n)
            n = _compact(self.X, self.P, self.meta, self.pbox, self.ok, self.n)
        if timed:
            stamps[1] = time.perf_counter_ns()

        if pool is None:
            nm = _assign_phase(dets, self.pbox, nd, n, cfg.iou_threshold, self.ious, self.cost,
                               self.match_d, self.match_t, self.det_free, self.trk_free, *hw.arrays())
        else:
            pool.cost_rows(self, dets, nd, n)
            nm = _match(self.ious, self.cost, nd, n, cfg.iou_threshold, self.match_d, self.match_t,
                        self.det_free, self.trk_free, *hw.arrays())
        if timed:
            stamps[2] = time.perf_counter_ns()

        _update_phase(self.X, self.P, self.meta, self.ok, m.H, m.R, dets, self.match_d, self.match_t,
                      nm, self._z, self._ws)
        if timed:
            stamps[3] = time.perf_counter_ns()

        n_total, self.next_id = _spawn_phase(self.X, self.P, self.meta, self.ok, n, dets, nd,
                                             self.det_free, self.p0, self.next_id)
        if timed:
            stamps[4] = time.perf_counter_ns()

        self.n, ne = _finalize_phase(self.X, self.P, self.meta, self.pbox, self.ok, n_total, n,
                                     self.trk_free, cfg.max_age, cfg.min_hits, frame.frame_index,
                                     self.out_box, self.out_id)
        out = [(BBox(b[0], b[1], b[2], b[3]), i)
               for b, i in zip(self.out_box[:ne].tolist(), self.out_id[:ne].tolist())]
        if timed:
            stamps[5] = time.perf_counter_ns()
        return out


def associate(dets: Sequence[BBox], preds: Sequence[BBox], iou_threshold: float):
    """Match detections to predicted boxes by minimum total (1 - IoU).

    Returns ``(matches, unmatched_dets, unmatched_preds)`` where matches are
    (det index, pred index) pairs. Optimal pairs whose IoU falls below the
    threshold are reported as unmatched on both sides.
    """
    d = np.array([tuple(b)[:4] for b in dets], dtype=np.float64).reshape(-1, 4)
    p = np.array([tuple(b)[:4] for b in preds], dtype=np.float64).reshape(-1, 4)
    nd, nt = len(d), len(p)
    ious = np.zeros((max(nd, 1), max(nt, 1)))
    cost = np.zeros_like(ious)
    match_d = np.zeros(max(nd, 1), dtype=np.int64)
    match_t = np.zeros(max(nt, 1), dtype=np.int64)
    det_free = np.zeros(max(nd, 1), dtype=np.uint8)
    trk_free = np.zeros(max(nt, 1), dtype=np.uint8)
    hw = HungarianWorkspace(max(nd, nt, 1))
    nm = _assign_phase(d if nd else np.zeros((1, 4)), p if nt else np.zeros((1, 4)), nd, nt,
                       float(iou_threshold), ious, cost, match_d, match_t, det_free, trk_free,
                       *hw.arrays())
    matches = [(int(match_d[q]), int(match_t[q])) for q in range(nm)]
    return (
        matches,
        [i for i in range(nd) if det_free[i]],
        [t for t in range(nt) if trk_free[t]],
    )


def run_sequence(frames: Iterable[FrameDetections], config: Optional[TrackerConfig] = None,
                 model: Optional[KalmanModel] = None) -> List[FrameEmissions]:
    """Track one sequence from scratch; returns (frame_index, emissions) per frame."""
    ts = TrackerSet(config, model)
    return [(f.frame_index, ts.step(f)) for f in frames]
