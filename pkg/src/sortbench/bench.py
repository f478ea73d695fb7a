"""Strong-, weak- and throughput-scaling runs of the tracking pipeline.

Only the per-frame update loop is timed. Parsing, warm-up (JIT loading)
and result writing happen outside the timed window.

* strong: one sequence at a time; inside each frame, per-track prediction
  and cost-matrix rows are split over ``p`` threads with a join after each
  phase.
* weak: one thread per sequence, at most ``p`` at once, in one process.
* throughput: ``p`` child processes of this package, each single-threaded,
  started together behind a stdin barrier; aggregate FPS is computed over
  the union of their timed windows on the shared monotonic clock.
"""

from __future__ import annotations

import csv
import gc
import io
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence as Seq

import numpy as np

from .kalman import KalmanModel
from .mot_io import Sequence, results_text, save_bundle, synth_sequence
from .tracker import N_STAMPS, FrameEmissions, IntraFramePool, TrackerConfig, TrackerSet

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("sequential", "strong", "weak", "throughput")
PHASES = ("predict", "assign", "update", "spawn", "output")

# cProfile split of the original Python SORT update function, percent
REFERENCE_PHASE_SHARES = {"predict": 30.0, "assign": 22.2, "update": 34.3, "spawn": 3.1, "output": 9.9}

CSV_FIELDS = (
    "mode", "cores", "files", "frames", "fps", "replication", "wall_s", "loop_s",
    "t_predict_ns", "t_assign_ns", "t_update_ns", "t_spawn_ns", "t_output_ns",
    "a", "b", "c", "d", "partial",
)
TABLE_FIELDS = ("cores", "files", "frames", "strong", "weak", "throughput")


class DegenerateFitWarning(RuntimeWarning):
    pass


@dataclass
class PhaseTimings:
    """Nanoseconds spent in each phase, summed over frames."""

    t_predict: int = 0
    t_assign: int = 0
    t_update: int = 0
    t_spawn: int = 0
    t_output: int = 0

    @classmethod
    def from_array(cls, a) -> "PhaseTimings":
        return cls(*(int(v) for v in a))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.int64)

    def __add__(self, other: "PhaseTimings") -> "PhaseTimings":
        return PhaseTimings.from_array(self.as_array() + other.as_array())

    @property
    def total(self) -> int:
        return int(self.as_array().sum())

    def shares(self) -> Dict[str, float]:
        """Percentage of summed phase time per phase."""
        a = self.as_array()
        tot = int(a.sum())
        return {p: (100.0 * v / tot if tot else 0.0) for p, v in zip(PHASES, a.tolist())}


@dataclass
class TimingModel:
    """Frame time ~ a*predict + b*assign + c*update + d*(spawn + output)."""

    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    d: float = 1.0
    residual_rms_ns: float = 0.0
    r2: float = 0.0
    n_samples: int = 0
    degenerate: bool = False


@dataclass
class BenchReport:
    mode: str
    cores: int
    files: int
    frames: int
    fps: float
    phases: PhaseTimings = field(default_factory=PhaseTimings)
    replication: int = 1
    wall_s: float = 0.0
    loop_s: float = 0.0
    timer_overhead_ns: float = 0.0
    timing_model: Optional[TimingModel] = None
    partial: bool = False
    exit_codes: List[int] = field(default_factory=list)
    window_ns: List[int] = field(default_factory=list)
    shared_writable_mappings: Optional[int] = None
    schema_version: int = SCHEMA_VERSION
    # exact-precision tracker output per sequence name; never serialised
    outputs: Optional[Dict[str, str]] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("outputs")
        d["phases"] = {p: v for p, v in zip(PHASES, self.phases.as_array().tolist())}
        d["phase_shares"] = self.phases.shares()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        d = dict(d)
        d.pop("phase_shares", None)
        d["phases"] = PhaseTimings(*(int(d["phases"][p]) for p in PHASES))
        if d.get("timing_model") is not None:
            d["timing_model"] = TimingModel(**d["timing_model"])
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d['schema_version']}")
        return cls(**d)

    def csv_row(self) -> dict:
        tm = self.timing_model or TimingModel()
        row = {
            "mode": self.mode, "cores": self.cores, "files": self.files, "frames": self.frames,
            "fps": f"{self.fps:.1f}", "replication": self.replication,
            "wall_s": f"{self.wall_s:.6f}", "loop_s": f"{self.loop_s:.6f}",
            "a": f"{tm.a:.4f}", "b": f"{tm.b:.4f}", "c": f"{tm.c:.4f}", "d": f"{tm.d:.4f}",
            "partial": int(self.partial),
        }
        for p, v in zip(PHASES, self.phases.as_array().tolist()):
            row[f"t_{p}_ns"] = v
        return row


def report(br: BenchReport | Seq[BenchReport], format: str = "json") -> bytes:
    """Serialise one report (or several) as JSON or CSV with fixed columns."""
    many = not isinstance(br, BenchReport)
    items = list(br) if many else [br]
    if format == "json":
        payload = [r.to_dict() for r in items] if many else items[0].to_dict()
        return (json.dumps(payload, indent=2) + "\n").encode()
    if format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in items:
            w.writerow(r.csv_row())
        return buf.getvalue().encode()
    raise ValueError(f"unknown report format {format!r}")


def parse_report(data: bytes | str) -> BenchReport:
    return BenchReport.from_dict(json.loads(data))


# ---------------------------------------------------------------------------
# timing helpers


def timer_overhead_ns(samples: int = 20000) -> float:
    """Median cost of one perf_counter_ns() call."""
    clock = time.perf_counter_ns
    batch = 100
    costs = []
    for _ in range(samples // batch):
        t0 = clock()
        for _ in range(batch):
            clock()
        costs.append((clock() - t0) / (batch + 1))
    return float(np.median(costs))


def fit_timing_model(samples) -> TimingModel:
    """Least-squares fit of per-frame wall time against phase times.

    ``samples`` is an (N, 5) array of [t_predict, t_assign, t_update,
    t_output_and_tracker_update, t_frame] per frame, any time unit.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 5:
        raise ValueError("samples must be an (N, 5) array")
    X, y = s[:, :4], s[:, 4]
    n = len(s)
    if n < 4 or np.linalg.matrix_rank(X) < 4:
        warnings.warn("timing samples are rank deficient; coefficients default to 1",
                      DegenerateFitWarning, stacklevel=2)
        return TimingModel(n_samples=n, degenerate=True)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    a, b, c, d = (float(v) for v in coef)
    return TimingModel(a, b, c, d, float(np.sqrt(np.mean(resid ** 2))), r2, n)


def model_samples(stamps: np.ndarray, n: int) -> np.ndarray:
    """(n, 5) fit samples from an (n + 1, 6) timestamp table whose last row
    holds the loop end time in column 0."""
    ph = np.diff(stamps[:n], axis=1)
    frame = stamps[1 : n + 1, 0] - stamps[:n, 0]
    return np.column_stack([ph[:, 0], ph[:, 1], ph[:, 2], ph[:, 3] + ph[:, 4], frame])


@dataclass
class SeqRun:
    name: str
    frames: int
    stamps: np.ndarray
    start_ns: int
    end_ns: int
    emissions: List[FrameEmissions]

    @property
    def phases(self) -> PhaseTimings:
        return PhaseTimings.from_array(np.diff(self.stamps[: self.frames], axis=1).sum(axis=0))

    @property
    def loop_ns(self) -> int:
        return self.end_ns - self.start_ns


def track_timed(seq: Sequence, config: TrackerConfig, model: Optional[KalmanModel] = None,
                pool: Optional[IntraFramePool] = None) -> SeqRun:
    ts = TrackerSet(config, model)
    n = len(seq.frames)
    stamps = np.zeros((n + 1, N_STAMPS), dtype=np.int64)
    emissions = []
    append = emissions.append
    step = ts.step
    t0 = time.perf_counter_ns()
    for k, f in enumerate(seq.frames):
        append((f.frame_index, step(f, stamps[k], pool)))
    t1 = time.perf_counter_ns()
    stamps[n, 0] = t1
    return SeqRun(seq.name, n, stamps, t0, t1, emissions)


@contextmanager
def gc_paused():
    """Keep the cyclic collector out of timed regions.

    Retained emissions would otherwise make it rescan a growing heap
    mid-loop (timeit disables it for the same reason). Process-wide, so it
    wraps whole runs rather than individual worker threads.
    """
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def warmup(config: TrackerConfig, model: Optional[KalmanModel] = None, workers: int = 1) -> None:
    """Run a tiny sequence so compiled kernels are loaded before timing."""
    seq = synth_sequence(8, 3, 0)
    track_timed(seq, config, model)
    if workers > 1:
        with IntraFramePool(workers) as pool:
            track_timed(seq, config, model, pool)


def exact_text(emissions: Seq[FrameEmissions]) -> str:
    return results_text(emissions, exact=True)


def _summarise(mode: str, cores: int, seqs: Seq[Sequence], replicate: int, runs: List[SeqRun],
               wall_ns: int, collect: bool, overhead: float) -> BenchReport:
    frames = sum(s.total_frames for s in seqs)
    wall_s = wall_ns / 1e9
    phases = sum((r.phases for r in runs), PhaseTimings())
    samples = np.concatenate([model_samples(r.stamps, r.frames) for r in runs if r.frames]) \
        if any(r.frames for r in runs) else np.zeros((0, 5))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateFitWarning)
        tm = fit_timing_model(samples)
    outputs = {r.name: exact_text(r.emissions) for r in runs} if collect else None
    return BenchReport(
        mode=mode, cores=cores, files=len(seqs), frames=frames,
        fps=frames * replicate / wall_s if wall_s > 0 else 0.0,
        phases=phases, replication=replicate, wall_s=wall_s,
        loop_s=sum(r.loop_ns for r in runs) / 1e9, timer_overhead_ns=overhead,
        timing_model=tm, window_ns=[min((r.start_ns for r in runs), default=0),
                                    max((r.end_ns for r in runs), default=0)],
        outputs=outputs,
    )


def _check(p: int, replicate: int) -> None:
    if p < 1:
        raise ValueError("core count must be >= 1")
    if replicate < 1:
        raise ValueError("replication must be >= 1")


def _pinner(pin: bool):
    if not pin or not hasattr(os, "sched_setaffinity"):
        return None
    cpus = sorted(os.sched_getaffinity(0))
    counter = iter(range(1 << 30))

    def init():
        os.sched_setaffinity(0, {cpus[next(counter) % len(cpus)]})

    return init


def run_sequential(seqs: Seq[Sequence], config: Optional[TrackerConfig] = None, replicate: int = 1,
                   model: Optional[KalmanModel] = None, collect: bool = False) -> BenchReport:
    """Baseline: every sequence in turn on the calling thread."""
    _check(1, replicate)
    config = config or TrackerConfig()
    warmup(config, model)
    overhead = timer_overhead_ns()
    work = list(seqs) * replicate
    with gc_paused():
        t0 = time.perf_counter_ns()
        runs = [track_timed(s, config, model) for s in work]
        wall = time.perf_counter_ns() - t0
    return _summarise("sequential", 1, seqs, replicate, runs, wall, collect, overhead)


def run_strong(seqs: Seq[Sequence], p_cores: int, config: Optional[TrackerConfig] = None,
               replicate: int = 1, model: Optional[KalmanModel] = None, collect: bool = False,
               pin: bool = False) -> BenchReport:
    """Intra-frame parallelism: per-track predict and cost rows over p threads."""
    _check(p_cores, replicate)
    config = config or TrackerConfig()
    warmup(config, model, p_cores)
    overhead = timer_overhead_ns()
    work = list(seqs) * replicate
    with IntraFramePool(p_cores) as pool:
        init = _pinner(pin)
        if init is not None and pool._ex is not None:
            for f in [pool._ex.submit(init) for _ in range(p_cores)]:
                f.result()
        with gc_paused():
            t0 = time.perf_counter_ns()
            runs = [track_timed(s, config, model, pool) for s in work]
            wall = time.perf_counter_ns() - t0
    return _summarise("strong", p_cores, seqs, replicate, runs, wall, collect, overhead)


def run_weak(seqs: Seq[Sequence], p_cores: int, config: Optional[TrackerConfig] = None,
             replicate: int = 1, model: Optional[KalmanModel] = None, collect: bool = False,
             pin: bool = False, barrier=None) -> BenchReport:
    """One worker thread per sequence, at most p at a time, shared process.

    Idle workers take the next pending sequence from the executor queue.
    ``barrier``, if given, is called after warm-up and before timing starts.
    """
    _check(p_cores, replicate)
    config = config or TrackerConfig()
    warmup(config, model)
    overhead = timer_overhead_ns()
    work = list(seqs) * replicate
    if barrier is not None:
        barrier()
    if p_cores == 1:
        with gc_paused():
            t0 = time.perf_counter_ns()
            runs = [track_timed(s, config, model) for s in work]
            wall = time.perf_counter_ns() - t0
    else:
        with ThreadPoolExecutor(p_cores, thread_name_prefix="seq", initializer=_pinner(pin)) as ex, gc_paused():
            t0 = time.perf_counter_ns()
            runs = list(ex.map(lambda s: track_timed(s, config, model), work))
            wall = time.perf_counter_ns() - t0
    return _summarise("weak", p_cores, seqs, replicate, runs, wall, collect, overhead)


def count_shared_writable_mappings() -> Optional[int]:
    """Shared writable memory mappings of this process (Linux only)."""
    try:
        with open("/proc/self/maps") as fh:
            return sum(1 for line in fh if (perm := line.split()[1])[1] == "w" and perm[3] == "s")
    except OSError:
        return None


def _child_lists(work: List[int], p: int, k: Optional[int]) -> List[List[int]]:
    if k is None:
        return [work[i::p] for i in range(p)]
    return [[work[(i * k + j) % len(work)] for j in range(k)] for i in range(p)]


def run_throughput(seqs: Seq[Sequence], p_procs: int, k_files: Optional[int] = None,
                   config: Optional[TrackerConfig] = None, replicate: int = 1,
                   collect: bool = False, pin: bool = False, timeout: float = 600.0) -> BenchReport:
    """p independent single-core processes of this package.

    Without ``k_files`` the (replicated) file list is dealt round-robin over
    the processes. With ``k_files`` every process handles k files, taken
    cyclically from the list starting at offset i*k, p*k files in total.
    Processes that would receive no file are not started.
    """
    _check(p_procs, replicate)
    if k_files is not None and k_files < 1:
        raise ValueError("k_files must be >= 1")
    config = config or TrackerConfig()
    seqs = list(seqs)
    work = list(range(len(seqs))) * replicate
    lists = [lst for lst in _child_lists(work, p_procs, k_files) if lst]

    with tempfile.TemporaryDirectory(prefix="sortbench-") as tmp:
        tmp = Path(tmp)
        procs = []
        for ci, lst in enumerate(lists):
            out = tmp / f"child{ci}.json"
            bundle = tmp / f"child{ci}.npz"
            save_bundle(bundle, [seqs[i] for i in lst])
            cmd = [
                sys.executable, "-m", "sortbench",
                "--mode", "weak", "--cores", "1", "--report", "json", "--out", str(out),
                "--bundle", str(bundle),
                "--max-age", str(config.max_age), "--min-hits", str(config.min_hits),
                "--iou-threshold", repr(config.iou_threshold), "--sync-stdin",
            ]
            if collect:
                cmd += ["--emit-dir", str(tmp / f"emit{ci}")]
            if pin:
                cmd += ["--pin-cpu", str(ci)]
            procs.append((subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                           text=True), out, tmp / f"emit{ci}"))
        # start barrier: every child has loaded data and compiled code
        ready = [proc.stdout.readline().strip() == "ready" for proc, _, _ in procs]
        for proc, _, _ in procs:
            try:
                proc.stdin.write("go\n")
                proc.stdin.close()
            except BrokenPipeError:
                pass
        codes = []
        for proc, _, _ in procs:
            try:
                codes.append(proc.wait(timeout))
            except subprocess.TimeoutExpired:
                proc.kill()
                codes.append(proc.wait())
            proc.stdout.close()

        children: List[BenchReport] = []
        outputs: Dict[str, str] = {}
        for ci, ((proc, out, emit), code, ok) in enumerate(zip(procs, codes, ready)):
            if code != 0 or not ok:
                log.error("throughput child %d exited with %d", proc.pid, code)
                continue
            children.append(parse_report(out.read_text()))
            if collect:
                for f in sorted(emit.glob("*.txt")):
                    # a file handled by several children keeps one entry each
                    key = f.stem if f.stem not in outputs else f"{f.stem}#{ci}"
                    outputs[key] = f.read_text()

    frames = sum(c.frames * c.replication for c in children)
    files = sum(len(lst) for lst in lists)
    start = min((c.window_ns[0] for c in children), default=0)
    end = max((c.window_ns[1] for c in children), default=0)
    wall_s = (end - start) / 1e9
    phases = sum((c.phases for c in children), PhaseTimings())
    mappings = [c.shared_writable_mappings for c in children]
    return BenchReport(
        mode="throughput", cores=p_procs, files=files, frames=frames,
        fps=frames / wall_s if wall_s > 0 else 0.0, phases=phases, replication=1,
        wall_s=wall_s, loop_s=sum(c.loop_s for c in children),
        timer_overhead_ns=float(np.median([c.timer_overhead_ns for c in children])) if children else 0.0,
        timing_model=children[0].timing_model if len(children) == 1 else None,
        partial=len(children) != len(procs), exit_codes=codes, window_ns=[start, end],
        shared_writable_mappings=None if None in mappings else sum(mappings),
        outputs=outputs if collect else None,
    )


# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    baseline: BenchReport
    reports: List[BenchReport]

    def table(self) -> List[dict]:
        rows = {}
        for r in self.reports:
            row = rows.setdefault(r.cores, {"cores": r.cores, "files": self.baseline.files * self.baseline.replication,
                                            "frames": self.baseline.frames * self.baseline.replication})
            row[r.mode] = round(r.fps, 1)
        return [rows[c] for c in sorted(rows)]

    def table_csv(self) -> bytes:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TABLE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.table():
            w.writerow(row)
        return buf.getvalue().encode()

    def to_json(self) -> bytes:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "baseline": self.baseline.to_dict(),
            "reports": [r.to_dict() for r in self.reports],
            "table": self.table(),
        }
        return (json.dumps(doc, indent=2) + "\n").encode()


def sweep(seqs: Seq[Sequence], cores: Seq[int], config: Optional[TrackerConfig] = None,
          replicate: int = 1, pin: bool = False) -> SweepResult:
    """All three modes at every core count, plus a sequential baseline."""
    config = config or TrackerConfig()
    baseline = run_sequential(seqs, config, replicate)
    reports = []
    for p in cores:
        reports.append(run_strong(seqs, p, config, replicate, pin=pin))
        reports.append(run_weak(seqs, p, config, replicate, pin=pin))
        reports.append(run_throughput(seqs, p, None, config, replicate, pin=pin))
        log.info("p=%d strong=%.0f weak=%.0f throughput=%.0f fps", p,
                 *(r.fps for r in reports[-3:]))
    return SweepResult(baseline, reports)
