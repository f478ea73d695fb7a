"""Command-line driver: track MOT sequences or run the scaling benchmarks.

Exit status: 0 on success, 1 on I/O or input errors, 2 on bad flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import bench
from .mot_io import (
    MotParseError,
    find_sequences,
    load_bundle,
    parse_det_file,
    synth_mot_suite,
    write_results,
)
from .tracker import TrackerConfig, run_sequence

log = logging.getLogger("sortbench")

OUT_DIR_ENV = "SORTBENCH_OUT_DIR"
PARTIAL_MARKER = "PARTIAL_RUN"
MODES = ("track", "strong", "weak", "throughput", "sweep")


def _core_list(text: str) -> List[int]:
    try:
        cores = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid core list {text!r}") from None
    if not cores or min(cores) < 1:
        raise argparse.ArgumentTypeError("core counts must be >= 1")
    return cores


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sortbench",
        description="SORT multi-object tracker and strong/weak/throughput scaling benchmark.",
    )
    p.add_argument("--mode", choices=MODES, default="track")
    data = p.add_argument_group("input")
    data.add_argument("--seq-dir", type=Path,
                      help="MOT root holding <name>/det/det.txt; synthetic MOT-shaped data if omitted")
    data.add_argument("--sequences", help="comma-separated sequence names to use from --seq-dir")
    data.add_argument("--bundle", type=Path, help=argparse.SUPPRESS)
    data.add_argument("--seed", type=int, default=0, help="seed for synthetic sequences")
    data.add_argument("--conf-threshold", type=float, default=None,
                      help="drop detections below this confidence (default: keep all)")
    trk = p.add_argument_group("tracker")
    trk.add_argument("--max-age", type=_nonneg, default=1)
    trk.add_argument("--min-hits", type=_nonneg, default=3)
    trk.add_argument("--iou-threshold", type=float, default=0.3)
    out = p.add_argument_group("output")
    out.add_argument("--out-dir", type=Path, help=f"track-mode output directory (env {OUT_DIR_ENV}, default ./out)")
    out.add_argument("--report", choices=("json", "csv"), default=None,
                     help="report format (default json; the cores-by-mode table as CSV for sweep)")
    out.add_argument("--out", default="-", help="report destination, '-' for stdout")
    out.add_argument("--emit-dir", type=Path, help="bench modes: write full-precision tracker output here")
    b = p.add_argument_group("benchmark")
    b.add_argument("--cores", type=_core_list, default=[1], help="core count, or comma list (e.g. 1,18,36,72)")
    b.add_argument("--replicate", type=_positive, default=1, help="repeat the file list this many times")
    b.add_argument("--k-files", type=_positive, default=None, help="throughput: files per process")
    b.add_argument("--pin", action="store_true", help="pin worker threads/processes to distinct CPUs")
    b.add_argument("--pin-cpu", type=_nonneg, default=None, help=argparse.SUPPRESS)
    b.add_argument("--sync-stdin", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def load_sequences(args) -> list:
    if args.bundle is not None:
        return load_bundle(args.bundle)
    if args.seq_dir is None:
        return synth_mot_suite(args.seed)
    names = [n for n in args.sequences.split(",") if n] if args.sequences else None
    paths = find_sequences(args.seq_dir, names)
    if not paths:
        raise FileNotFoundError(f"no */det/det.txt under {args.seq_dir}")
    return [parse_det_file(p, args.conf_threshold) for p in paths]


def _emit(data: bytes, dest: str) -> None:
    if dest == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        Path(dest).write_bytes(data)


def _stdin_barrier() -> None:
    print("ready", flush=True)
    sys.stdin.readline()


def run_track(args, seqs, config: TrackerConfig) -> None:
    out_dir = args.out_dir or Path(os.environ.get(OUT_DIR_ENV) or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for seq in seqs:
            tmp = out_dir / f".{seq.name}.txt.tmp"
            write_results(tmp, run_sequence(seq.frames, config))
            staged.append((tmp, out_dir / f"{seq.name}.txt"))
        for tmp, final in staged:
            tmp.replace(final)
    except BaseException as e:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        try:
            (out_dir / PARTIAL_MARKER).write_text(f"{type(e).__name__}: {e}\n")
        except OSError:
            pass
        raise
    log.info("wrote %d result files to %s", len(staged), out_dir)


def _write_outputs(rep: bench.BenchReport, emit_dir: Optional[Path]) -> None:
    if emit_dir is None or rep.outputs is None:
        return
    emit_dir.mkdir(parents=True, exist_ok=True)
    for name, text in rep.outputs.items():
        (emit_dir / f"{name}.txt").write_text(text)


def run_bench(args, seqs, config: TrackerConfig) -> None:
    collect = args.emit_dir is not None
    fmt = args.report or ("csv" if args.mode == "sweep" else "json")
    if args.mode == "sweep":
        res = bench.sweep(seqs, args.cores, config, args.replicate, pin=args.pin)
        for r in [res.baseline] + res.reports:
            log.info("%-10s p=%-3d %10.1f fps  shares %s", r.mode, r.cores, r.fps,
                     {k: round(v, 1) for k, v in r.phases.shares().items()})
        _emit(res.table_csv() if fmt == "csv" else res.to_json(), args.out)
        return
    barrier = _stdin_barrier if args.sync_stdin else None
    reports = []
    for p in args.cores:
        if args.mode == "strong":
            rep = bench.run_strong(seqs, p, config, args.replicate, collect=collect, pin=args.pin)
        elif args.mode == "weak":
            rep = bench.run_weak(seqs, p, config, args.replicate, collect=collect, pin=args.pin,
                                 barrier=barrier)
        else:
            rep = bench.run_throughput(seqs, p, args.k_files, config, args.replicate,
                                       collect=collect, pin=args.pin)
        if rep.mode != "throughput":
            rep.shared_writable_mappings = bench.count_shared_writable_mappings()
        _write_outputs(rep, args.emit_dir)
        reports.append(rep)
    _emit(bench.report(reports[0] if len(reports) == 1 else reports, fmt), args.out)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if not 0.0 <= args.iou_threshold <= 1.0:
        parser.error("--iou-threshold must lie in [0, 1]")
    if args.k_files is not None and args.mode != "throughput":
        parser.error("--k-files only applies to --mode throughput")
    if args.pin_cpu is not None and hasattr(os, "sched_setaffinity"):
        cpus = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpus[args.pin_cpu % len(cpus)]})
    config = TrackerConfig(args.max_age, args.min_hits, args.iou_threshold)
    try:
        seqs = load_sequences(args)
        if args.mode == "track":
            run_track(args, seqs, config)
        else:
            run_bench(args, seqs, config)
    except (OSError, MotParseError) as e:
        print(f"sortbench: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
