import logging

import numpy as np
import pytest

from sortbench.boxes import BBox
from sortbench.mot_io import (
    MOT15_TRAIN,
    MotParseError,
    default_seq_dir,
    find_sequences,
    format_result,
    load_bundle,
    parse_det_file,
    parse_line,
    peak_concurrent,
    save_bundle,
    synth_mot_suite,
    synth_sequence,
    write_results,
    write_seq_dir,
)
from sortbench.tracker import FrameDetections, run_sequence


def test_parse_line_example(tmp_path):
    p = tmp_path / "det.txt"
    p.write_text("1,-1,10,20,30,40,0.9,-1,-1,-1\n")
    seq = parse_det_file(p)
    (f,) = seq.frames
    assert f.frame_index == 1
    assert f.boxes == [BBox(10, 20, 40, 60, 0.9)]


def test_empty_file(tmp_path):
    p = tmp_path / "det.txt"
    p.write_text("")
    seq = parse_det_file(p)
    assert seq.total_frames == 0 and seq.frames == []


def test_gaps_become_empty_frames(tmp_path):
    p = tmp_path / "det.txt"
    p.write_text("1,-1,0,0,5,5,1,-1,-1,-1\n\n4,-1,0,0,5,5,1,-1,-1,-1\n4,-1,9,9,5,5,1,-1,-1,-1\n")
    seq = parse_det_file(p)
    assert [len(f) for f in seq.frames] == [1, 0, 0, 2]
    assert seq.total_frames == 4 and seq.n_detections == 3


@pytest.mark.parametrize("line", [
    "1,-1,10,20,30,40,0.9,-1,-1",
    "1,-1,10,20,30,40,0.9,-1,-1,-1,7",
    "0,-1,10,20,30,40,0.9,-1,-1,-1",
    "1.5,-1,10,20,30,40,0.9,-1,-1,-1",
    "1,-1,10,2O,30,40,0.9,-1,-1,-1",
    "1,-1,10,20,nan,40,0.9,-1,-1,-1",
    "1;-1;10;20;30;40;0.9;-1;-1;-1",
])
def test_malformed_lines(line):
    with pytest.raises(MotParseError):
        parse_line(line)


def test_parse_error_carries_line_number(tmp_path):
    p = tmp_path / "det.txt"
    p.write_text("1,-1,10,20,30,40,0.9,-1,-1,-1\n2,-1,10,20,30\n")
    with pytest.raises(MotParseError) as e:
        parse_det_file(p)
    assert e.value.lineno == 2 and "det.txt:2" in str(e.value)


def test_nonpositive_extent_skipped_with_warning(tmp_path, caplog):
    p = tmp_path / "det.txt"
    p.write_text("1,-1,0,0,5,5,1,-1,-1,-1\n1,-1,0,0,0,5,1,-1,-1,-1\n2,-1,0,0,5,-1,1,-1,-1,-1\n")
    with caplog.at_level(logging.WARNING):
        seq = parse_det_file(p)
    assert seq.skipped == 2 and seq.n_detections == 1 and seq.total_frames == 2
    assert "skipped 2" in caplog.text


def test_conf_threshold(tmp_path):
    p = tmp_path / "det.txt"
    p.write_text("1,-1,0,0,5,5,0.2,-1,-1,-1\n1,-1,9,9,5,5,0.8,-1,-1,-1\n")
    assert parse_det_file(p).n_detections == 2
    assert parse_det_file(p, conf_threshold=0.5).n_detections == 1


def test_result_format(tmp_path):
    assert format_result(1, 3, BBox(0, 0, 2, 2)) == "1,3,0.00,0.00,2.00,2.00,1,-1,-1,-1"
    p = tmp_path / "out.txt"
    write_results(p, [])
    assert p.read_bytes() == b""
    write_results(p, [(2, [(BBox(0, 0, 1, 1), 5), (BBox(1, 1, 2, 2), 2)]), (1, [(BBox(0, 0, 3, 3), 9)])])
    assert [ln.split(",")[:2] for ln in p.read_text().splitlines()] == [["1", "9"], ["2", "2"], ["2", "5"]]


def test_write_to_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_results(tmp_path / "missing" / "x.txt", [])


def test_round_trip_within_quantisation(tmp_path, rng):
    n = 1000
    frame = np.sort(rng.integers(1, 200, n))
    xy = rng.uniform(-50, 1900, (n, 2))
    wh = rng.uniform(1, 400, (n, 2))
    emissions = {}
    for k in range(n):
        emissions.setdefault(int(frame[k]), []).append((BBox(*xy[k], *(xy[k] + wh[k])), k + 1))
    p = tmp_path / "res.txt"
    write_results(p, sorted(emissions.items()))
    seq = parse_det_file(p)
    got = np.concatenate([f.dets[:, :4] for f in seq.frames])
    want = np.concatenate([[b[:4] for b, _ in sorted(e, key=lambda t: t[1])] for _, e in sorted(emissions.items())])
    assert len(got) == n
    assert np.abs(got - want).max() <= 0.01


def test_det_file_round_trip_is_order_preserving(tmp_path):
    seq = synth_sequence(30, 4, 3, dropout=0.2, noise=1.0)
    (p,) = write_seq_dir(tmp_path, [seq])
    back = parse_det_file(p)
    assert back.name == seq.name
    last = max(f.frame_index for f in seq.frames if len(f))
    for a, b in zip(seq.frames[:last], back.frames):
        np.testing.assert_allclose(a.dets, b.dets, rtol=1e-12, atol=1e-9)
    assert find_sequences(tmp_path) == [p]
    with pytest.raises(FileNotFoundError):
        find_sequences(tmp_path, ["nope"])


def test_bundle_is_bit_exact(tmp_path):
    seqs = synth_mot_suite(4)[:3]
    seqs[0].frames[-1] = FrameDetections(seqs[0].frames[-1].frame_index, np.zeros((0, 5)))
    save_bundle(tmp_path / "b.npz", seqs)
    back = load_bundle(tmp_path / "b.npz")
    assert [s.name for s in back] == [s.name for s in seqs]
    for a, b in zip(seqs, back):
        assert a.total_frames == b.total_frames
        for fa, fb in zip(a.frames, b.frames):
            assert fa.frame_index == fb.frame_index
            assert np.array_equal(fa.dets, fb.dets)


def test_synth_examples():
    s = synth_sequence(1, 1, 0)
    assert s.total_frames == 1 and len(s.frames[0]) == 1
    a, b = synth_sequence(100, 5, 7, dropout=0.2), synth_sequence(100, 5, 7, dropout=0.2)
    assert a.total_frames == 100 and max(len(f) for f in a.frames) <= 5
    assert all(np.array_equal(x.dets, y.dets) for x, y in zip(a.frames, b.frames))
    with pytest.raises(ValueError):
        synth_sequence(0, 1)


def test_synth_suite_shape():
    suite = synth_mot_suite(0)
    assert len(suite) == 11
    assert sum(s.total_frames for s in suite) == 5500
    for s in suite:
        frames, peak = MOT15_TRAIN[s.name]
        assert s.total_frames == frames
        assert max(len(f) for f in s.frames) == peak <= 13


def test_identity_consistency_at_one_pixel_per_frame():
    from sortbench.mot_io import identity_consistency

    for seed in range(3):
        seq = synth_sequence(200, 8, seed, speed=1.0)
        assert identity_consistency(seq, run_sequence(seq.frames)) >= 0.95


needs_mot = pytest.mark.skipif(default_seq_dir() is None, reason="SORTBENCH_MOT_DIR not set")


@needs_mot
def test_pets09_frame_count():
    seq = parse_det_file(default_seq_dir() / "PETS09-S2L1" / "det" / "det.txt")
    assert seq.total_frames == 795


@needs_mot
def test_venice2_peak_band():
    seq = parse_det_file(default_seq_dir() / "Venice-2" / "det" / "det.txt")
    assert 0.5 * 13 <= peak_concurrent(run_sequence(seq.frames)) <= 2 * 13
