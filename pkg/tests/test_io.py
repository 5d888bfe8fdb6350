import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monoref.geometry import RigidPose, random_rotation
from monoref.io import (
    MAGIC,
    ContainerError,
    DuplicateRecordError,
    MagicMismatchError,
    MetricReport,
    TruncatedError,
    UnknownDtypeError,
    decode_container,
    encode_container,
    export_ply,
    fixture_from_records,
    fixture_records,
    load_container,
    load_fixtures,
    pose_records,
    poses_from_records,
    read_ply,
    save_container,
    save_fixtures,
)
from monoref.pointmap import ImageGrid, Pointmap
from monoref.refinement import RefineConfig, RefineWeights, init_weights
from monoref.synth import make_scene, swap_views

DTYPES = (np.float64, np.float32, np.uint8)


def random_records(rng, n=None):
    n = int(rng.integers(0, 6)) if n is None else n
    out = {}
    for k in range(n):
        shape = tuple(int(s) for s in rng.integers(0, 5, size=int(rng.integers(0, 4))))
        dt = DTYPES[int(rng.integers(0, 3))]
        if dt is np.uint8:
            arr = rng.integers(0, 256, size=shape).astype(np.uint8)
        else:
            arr = rng.normal(size=shape).astype(dt)
        out[f"rec{k}/é{rng.integers(1000)}"] = arr
    return out


def assert_same_records(a, b):
    assert list(a) == list(b)
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].shape == b[k].shape
        assert a[k].tobytes() == b[k].tobytes()


# --- container ---------------------------------------------------------------------


def test_round_trip_random_sets():
    for seed in range(100):
        rec = random_records(np.random.default_rng(seed))
        buf = encode_container(rec)
        back = decode_container(buf)
        assert_same_records(rec, back)
        assert encode_container(back) == buf


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8), st.lists(st.floats(allow_nan=True), max_size=6), max_size=4))
def test_round_trip_property(d):
    # bit patterns survive, NaN payloads included
    rec = {k: np.array(v, dtype=np.float64) for k, v in d.items()}
    back = decode_container(encode_container(rec))
    assert_same_records(rec, back)


def test_layout_header():
    buf = encode_container({"ab": np.arange(3, dtype=np.uint8)})
    assert buf[:4] == MAGIC
    assert struct.unpack_from("<I", buf, 4) == (1,)
    assert struct.unpack_from("<I", buf, 8) == (2,)
    assert buf[12:14] == b"ab"
    assert buf[14:16] == bytes([2, 1])
    assert struct.unpack_from("<I", buf, 16) == (3,)
    assert struct.unpack_from("<Q", buf, 20) == (0,)
    assert buf[28:] == bytes([0, 1, 2])


def test_empty_container():
    assert decode_container(encode_container({})) == {}


def test_file_round_trip(tmp_path):
    rec = random_records(np.random.default_rng(1), 4)
    save_container(tmp_path / "x.pmz", rec)
    assert_same_records(rec, load_container(tmp_path / "x.pmz"))


def test_bool_stored_as_u8():
    back = decode_container(encode_container({"m": np.array([True, False])}))
    assert back["m"].dtype == np.uint8
    np.testing.assert_array_equal(back["m"], [1, 0])


def test_big_endian_input_normalized():
    a = np.arange(4, dtype=">f8")
    back = decode_container(encode_container({"a": a}))
    assert back["a"].dtype == np.dtype("<f8")
    np.testing.assert_array_equal(back["a"], a)


def test_magic_mismatch():
    buf = bytearray(encode_container({"a": np.zeros(2)}))
    buf[0] ^= 0xFF
    with pytest.raises(MagicMismatchError):
        decode_container(bytes(buf))
    with pytest.raises(MagicMismatchError):
        decode_container(b"")


def test_truncation_names_record():
    buf = encode_container({"first": np.zeros(2), "second": np.ones(3)})
    with pytest.raises(TruncatedError, match="second"):
        decode_container(buf[:-1])


def test_truncation_inside_table():
    buf = encode_container({"alpha": np.zeros(2)})
    for cut in range(5, 28):
        with pytest.raises(TruncatedError):
            decode_container(buf[:cut])


def test_duplicate_names():
    with pytest.raises(DuplicateRecordError):
        encode_container([("a", np.zeros(1)), ("a", np.ones(1))])
    # hand-build a container whose table repeats a name
    one = encode_container({"a": np.zeros(1)})
    entry = one[8:8 + 4 + 1 + 2 + 4 + 8]
    buf = MAGIC + struct.pack("<I", 2) + entry + entry + one[len(MAGIC) + 4 + len(entry):]
    with pytest.raises(DuplicateRecordError):
        decode_container(buf)


def test_unknown_dtype():
    with pytest.raises(UnknownDtypeError):
        encode_container({"i": np.arange(3, dtype=np.int64)})
    buf = bytearray(encode_container({"a": np.zeros(1)}))
    buf[13] = 9  # dtype code byte of the only record
    with pytest.raises(UnknownDtypeError):
        decode_container(bytes(buf))


def test_overlapping_records():
    buf = bytearray(encode_container({"a": np.zeros(2), "b": np.ones(2)}))
    # record b sits after a; point its offset into a's bytes
    pos = buf.index(b"b") + 1 + 2 + 4
    struct.pack_into("<Q", buf, pos, 8)
    with pytest.raises(ContainerError, match="overlap"):
        decode_container(bytes(buf))


def test_errors_are_value_errors():
    for cls in (MagicMismatchError, TruncatedError, DuplicateRecordError, UnknownDtypeError):
        assert issubclass(cls, ContainerError) and issubclass(cls, ValueError)


# --- PLY ---------------------------------------------------------------------------


def test_ply_zero_vertices(tmp_path):
    pm = Pointmap(np.ones((2, 2, 3)), np.zeros((2, 2), bool))
    assert export_ply(pm, None, tmp_path / "e.ply") == 0
    xyz, rgb = read_ply(tmp_path / "e.ply")
    assert xyz.shape == (0, 3) and rgb.shape == (0, 3)


def test_ply_three_vertices(tmp_path):
    pts = np.arange(12, dtype=np.float64).reshape(2, 2, 3) / 7.0
    valid = np.array([[True, False], [True, True]])
    colors = np.zeros((2, 2, 3))
    colors[..., 0] = 1.0
    n = export_ply(Pointmap(pts, valid), ImageGrid(colors), tmp_path / "p.ply")
    assert n == 3
    text = (tmp_path / "p.ply").read_text()
    assert "element vertex 3" in text
    xyz, rgb = read_ply(tmp_path / "p.ply")
    np.testing.assert_allclose(xyz, pts[valid], rtol=1e-8)
    np.testing.assert_array_equal(rgb, np.tile([255, 0, 0], (3, 1)))


# --- fixtures, weights and poses ----------------------------------------------------


def test_fixture_round_trip(tmp_path):
    scenes = [make_scene(0), swap_views(make_scene(1))]
    save_fixtures(tmp_path / "f.pmz", scenes)
    back = load_fixtures(tmp_path / "f.pmz")
    assert len(back) == 2
    for a, b in zip(scenes, back):
        assert encode_container(fixture_records(a)) == encode_container(fixture_records(b))
        assert b.swapped == a.swapped and b.noise == a.noise


def test_fixture_records_prefix():
    rec = fixture_records(make_scene(2), prefix="s/")
    assert all(k.startswith("s/") for k in rec)
    meta = json.loads(bytes(rec["s/meta"]).decode())
    assert meta["seed"] == 2
    assert fixture_from_records(rec, "s/").seed == 2


@pytest.mark.parametrize("feedback", [False, True])
def test_weights_round_trip(feedback):
    w = init_weights(RefineConfig(hidden=4, cond=3, mono_channels=5, pair_channels=6, feedback=feedback), seed=3)
    back = RefineWeights.from_dict(decode_container(encode_container(w.as_dict())))
    assert back.feedback == feedback
    for (na, ta), (nb, tb) in zip(w.named(), back.named()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


def test_pose_records_round_trip():
    rng = np.random.default_rng(4)
    sets = [[RigidPose(random_rotation(rng), rng.normal(size=3)) for _ in range(k)] for k in (2, 3)]
    back = poses_from_records(decode_container(encode_container(pose_records(sets))))
    for a, b in zip(sets, back):
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p.R, q.R)
            np.testing.assert_array_equal(p.t, q.t)


# --- reports -----------------------------------------------------------------------


def _report():
    r = MetricReport(seed=5, config={"iters": 2})
    r.add_scene("scene0000", {"mAA30": 0.5, "RRA@5": 1.0, "acc_mean": 0.01})
    r.add_scene("scene0001", {"mAA30": 1.0, "RRA@5": 0.0, "acc_mean": 0.03})
    return r


def test_report_aggregate():
    agg = _report().aggregate
    assert agg == {"mAA30": 0.75, "RRA@5": 0.5, "acc_mean": pytest.approx(0.02)}


def test_report_json_and_table_agree(tmp_path):
    r = _report()
    j, t = r.write(tmp_path, "pose")
    loaded = MetricReport.from_json(j.read_text())
    assert loaded.to_dict() == r.to_dict()
    rows = MetricReport.parse_table(t.read_text())
    for row in r.scenes:
        for k, v in row.items():
            if k != "scene":
                assert rows[row["scene"]][k] == pytest.approx(v, abs=5e-7)
    for k, v in r.aggregate.items():
        assert rows["mean"][k] == pytest.approx(v, abs=5e-7)
    assert t.read_text().startswith("seed 5")
