"""Binary record container, PLY export, fixture/weight serialization and metric reports.

Container layout (all integers little-endian)::

    b"PMZ1"
    u32  record count
    per record:
        u32  name length, then the utf-8 name
        u8   dtype code (0 = f64, 1 = f32, 2 = u8)
        u8   ndim, then ndim × u32 extents
        u64  byte offset of the data, relative to the payload start
    payload: the records' data, row-major, little-endian, back to back

The payload starts right after the record table.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidPose
from .pointmap import ConfidenceMap, ImageGrid, Pointmap
from .synth import NoiseSpec, SceneFixture

__all__ = [
    "ContainerError",
    "MagicMismatchError",
    "TruncatedError",
    "DuplicateRecordError",
    "UnknownDtypeError",
    "MAGIC",
    "save_container",
    "load_container",
    "encode_container",
    "decode_container",
    "export_ply",
    "read_ply",
    "fixture_records",
    "fixture_from_records",
    "save_fixtures",
    "load_fixtures",
    "pose_records",
    "poses_from_records",
    "MetricReport",
]

MAGIC = b"PMZ1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("u1"): 2}


class ContainerError(ValueError):
    """Malformed or unreadable container."""


class MagicMismatchError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DuplicateRecordError(ContainerError):
    pass


class UnknownDtypeError(ContainerError):
    pass


def _normalize(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    if dt not in _CODES:
        raise UnknownDtypeError(f"record {name!r}: unsupported dtype {arr.dtype} (use f64, f32 or u8)")
    return np.asarray(arr, dtype=dt, order="C")


def _items(records):
    items = list(records.items()) if isinstance(records, dict) else list(records)
    seen = set()
    for name, _ in items:
        if name in seen:
            raise DuplicateRecordError(f"duplicate record name {name!r}")
        seen.add(name)
    return items


def encode_container(records) -> bytes:
    """Serialize ``{name: array}`` (or a list of pairs) to container bytes."""
    items = [(name, _normalize(name, arr)) for name, arr in _items(records)]
    table = bytearray()
    offset = 0
    for name, arr in items:
        raw = name.encode("utf-8")
        table += struct.pack("<I", len(raw)) + raw
        table += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", offset)
        offset += arr.nbytes
    out = bytearray(MAGIC) + struct.pack("<I", len(items)) + table
    for _, arr in items:
        out += arr.tobytes(order="C")
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise TruncatedError(f"container truncated while reading {what}")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"container truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    (count,) = r.take("<I", "record count")
    table = []
    names = set()
    for k in range(count):
        (nlen,) = r.take("<I", f"name length of record {k}")
        try:
            name = r.raw(nlen, f"name of record {k}").decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerError(f"record {k}: name is not valid utf-8") from None
        if name in names:
            raise DuplicateRecordError(f"duplicate record name {name!r}")
        names.add(name)
        code, ndim = r.take("<BB", f"dtype of record {name!r}")
        if code not in _DTYPES:
            raise UnknownDtypeError(f"record {name!r}: unknown dtype code {code}")
        shape = r.take(f"<{ndim}I", f"shape of record {name!r}")
        (offset,) = r.take("<Q", f"offset of record {name!r}")
        table.append((name, _DTYPES[code], shape, offset))
    start = r.pos
    payload = len(buf) - start
    spans = []
    out = {}
    for name, dt, shape, offset in table:
        nbytes = dt.itemsize * math.prod(shape)
        if offset + nbytes > payload:
            raise TruncatedError(
                f"record {name!r} needs bytes [{offset}, {offset + nbytes}) but payload has {payload}"
            )
        spans.append((offset, offset + nbytes, name))
        out[name] = np.frombuffer(buf, dtype=dt, count=math.prod(shape), offset=start + offset).reshape(shape).copy()
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1 and b1 > b0 and a1 > a0:
            raise ContainerError(f"records {an!r} and {bn!r} overlap")
    return out


def save_container(path, records) -> None:
    Path(path).write_bytes(encode_container(records))


def load_container(path) -> dict[str, np.ndarray]:
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# PLY


def export_ply(pm: Pointmap, colors: ImageGrid | None, path) -> int:
    """ASCII PLY of the valid pixels (xyz + rgb); returns the vertex count."""
    if colors is not None and colors.colors.shape[:2] != pm.shape:
        raise ValueError(f"export_ply: image {colors.colors.shape[:2]} does not match pointmap {pm.shape}")
    pts = pm.valid_points()
    if colors is None:
        rgb = np.full((len(pts), 3), 255, dtype=np.int64)
    else:
        rgb = np.clip(np.round(colors.colors[pm.valid] * 255.0), 0, 255).astype(np.int64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}" for p, c in zip(pts, rgb)]
    Path(path).write_text("\n".join(lines) + "\n")
    return len(pts)


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an ASCII PLY written by :func:`export_ply` into (xyz, rgb)."""
    lines = Path(path).read_text().splitlines()
    n = 0
    for k, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        if line == "end_header":
            body = lines[k + 1 : k + 1 + n]
            break
    else:
        raise ValueError("read_ply: missing end_header")
    if len(body) != n:
        raise ValueError(f"read_ply: expected {n} vertices, found {len(body)}")
    vals = np.array([line.split() for line in body], dtype=np.float64).reshape(n, 6)
    return vals[:, :3], vals[:, 3:].astype(np.int64)


# ---------------------------------------------------------------------------
# fixtures and poses


def fixture_records(fx: SceneFixture, prefix: str = "") -> dict[str, np.ndarray]:
    meta = dict(seed=fx.seed, height=fx.height, width=fx.width, focals=list(fx.focals),
                noise=asdict(fx.noise), swapped=fx.swapped)
    rec = {f"{prefix}meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for v in range(2):
        p = f"{prefix}view{v}/"
        rec[p + "image"] = fx.images[v].colors
        rec[p + "valid"] = fx.gt_world[v].valid
        rec[p + "gt_world"] = fx.gt_world[v].points
        rec[p + "gt_local"] = fx.gt_local[v].points
        rec[p + "gt_depth"] = fx.gt_depth[v]
        rec[p + "pose_R"] = fx.poses[v].R
        rec[p + "pose_t"] = fx.poses[v].t
        rec[p + "pair"] = fx.pair[v].points
        rec[p + "conf"] = fx.conf[v].weights
        rec[p + "mono"] = fx.mono[v].points
        rec[p + "feat_pair"] = fx.feat_pair[v]
        rec[p + "feat_mono"] = fx.feat_mono[v]
    return rec


def fixture_from_records(rec: dict, prefix: str = "") -> SceneFixture:
    try:
        meta = json.loads(bytes(rec[f"{prefix}meta"]).decode("utf-8"))
    except KeyError:
        raise ContainerError(f"missing record {prefix}meta") from None

    def get(name):
        try:
            return rec[prefix + name]
        except KeyError:
            raise ContainerError(f"missing record {prefix}{name}") from None

    views = []
    for v in range(2):
        p = f"view{v}/"
        valid = get(p + "valid").astype(bool)
        views.append(
            dict(
                image=ImageGrid(get(p + "image")),
                gt_world=Pointmap(get(p + "gt_world"), valid),
                gt_local=Pointmap(get(p + "gt_local"), valid),
                gt_depth=get(p + "gt_depth"),
                pose=RigidPose(get(p + "pose_R"), get(p + "pose_t")),
                pair=Pointmap(get(p + "pair"), valid),
                conf=ConfidenceMap(get(p + "conf")),
                mono=Pointmap(get(p + "mono"), valid),
                feat_pair=get(p + "feat_pair"),
                feat_mono=get(p + "feat_mono"),
            )
        )

    def both(key):
        return tuple(view[key] for view in views)

    return SceneFixture(
        seed=int(meta["seed"]),
        height=int(meta["height"]),
        width=int(meta["width"]),
        images=both("image"),
        gt_world=both("gt_world"),
        gt_local=both("gt_local"),
        gt_depth=both("gt_depth"),
        poses=both("pose"),
        focals=tuple(float(f) for f in meta["focals"]),
        pair=both("pair"),
        conf=both("conf"),
        mono=both("mono"),
        feat_pair=both("feat_pair"),
        feat_mono=both("feat_mono"),
        noise=NoiseSpec(**meta["noise"]),
        swapped=bool(meta["swapped"]),
    )


def _scene_prefix(k: int) -> str:
    return f"scene{k:04d}/"


def save_fixtures(path, fixtures) -> None:
    rec = {}
    for k, fx in enumerate(fixtures):
        rec.update(fixture_records(fx, _scene_prefix(k)))
    save_container(path, rec)


def _scene_count(rec: dict) -> int:
    return len({name.split("/", 1)[0] for name in rec if name.startswith("scene")})


def load_fixtures(path) -> list[SceneFixture]:
    rec = load_container(path)
    return [fixture_from_records(rec, _scene_prefix(k)) for k in range(_scene_count(rec))]


def pose_records(pose_sets) -> dict[str, np.ndarray]:
    """One ``sceneNNNN/R`` (K×3×3) and ``sceneNNNN/t`` (K×3) pair per pose set."""
    rec = {}
    for k, poses in enumerate(pose_sets):
        rec[_scene_prefix(k) + "R"] = np.stack([p.R for p in poses])
        rec[_scene_prefix(k) + "t"] = np.stack([p.t for p in poses])
    return rec


def poses_from_records(rec: dict) -> list[list[RigidPose]]:
    out = []
    for k in range(_scene_count(rec)):
        try:
            R = rec[_scene_prefix(k) + "R"]
            t = rec[_scene_prefix(k) + "t"]
        except KeyError as exc:
            raise ContainerError(f"missing pose record {exc.args[0]}") from None
        if R.ndim != 3 or R.shape[1:] != (3, 3) or t.shape != (R.shape[0], 3):
            raise ContainerError(f"scene {k}: pose records have shapes {R.shape} and {t.shape}")
        out.append([RigidPose(r, tt) for r, tt in zip(R, t)])
    return out


# ---------------------------------------------------------------------------
# reports

REPORT_FIELDS = (
    "mAA30",
    "RRA@5",
    "RRA@10",
    "RRA@15",
    "RTA@5",
    "RTA@10",
    "RTA@15",
    "acc_mean",
    "acc_median",
    "comp_mean",
    "comp_median",
)


@dataclass
class MetricReport:
    """Per-scene metric rows, their mean, the run configuration and the seed."""

    seed: int
    config: dict = field(default_factory=dict)
    scenes: list = field(default_factory=list)

    def add_scene(self, name: str, values: dict) -> None:
        row = {"scene": name}
        row.update({k: float(v) for k, v in values.items()})
        self.scenes.append(row)

    @property
    def aggregate(self) -> dict:
        keys = [k for k in REPORT_FIELDS if self.scenes and all(k in row for row in self.scenes)]
        return {k: float(np.mean([row[k] for row in self.scenes])) for k in keys}

    def to_dict(self) -> dict:
        return {"seed": self.seed, "config": self.config, "scenes": self.scenes, "aggregate": self.aggregate}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(seed=d["seed"], config=d["config"], scenes=d["scenes"])

    def to_table(self) -> str:
        keys = [k for k in REPORT_FIELDS if any(k in row for row in self.scenes)]
        header = ["scene"] + keys
        rows = [[row["scene"]] + [f"{row[k]:.6f}" if k in row else "-" for k in keys] for row in self.scenes]
        agg = self.aggregate
        rows.append(["mean"] + [f"{agg[k]:.6f}" if k in agg else "-" for k in keys])
        widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [f"seed {self.seed}", fmt.format(*header)] + [fmt.format(*r) for r in rows]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_table(text: str) -> dict[str, dict[str, float]]:
        """Rows of a table written by :meth:`to_table`, keyed by scene name."""
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = lines[1].split()
        out = {}
        for ln in lines[2:]:
            cells = ln.split()
            out[cells[0]] = {k: float(c) for k, c in zip(header[1:], cells[1:]) if c != "-"}
        return out

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        j = out_dir / f"{stem}.json"
        t = out_dir / f"{stem}.txt"
        j.write_text(self.to_json())
        t.write_text(self.to_table())
        return j, t
