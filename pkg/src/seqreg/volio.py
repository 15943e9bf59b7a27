"""File I/O: MetaImage volumes, score tables, configs and deformations.

All writers go through a write-to-temporary-then-rename step, so a failed
write never leaves a partial file behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .transform import Deformation, DisplacementGrid, RigidParams
from .volume import BinaryMask, Geometry, VectorField3D, Volume3D

ELEMENT_TYPES = {"MET_UCHAR": np.dtype("<u1"), "MET_FLOAT": np.dtype("<f4"),
                 "MET_DOUBLE": np.dtype("<f8")}
REQUIRED_VARIANTS = ("original", "rigid", "deformable")
SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Malformed input file; ``key`` names the offending header key or column."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        super().__init__(message)
        self.key = key
        self.line = line


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    # sorted keys + repr floats: identical objects give identical bytes
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(obj, path) -> None:
    atomic_write_text(path, dumps_json(obj))


# --------------------------------------------------------------------------
# MetaImage

def _fmt(values) -> str:
    # repr is the shortest string that parses back to the same double
    return " ".join(repr(float(v)) for v in values)


def _volume_element_type(data: np.ndarray) -> str:
    # float32 unless that would lose bits; keeps every round-trip exact
    return "MET_FLOAT" if np.array_equal(data.astype(np.float32).astype(np.float64), data) \
        else "MET_DOUBLE"


def write_metaimage(obj, path, element_type: str | None = None) -> None:
    """Write a Volume3D, BinaryMask or VectorField3D as a single-file ``.mha``.

    Masks are MET_UCHAR, displacement fields MET_DOUBLE, volumes MET_FLOAT
    when the voxels are exactly representable in float32 and MET_DOUBLE
    otherwise.  ``element_type`` overrides the choice.
    """
    if isinstance(obj, BinaryMask):
        data, channels, default = obj.data.astype(np.uint8), 1, "MET_UCHAR"
    elif isinstance(obj, VectorField3D):
        data, channels, default = obj.data, 3, "MET_DOUBLE"
    elif isinstance(obj, Volume3D):
        data, channels, default = obj.data, 1, _volume_element_type(obj.data)
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as MetaImage")
    etype = element_type or default
    if etype not in ELEMENT_TYPES:
        raise FormatError(f"unknown ElementType {etype}", "ElementType")
    g = obj.geometry
    # x fastest, channels interleaved innermost
    if channels == 1:
        flat = data.transpose(2, 1, 0).ravel()
    else:
        flat = data.transpose(2, 1, 0, 3).ravel()
    payload = np.ascontiguousarray(flat, dtype=ELEMENT_TYPES[etype]).tobytes()
    header = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        # one axis direction vector after another (column-major direction matrix)
        f"TransformMatrix = {_fmt(np.asarray(g.matrix).T.ravel())}",
        f"Offset = {_fmt(g.origin)}",
        f"ElementSpacing = {_fmt(g.spacing)}",
        f"DimSize = {' '.join(str(n) for n in g.dims)}",
        f"ElementNumberOfChannels = {channels}",
        f"ElementType = {etype}",
        "ElementDataFile = LOCAL",
    ]
    atomic_write_bytes(path, ("\n".join(header) + "\n").encode("ascii") + payload)


def _parse_header(raw: bytes):
    fields: dict[str, str] = {}
    pos = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError("header ended without ElementDataFile", "ElementDataFile")
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"malformed header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
        if key == "ElementDataFile":
            return fields, pos


def _numbers(fields, key, count, cast=float, default=None):
    if key not in fields:
        if default is not None:
            return default
        raise FormatError(f"missing header key {key}", key)
    try:
        vals = tuple(cast(v) for v in fields[key].split())
    except ValueError:
        raise FormatError(f"bad value for {key}: {fields[key]!r}", key) from None
    if len(vals) != count:
        raise FormatError(f"{key} needs {count} values, got {len(vals)}", key)
    return vals


def read_metaimage(path, kind: str | None = None):
    """Read a MetaImage file (``.mha`` or ``.mhd`` + raw payload).

    Returns a VectorField3D for 3-channel data, a BinaryMask for MET_UCHAR
    data with values in {0, 1} (or when ``kind="mask"``), else a Volume3D.
    ``kind`` in {"volume", "mask", "field"} forces the result type.
    """
    path = Path(path)
    raw = path.read_bytes()
    fields, offset = _parse_header(raw)
    if fields.get("ObjectType", "Image") != "Image":
        raise FormatError(f"unsupported ObjectType {fields['ObjectType']}", "ObjectType")
    if _numbers(fields, "NDims", 1, int)[0] != 3:
        raise FormatError(f"NDims must be 3, got {fields['NDims']}", "NDims")
    if fields.get("CompressedData", "False").lower() == "true":
        raise FormatError("compressed payloads are not supported", "CompressedData")
    if fields.get("BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", "False")).lower() == "true":
        raise FormatError("big-endian payloads are not supported", "BinaryDataByteOrderMSB")
    dims = _numbers(fields, "DimSize", 3, int)
    spacing = _numbers(fields, "ElementSpacing", 3, default=(1.0, 1.0, 1.0))
    origin = _numbers(fields, "Offset", 3, default=_numbers(fields, "Position", 3,
                                                           default=(0.0, 0.0, 0.0)))
    cols = _numbers(fields, "TransformMatrix", 9,
                    default=(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0))
    direction = tuple(np.array(cols, dtype=float).reshape(3, 3).T.ravel())
    channels = _numbers(fields, "ElementNumberOfChannels", 1, int, default=(1,))[0]
    if channels not in (1, 3):
        raise FormatError(f"ElementNumberOfChannels must be 1 or 3, got {channels}",
                          "ElementNumberOfChannels")
    etype = fields.get("ElementType")
    if etype not in ELEMENT_TYPES:
        raise FormatError(f"unknown ElementType {etype}", "ElementType")
    datafile = fields["ElementDataFile"]
    if datafile == "LOCAL":
        payload = raw[offset:]
    else:
        payload = (path.parent / datafile).read_bytes()
    dtype = ELEMENT_TYPES[etype]
    expected = int(np.prod(dims)) * channels
    if len(payload) != expected * dtype.itemsize:
        raise FormatError(f"size mismatch: DimSize {' '.join(map(str, dims))} x {channels} "
                          f"channel(s) needs {expected} elements, payload holds "
                          f"{len(payload) / dtype.itemsize:g}", "DimSize")
    try:
        geom = Geometry(dims, spacing, origin, direction)
    except ValueError as e:
        raise FormatError(str(e), "TransformMatrix" if "direction" in str(e) else "DimSize") from None
    flat = np.frombuffer(payload, dtype=dtype)
    if channels == 3:
        if kind not in (None, "field"):
            raise FormatError(f"3-channel file cannot load as {kind}", "ElementNumberOfChannels")
        data = flat.reshape(dims[2], dims[1], dims[0], 3).transpose(2, 1, 0, 3)
        return VectorField3D(geom, data.astype(np.float64))
    data = flat.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    if kind == "field":
        raise FormatError("1-channel file cannot load as a field", "ElementNumberOfChannels")
    is_binary = etype == "MET_UCHAR" and bool(np.all(data <= 1))
    if kind == "mask" or (kind is None and is_binary):
        if not np.all((data == 0) | (data == 1)):
            raise FormatError("mask values must be 0 or 1", "ElementType")
        return BinaryMask(geom, data.astype(bool))
    return Volume3D(geom, data.astype(np.float64))


# --------------------------------------------------------------------------
# score tables

@dataclass(frozen=True)
class ScoreTable:
    case_ids: tuple[str, ...]
    labels: np.ndarray  # int, 0/1
    scores: dict  # variant -> float array aligned with case_ids

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if len(set(self.case_ids)) != len(self.case_ids):
            seen = set()
            dup = next(c for c in self.case_ids if c in seen or seen.add(c))
            raise ValueError(f"duplicate case_id {dup!r}")
        if labels.shape != (len(self.case_ids),) or not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0/1, one per case")
        scores = {}
        for name, s in self.scores.items():
            s = np.asarray(s, dtype=float)
            if s.shape != labels.shape:
                raise ValueError(f"variant {name!r} needs one score per case")
            scores[name] = s
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "scores", scores)

    @property
    def variants(self) -> tuple[str, ...]:
        return tuple(self.scores)

    def __len__(self):
        return len(self.case_ids)


def read_scores_csv(path) -> ScoreTable:
    """Parse ``case_id,label,score_original,score_rigid,score_deformable[,score_*]``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError("empty scores file", line=1) from None
        for col in ("case_id", "label") + tuple(f"score_{v}" for v in REQUIRED_VARIANTS):
            if col not in header:
                raise FormatError(f"line 1: missing column {col}", col, 1)
        score_cols = [(i, h[len("score_"):]) for i, h in enumerate(header) if h.startswith("score_")]
        i_id, i_label = header.index("case_id"), header.index("label")
        ids, labels = [], []
        scores = {v: [] for _, v in score_cols}
        seen = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}",
                                  line=lineno)
            cid = row[i_id].strip()
            if cid in seen:
                raise FormatError(f"line {lineno}: duplicate case_id {cid!r} "
                                  f"(first on line {seen[cid]})", "case_id", lineno)
            seen[cid] = lineno
            if row[i_label].strip() not in ("0", "1"):
                raise FormatError(f"line {lineno}: label must be 0 or 1, got {row[i_label]!r}",
                                  "label", lineno)
            ids.append(cid)
            labels.append(int(row[i_label]))
            for i, v in score_cols:
                try:
                    s = float(row[i])
                except ValueError:
                    raise FormatError(f"line {lineno}: score_{v} is not a number: {row[i]!r}",
                                      f"score_{v}", lineno) from None
                if not 0.0 <= s <= 1.0:
                    raise FormatError(f"line {lineno}: score_{v}={s!r} outside [0, 1]",
                                      f"score_{v}", lineno)
                scores[v].append(s)
    return ScoreTable(tuple(ids), np.array(labels, dtype=int), scores)


def write_scores_csv(table: ScoreTable, path) -> None:
    ordered = list(REQUIRED_VARIANTS) + [v for v in table.variants if v not in REQUIRED_VARIANTS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case_id", "label"] + [f"score_{v}" for v in ordered])
    for k, cid in enumerate(table.case_ids):
        w.writerow([cid, int(table.labels[k])] + [format(table.scores[v][k], ".17g") for v in ordered])
    atomic_write_text(path, buf.getvalue())


# --------------------------------------------------------------------------
# configs and deformations

def write_config(cfg, path, seed: int = 0) -> None:
    write_json({"schema_version": SCHEMA_VERSION, "seed": int(seed), "registration": cfg.to_dict()},
               path)


def read_config(path):
    """Return ``(RegistrationConfig, seed)``; range errors surface as FormatError."""
    from .pipeline import RegistrationConfig

    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at line {e.lineno}", line=e.lineno) from None
    body = d.get("registration", d) if isinstance(d, dict) else None
    if not isinstance(body, dict):
        raise FormatError(f"{path}: expected a JSON object")
    try:
        cfg = RegistrationConfig.from_dict(body)
    except (TypeError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from None
    return cfg, int(d.get("seed", 0))


def write_deformation(d: Deformation, json_path, grid_path=None) -> None:
    """Rigid parameters as JSON; the control grid (if any) as a 3-channel MET_DOUBLE
    ``.mha`` referenced by file name from the JSON."""
    json_path = Path(json_path)
    doc = {"schema_version": SCHEMA_VERSION, "rigid": d.rigid.to_dict(), "grid": None}
    if d.grid is not None:
        grid_path = Path(grid_path) if grid_path is not None else json_path.with_suffix(".grid.mha")
        write_metaimage(VectorField3D(d.grid.grid_geometry, d.grid.control), grid_path)
        doc["grid"] = os.path.relpath(grid_path, json_path.parent)
    write_json(doc, json_path)


def read_deformation(json_path) -> Deformation:
    json_path = Path(json_path)
    d = json.loads(json_path.read_text())
    try:
        rigid = RigidParams.from_dict(d["rigid"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{json_path}: bad rigid block ({e})", "rigid") from None
    grid = None
    if d.get("grid"):
        f = read_metaimage(json_path.parent / d["grid"], kind="field")
        grid = DisplacementGrid(f.geometry, f.data)
    return Deformation(rigid, grid)
