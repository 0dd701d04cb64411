"""Stream files, manifests, metrics traces and checkpoints.

Feature files are CSV (``u`` reals then an optional integer label per
row) or a packed little-endian binary::

    b"ACDCPK01"  uint32 u  uint32 has_label  uint64 n
    n records of  u x float64  [int32 label, -1 when missing]

Checkpoints are ``b"ACDCCKPT"`` + uint16 version followed by an ``.npz``
payload whose ``meta`` entry is UTF-8 JSON.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from .evolving import InputMoments, SpcStats
from .net import MODULES, PARAM_KEYS, AblationFlags, AcdcModel, Hyper
from .stream import Domain, MetricsTrace, RunState, Sample, ThroughputState, WindowMetrics
from .tensor import MomentumState

PACK_MAGIC = b"ACDCPK01"
_PACK_HEADER = struct.Struct("<8sIIQ")
CKPT_MAGIC = b"ACDCCKPT"
CKPT_VERSION = 1
METRICS_BANNER = "# acdc metrics v1"
TIMINGS_BANNER = "# acdc timings v1"
FORMATS = ("csv", "packed")

# wall time lives in the timings file so metrics stay byte-reproducible
METRICS_COLUMNS = [c for c in WindowMetrics.columns() if c != "wall_ms"]


class DataFormatError(ValueError):
    """A stream, manifest, metrics or checkpoint file is malformed."""


@dataclass
class DatasetManifest:
    name: str
    u: int
    m: int
    role: str
    path: str
    format: str = "csv"
    labeled: bool = True
    n: int = 0
    held_out_labels: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise DataFormatError(f"manifest role must be source or target, got {self.role!r}")
        if self.format not in FORMATS:
            raise DataFormatError(f"unknown stream format {self.format!r}")
        if self.role == "source" and not self.labeled:
            raise DataFormatError("a source stream must carry labels")
        if self.role == "target" and self.labeled:
            self.held_out_labels = True

    @property
    def domain(self) -> Domain:
        return Domain(self.role)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: cannot read manifest: {exc}") from exc
        man = cls(**data)
        # data paths are relative to the manifest
        if not os.path.isabs(man.path):
            man.path = str(path.parent / man.path)
        return man


def _check_label(label: Optional[int], m: int, where: str) -> None:
    if label is not None and not 0 <= label < m:
        raise DataFormatError(f"{where}: label {label} outside [0, {m})")


def _csv_samples(man: DatasetManifest) -> Iterator[Sample]:
    width = man.u + (1 if man.labeled else 0)
    with open(man.path, newline="") as fh:
        idx = 0
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            where = f"{man.path}:{lineno}"
            if len(row) != width:
                raise DataFormatError(f"{where}: expected {width} fields, got {len(row)}")
            try:
                x = np.array([float(v) for v in row[:man.u]])
                label = int(row[man.u]) if man.labeled else None
            except ValueError as exc:
                raise DataFormatError(f"{where}: {exc}") from None
            _check_label(label, man.m, where)
            yield Sample(x, label, man.domain, idx)
            idx += 1
    if idx != man.n:
        raise DataFormatError(f"{man.path}: manifest declares {man.n} samples, file has {idx}")


def _packed_samples(man: DatasetManifest) -> Iterator[Sample]:
    with open(man.path, "rb") as fh:
        head = fh.read(_PACK_HEADER.size)
        if len(head) != _PACK_HEADER.size:
            raise DataFormatError(f"{man.path}: truncated header")
        magic, u, has_label, n = _PACK_HEADER.unpack(head)
        if magic != PACK_MAGIC:
            raise DataFormatError(f"{man.path}: not a packed stream file")
        if u != man.u:
            raise DataFormatError(f"{man.path}: file has u={u}, manifest says {man.u}")
        if n != man.n:
            raise DataFormatError(f"{man.path}: manifest declares {man.n} samples, file has {n}")
        rec = np.dtype([("x", "<f8", (u,))] + ([("y", "<i4")] if has_label else []))
        for i in range(n):
            buf = fh.read(rec.itemsize)
            if len(buf) != rec.itemsize:
                raise DataFormatError(f"{man.path}: record {i} truncated")
            r = np.frombuffer(buf, dtype=rec)[0]
            label = int(r["y"]) if has_label else None
            if label == -1:
                label = None
            if label is None and man.role == "source":
                raise DataFormatError(f"{man.path}: record {i}: source sample without label")
            _check_label(label, man.m, f"{man.path}: record {i}")
            yield Sample(np.array(r["x"], dtype=np.float64), label, man.domain, i)


def load_stream(man: DatasetManifest) -> Iterator[Sample]:
    """Single-pass iterator over a stream file, in file order."""
    if not Path(man.path).is_file():
        raise DataFormatError(f"{man.path}: no such stream file")
    if man.format == "csv":
        return _csv_samples(man)
    return _packed_samples(man)


def write_stream(path, X: np.ndarray, y=None, fmt: str = "csv") -> None:
    """Write features (and labels) so that reading them back is exact."""
    X = np.asarray(X, dtype=np.float64)
    if y is not None and len(y) != len(X):
        raise ValueError("features and labels differ in length")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for i, x in enumerate(X):
                row = [repr(float(v)) for v in x]
                if y is not None:
                    row.append(str(int(y[i])))
                w.writerow(row)
    elif fmt == "packed":
        has_label = y is not None
        rec = np.dtype([("x", "<f8", (X.shape[1],))] + ([("y", "<i4")] if has_label else []))
        arr = np.zeros(len(X), dtype=rec)
        arr["x"] = X
        if has_label:
            arr["y"] = np.asarray(y, dtype=np.int64)
        with open(path, "wb") as fh:
            fh.write(_PACK_HEADER.pack(PACK_MAGIC, X.shape[1], int(has_label), len(X)))
            fh.write(arr.tobytes())
    else:
        raise ValueError(f"unknown stream format {fmt!r}")


# --------------------------------------------------------------------------
# metrics


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(trace: MetricsTrace, path, timings_path=None) -> None:
    """Metrics CSV (versioned banner, fixed header) and, optionally, the
    wall-clock times per window in a second file."""
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_BANNER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in trace.rows:
            w.writerow([_fmt(getattr(r, c)) for c in METRICS_COLUMNS])
    if timings_path is not None:
        with open(timings_path, "w", newline="") as fh:
            fh.write(TIMINGS_BANNER + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["window", "wall_ms"])
            for r in trace.rows:
                w.writerow([r.window, repr(r.wall_ms)])


def read_metrics(path) -> MetricsTrace:
    with open(path, newline="") as fh:
        banner = fh.readline().rstrip("\n")
        if banner != METRICS_BANNER:
            raise DataFormatError(f"{path}: unsupported metrics banner {banner!r}")
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_COLUMNS:
            raise DataFormatError(f"{path}: unexpected metrics header")
        types = {f: WindowMetrics.__dataclass_fields__[f].type for f in METRICS_COLUMNS}
        trace = MetricsTrace()
        for lineno, row in enumerate(reader, start=3):
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields")
            vals = {}
            for name, raw in zip(header, row):
                t = types[name]
                vals[name] = int(raw) if t == "int" else float(raw) if t == "float" else raw
            trace.append(WindowMetrics(wall_ms=math.nan, **vals))
    return trace


# --------------------------------------------------------------------------
# checkpoints


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def write_checkpoint(path, model: AcdcModel, run_state: Optional[RunState] = None,
                     extra: Optional[dict] = None) -> None:
    """Persist the model (parameters, momentum, moments, SPC statistics,
    RNG) and, optionally, the run state needed to resume a stream."""
    arrays = {}
    for k in PARAM_KEYS:
        arrays[f"p.{k}"] = model.params[k]
        arrays[f"v.{k}"] = model.momentum.velocity[k]
    for mod, mom in model.moments.items():
        for name, arr in mom.state().items():
            if name != "count":
                arrays[f"m.{mod}.{name}"] = arr
    meta = {
        "u": model.u, "m": model.m,
        "flags": asdict(model.flags), "hyper": asdict(model.hyper),
        "moment_counts": {mod: mom.count for mod, mom in model.moments.items()},
        "spc": {mod: s.state() for mod, s in model.spc.items()},
        "rng": _rng_state(model.rng),
        "run": None if run_state is None else {
            "throughput": asdict(run_state.throughput),
            "rng": _rng_state(run_state.rng),
            "window": run_state.window,
            "correct_t": run_state.correct_t,
            "scored_t": run_state.scored_t,
        },
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path) -> Tuple[AcdcModel, Optional[RunState], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    head = len(CKPT_MAGIC) + 2
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<H", raw[len(CKPT_MAGIC):head])
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: checkpoint version {version} not supported")
    with np.load(io.BytesIO(raw[head:]), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())

    params = {k: arrays[f"p.{k}"].copy() for k in PARAM_KEYS}
    momentum = MomentumState(params)
    momentum.velocity = {k: arrays[f"v.{k}"].copy() for k in PARAM_KEYS}
    moments = {}
    for mod in MODULES:
        moments[mod] = InputMoments.from_state({
            "count": meta["moment_counts"][mod],
            "mean": arrays[f"m.{mod}.mean"],
            "m2": arrays[f"m.{mod}.m2"],
            "sq_mean": arrays[f"m.{mod}.sq_mean"],
        })
    model = AcdcModel(
        u=meta["u"], m=meta["m"], params=params, momentum=momentum,
        flags=AblationFlags(**meta["flags"]), hyper=Hyper(**meta["hyper"]),
        moments=moments,
        spc={mod: SpcStats.from_state(meta["spc"][mod]) for mod in MODULES},
        rng=_rng_from(meta["rng"]),
    )
    model.check_shapes()

    run_state = None
    if meta["run"] is not None:
        r = meta["run"]
        run_state = RunState(throughput=ThroughputState(**r["throughput"]),
                             rng=_rng_from(r["rng"]), window=r["window"],
                             correct_t=r["correct_t"], scored_t=r["scored_t"])
    return model, run_state, meta["extra"]
