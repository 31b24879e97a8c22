"""File formats: raw float32 volumes with JSON sidecars, bvals/bvecs, peaks and CSV."""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .scheme import B0_THRESHOLD, HCP_TAU, AcquisitionScheme

DTYPE = "<f4"
UNIT_NORM_TOL = 1e-3


@dataclass(eq=False)
class VolumeContainer:
    """4-D volume ``(nx, ny, nz, n_samples)`` stored as little-endian float32.

    On disk ``<name>.f32`` holds the C-ordered samples (sample axis fastest)
    and ``<name>.json`` the metadata.
    """

    data: np.ndarray
    units: str = "normalized"
    provenance: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4:
            raise InvalidArgumentError(f"volume must be 4-D (nx, ny, nz, n), got shape {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=DTYPE)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    @classmethod
    def from_voxels(cls, voxels, **kwargs):
        """Wrap an ``(n_voxels, n_samples)`` array as an ``(n, 1, 1, n_samples)`` volume."""
        voxels = np.asarray(voxels)
        if voxels.ndim == 1:
            voxels = voxels[:, None]
        return cls(voxels[:, None, None, :], **kwargs)

    def voxels(self):
        """Flattened ``(nx * ny * nz, n_samples)`` view."""
        return self.data.reshape(-1, self.data.shape[-1])

    def sidecar(self):
        return {"dims": list(self.dims), "dtype": "float32", "byteorder": "little",
                "order": "C", "units": self.units, "provenance": self.provenance,
                **({"extra": self.extra} if self.extra else {})}

    def write(self, path):
        """Write ``<path>.f32`` and ``<path>.json``; returns the two paths."""
        raw, meta = volume_paths(path)
        raw.parent.mkdir(parents=True, exist_ok=True)
        raw.write_bytes(self.data.tobytes(order="C"))
        meta.write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")
        return raw, meta

    @classmethod
    def read(cls, path):
        raw, meta = volume_paths(path)
        try:
            info = json.loads(meta.read_text())
        except OSError as exc:
            raise ParseError(f"cannot read sidecar: {exc.strerror}", meta) from exc
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, meta, exc.lineno, exc.colno) from exc
        dims = info.get("dims")
        if (not isinstance(dims, list) or len(dims) != 4
                or not all(isinstance(d, int) and d > 0 for d in dims)):
            raise ParseError(f"'dims' must be four positive integers, got {dims!r}", meta)
        if info.get("dtype", "float32") != "float32" or info.get("byteorder", "little") != "little":
            raise ParseError("only little-endian float32 volumes are supported", meta)
        try:
            buf = raw.read_bytes()
        except OSError as exc:
            raise ParseError(f"cannot read volume: {exc.strerror}", raw) from exc
        expected = int(np.prod(dims)) * 4
        if len(buf) != expected:
            raise ParseError(f"expected {expected} bytes for dims {dims}, found {len(buf)}", raw)
        data = np.frombuffer(buf, dtype=DTYPE).reshape(dims).copy()
        return cls(data, info.get("units", ""), info.get("provenance", ""), info.get("extra", {}))


def volume_paths(path):
    """``(<stem>.f32, <stem>.json)`` for a path with or without either suffix."""
    p = Path(path)
    if p.suffix in (".f32", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".f32"), p.with_name(p.name + ".json")


def _read_rows(path):
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read file: {exc}", path) from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        vals = []
        for col, tok in enumerate(line.split(), start=1):
            try:
                v = float(tok)
            except ValueError:
                raise ParseError(f"not a number: {tok!r}", path, lineno, col) from None
            if not np.isfinite(v):
                raise ParseError(f"non-finite value {tok!r}", path, lineno, col)
            vals.append(v)
        rows.append((lineno, vals))
    return rows


def read_bvals(path):
    rows = _read_rows(path)
    if len(rows) != 1:
        raise ParseError(f"expected one line of b-values, found {len(rows)}", path)
    lineno, vals = rows[0]
    for col, v in enumerate(vals, start=1):
        if v < 0:
            raise ParseError(f"negative b-value {v}", path, lineno, col)
    return np.array(vals)


def read_bvecs(path):
    rows = _read_rows(path)
    if len(rows) != 3:
        raise ParseError(f"expected three lines (x, y, z), found {len(rows)}", path)
    lengths = {len(v) for _, v in rows}
    if len(lengths) != 1:
        short = min(rows, key=lambda r: len(r[1]))
        raise ParseError(f"bvecs lines have unequal column counts {sorted(lengths)}",
                         path, short[0], len(short[1]) + 1)
    return np.array([v for _, v in rows]).T


def load_scheme(bvals_path, bvecs_path, tau=HCP_TAU):
    """Read a bvals/bvecs pair into an :class:`AcquisitionScheme`.

    Gradients with ``b >= 50`` must have unit norm within 1e-3.
    """
    bvals = read_bvals(bvals_path)
    bvecs = read_bvecs(bvecs_path)
    if bvecs.shape[0] != bvals.size:
        raise ParseError(f"{bvals.size} b-values but {bvecs.shape[0]} gradient columns",
                         bvecs_path, 1, min(bvals.size, bvecs.shape[0]) + 1)
    norms = np.linalg.norm(bvecs, axis=1)
    bad = (bvals >= B0_THRESHOLD) & (np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.any():
        col = int(np.argmax(bad))
        raise ParseError(f"gradient norm {norms[col]:.6g} is not 1 at b={bvals[col]:g}",
                         bvecs_path, 1, col + 1)
    try:
        return AcquisitionScheme.from_bvals_bvecs(bvals, bvecs, tau)
    except InvalidArgumentError as exc:
        raise ParseError(str(exc), bvals_path) from exc


def write_scheme(scheme, bvals_path, bvecs_path, fmt="%.10g"):
    """Write ``bvals`` (one line) and ``bvecs`` (three lines)."""
    Path(bvals_path).write_text(" ".join(fmt % b for b in scheme.bvals) + "\n")
    lines = [" ".join(fmt % v for v in row) for row in scheme.directions.T]
    Path(bvecs_path).write_text("\n".join(lines) + "\n")


def write_peaks(path, peak_sets, fmt="%.8f"):
    """Peaks as text: a ``# voxel <i>`` header, then ``x y z amplitude`` lines."""
    with open(path, "w") as fh:
        for i, peaks in enumerate(peak_sets):
            fh.write(f"# voxel {i}\n")
            for d, a in zip(peaks.directions, peaks.amplitudes):
                fh.write(" ".join(fmt % v for v in (*d, a)) + "\n")


def read_peaks(path):
    """Inverse of :func:`write_peaks`; returns ``[(directions, amplitudes), ...]``."""
    out = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read peaks: {exc.strerror}", path) from exc
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            out.append([])
            continue
        if not out:
            raise ParseError("peak line before the first voxel header", path, lineno, 1)
        toks = s.split()
        if len(toks) != 4:
            raise ParseError(f"expected 4 values, found {len(toks)}", path, lineno, 1)
        try:
            out[-1].append([float(t) for t in toks])
        except ValueError:
            raise ParseError("not a number", path, lineno, 1) from None
    return [(np.array(v).reshape(-1, 4)[:, :3], np.array(v).reshape(-1, 4)[:, 3]) for v in out]


def write_csv(path, rows, columns):
    """Write dict rows with a fixed column order; floats use ``repr`` for exactness."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v
