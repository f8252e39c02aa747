"""File formats: binary PGM rasters, contour text files and TSV tables.

* PGM (``P5``): 8-bit when maxval < 256, otherwise 16-bit big-endian.
  Masks are 8-bit with values restricted to {0, 255}.
* Contours: one ``x,y`` pair per line, polygon implicitly closed.
* Tables (reports, logs, manifests): tab-separated, fixed header row.
  Floats are written with ``repr`` so they parse back bit-exactly.
"""

import csv
import math
import re
from pathlib import Path

import numpy as np

from .errors import FormatError

_WS = b" \t\n\r\x0b\x0c"


def write_pgm(path, array, maxval=None):
    a = np.asarray(array)
    if a.ndim != 2:
        raise FormatError(f"{path}: PGM needs a 2-D array, got shape {a.shape}")
    if maxval is None:
        maxval = 255 if a.dtype == np.uint8 else 65535
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: maxval {maxval} outside 1..65535")
    if a.size and (a.min() < 0 or a.max() > maxval):
        raise FormatError(f"{path}: sample values outside 0..{maxval}")
    dtype = ">u1" if maxval < 256 else ">u2"
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(a.astype(dtype).tobytes())


def read_pgm(path):
    """Return (uint8 or uint16 array, maxval)."""
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos] in _WS:
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in _WS and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte {pos}")
        tokens.append((data[start:pos], start))
    magic, _ = tokens[0]
    if magic != b"P5":
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected b'P5'")
    try:
        width, height, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        bad = next(off for t, off in tokens[1:] if not t.isdigit())
        raise FormatError(f"{path}: non-numeric header field at byte {bad}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid header {width}x{height} maxval {maxval}")
    if pos >= len(data) or data[pos] not in _WS:
        raise FormatError(f"{path}: missing whitespace after header at byte {pos}")
    pos += 1
    itemsize = 1 if maxval < 256 else 2
    need = width * height * itemsize
    body = data[pos:]
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} data bytes at offset {pos}, found {len(body)}")
    arr = np.frombuffer(body, dtype=">u1" if itemsize == 1 else ">u2").reshape(height, width)
    arr = arr.astype(np.uint8 if itemsize == 1 else np.uint16)
    if arr.max(initial=0) > maxval:
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    return arr, maxval


def write_mask(path, mask):
    m = np.asarray(mask)
    if not np.isin(m, (0, 255)).all():
        raise FormatError(f"{path}: mask values must be 0 or 255")
    write_pgm(path, m.astype(np.uint8), 255)


def read_mask(path):
    arr, maxval = read_pgm(path)
    if maxval != 255:
        raise FormatError(f"{path}: mask maxval must be 255, got {maxval}")
    if not np.isin(arr, (0, 255)).all():
        off = int(np.flatnonzero(~np.isin(arr, (0, 255)))[0])
        raise FormatError(f"{path}: non-binary mask value at sample {off}")
    return arr


def write_image(path, image, bits=16):
    """Store a [0, 1] float image as 8- or 16-bit PGM."""
    maxval = 255 if bits == 8 else 65535
    img = np.asarray(image, dtype=np.float64)
    if img.size and (img.min() < 0 or img.max() > 1):
        raise FormatError(f"{path}: image values must lie in [0, 1]")
    q = np.round(img * maxval).astype(np.uint8 if bits == 8 else np.uint16)
    write_pgm(path, q, maxval)


def read_image(path):
    arr, maxval = read_pgm(path)
    return arr.astype(np.float64) / maxval


# --------------------------------------------------------------------------
# contours

def write_contour(path, points):
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        for x, y in pts.tolist():
            fh.write(f"{x!r},{y!r}\n")


def read_contour(path):
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'x,y', got {line!r}")
            try:
                x, y = float(parts[0]), float(parts[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise FormatError(f"{path}:{lineno}: non-finite coordinate")
            pts.append((x, y))
    if len(pts) < 3:
        raise FormatError(f"{path}: contour needs at least 3 points, found {len(pts)}")
    return np.array(pts)


_EXPERT_RE = re.compile(r"^(?P<base>.+)_expert(?P<k>\d+)$")


def expert_files(directory, basename=None):
    """Group ``<base>_expertN.txt`` files by base name, sorted by N."""
    groups = {}
    for p in sorted(Path(directory).glob("*_expert*.txt")):
        m = _EXPERT_RE.match(p.stem)
        if m and (basename is None or m["base"] == basename):
            groups.setdefault(m["base"], []).append((int(m["k"]), p))
    return {b: [p for _, p in sorted(v)] for b, v in groups.items()}


# --------------------------------------------------------------------------
# tables

def _fmt(v):
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise FormatError(f"{path}: row has {len(row)} fields, header has {len(header)}")
            w.writerow([_fmt(v) for v in row])


def read_table(path, types=None, header=None):
    """Rows as dicts; ``types`` maps column name to a converter."""
    types = types or {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            found = next(reader)
        except StopIteration:
            raise FormatError(f"{path}:1: empty file, expected a header row") from None
        if header is not None and list(found) != list(header):
            raise FormatError(f"{path}:1: header {found} does not match expected {list(header)}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            if len(rec) != len(found):
                raise FormatError(f"{path}:{lineno}: {len(rec)} fields, header has {len(found)}")
            row = {}
            for name, val in zip(found, rec):
                conv = types.get(name, str)
                try:
                    row[name] = conv(val)
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad value {val!r} in column {name!r}") from None
            rows.append(row)
    return rows
