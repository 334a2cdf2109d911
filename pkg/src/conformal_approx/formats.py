"""Plain-text artifact formats: GRID samples, key-value files.

GRID files start with ``GRID d n1 [n2 [n3]] h x0 [y0 [z0]]``; the samples follow
in row-major order, one row of the last axis per line. The binary variant keeps
the same header line and stores a little-endian float64 block after it.
Lines beginning with ``#`` before the header are comments.
"""
from pathlib import Path

import numpy as np

from .errors import FormatError


def _fmt(x):
    return repr(float(x))


def write_grid(path, values, h, origin, binary=False, comments=()):
    values = np.asarray(values, dtype=np.float64)
    d = values.ndim
    if d not in (1, 2, 3):
        raise FormatError(f"grid must have 1-3 axes, got {d}")
    origin = np.asarray(origin, dtype=np.float64).reshape(-1)
    header = "GRID {} {} {} {}\n".format(
        d, " ".join(str(n) for n in values.shape), _fmt(h), " ".join(_fmt(o) for o in origin))
    pre = "".join(f"# {c}\n" for c in comments)
    with open(path, "wb") as fh:
        fh.write(pre.encode("utf-8"))
        fh.write(header.encode("utf-8"))
        if binary:
            fh.write(values.astype("<f8").tobytes(order="C"))
        else:
            rows = values.reshape(-1, values.shape[-1])
            for row in rows:
                fh.write((" ".join(_fmt(v) for v in row) + "\n").encode("utf-8"))


def read_grid(path):
    """Return (values, h, origin, comments); detects the binary variant."""
    raw = Path(path).read_bytes()
    comments = []
    pos = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: missing GRID header")
        line = raw[pos:end].decode("utf-8", errors="strict").strip()
        pos = end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
            continue
        if not line:
            continue
        break
    tok = line.split()
    if not tok or tok[0] != "GRID":
        raise FormatError(f"{path}: expected GRID header, got {line!r}")
    try:
        d = int(tok[1])
        shape = tuple(int(t) for t in tok[2:2 + d])
        h = float(tok[2 + d])
        origin = np.array([float(t) for t in tok[3 + d:]], dtype=np.float64)
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed GRID header {line!r}") from exc
    if len(shape) != d or origin.size != d or h <= 0:
        raise FormatError(f"{path}: malformed GRID header {line!r}")
    n = int(np.prod(shape))
    body = raw[pos:]
    values = None
    try:
        text = body.decode("utf-8")
        values = np.array(text.split(), dtype=np.float64)
        if values.size != n:
            values = None
    except (UnicodeDecodeError, ValueError):
        values = None
    if values is None:
        if len(body) != 8 * n:
            raise FormatError(f"{path}: expected {n} samples")
        values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return values.reshape(shape), h, origin, comments


def parse_kv(text, source="<config>"):
    """Parse ``key = value`` lines; returns {key: (value, lineno)}."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise FormatError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{lineno}: empty key")
        if key in out:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def format_kv(items):
    return "".join(f"{k} = {v}\n" for k, v in items)
