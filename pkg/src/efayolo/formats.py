"""On-disk formats: the EFAW weight checkpoint, binary PPM images, and config text.

Weight file layout (all integers little-endian, no padding)::

    b"EFAW"  u32 version=1  u32 count
    count x { u16 name_len, name (UTF-8), u8 dtype (0=f32, 1=f16), u8 ndim, u32 dims[ndim], payload }
"""
import dataclasses
import io
import struct
from pathlib import Path

import numpy as np

from .detector import ModelConfig
from .errors import ConfigError, FormatError

MAGIC = b"EFAW"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
PRECISIONS = {"fp32": 0, "fp16": 1}


# -- weights ------------------------------------------------------------------


def _tensors_of(obj, buffers=True):
    if hasattr(obj, "state_dict"):
        return obj.state_dict(buffers=buffers)
    return dict(obj)


def serialize_weights(obj, precision="fp32", buffers=True):
    """Encode a model (or a name -> array mapping) as EFAW bytes."""
    if precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}")
    code = PRECISIONS[precision]
    tensors = _tensors_of(obj, buffers)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        # astype rounds to nearest even when narrowing to binary16
        out.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return out.getvalue()


def write_weights(obj, path, precision="fp32", buffers=True):
    data = serialize_weights(obj, precision, buffers)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError("truncated", f"need {n} bytes for {what}, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_weights(data):
    """Decode EFAW bytes into an ordered name -> array dict (arrays keep their stored dtype)."""
    r = _Reader(bytes(data))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError("bad-magic", f"expected {MAGIC!r}, found {magic!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError("bad-version", f"unsupported version {version}", 4)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", f"name length of tensor {i}")
        raw = r.take(name_len, f"name of tensor {i}")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("bad-name", f"tensor {i} name is not valid UTF-8", start + 2) from exc
        if name in tensors:
            raise FormatError("duplicate-name", f"tensor name {name!r} repeated", start)
        dt_pos = r.pos
        code, ndim = r.unpack("<BB", f"dtype/ndim of {name!r}")
        if code not in DTYPES:
            raise FormatError("bad-dtype", f"unknown dtype code {code} for {name!r}", dt_pos)
        dims = r.unpack(f"<{ndim}I", f"dims of {name!r}")
        size = 1
        for d in dims:
            size *= d
        payload = r.take(size * DTYPES[code].itemsize, f"payload of {name!r}")
        try:
            tensors[name] = np.frombuffer(payload, dtype=DTYPES[code]).reshape(dims).copy()
        except ValueError as exc:
            # a zero dim empties the payload, but numpy still rejects absurd shapes
            raise FormatError("bad-dims", f"dims {list(dims)} of {name!r} are not representable", dt_pos + 2) from exc
    if r.pos != len(r.data):
        raise FormatError("trailing-data", f"{len(r.data) - r.pos} unread bytes after {count} tensors", r.pos)
    return tensors


def read_weights(path):
    return parse_weights(Path(path).read_bytes())


def load_weights_into(model, path):
    model.load_state_dict({k: v.astype(np.float32) for k, v in read_weights(path).items()})
    return model


# -- PPM images -----------------------------------------------------------------


def _ppm_tokens(data, count):
    """Yield ``count`` header tokens, skipping whitespace and ``#`` comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last one.
    """
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise FormatError("truncated", "header ended early", pos)
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append((data[start:pos], start))
    return tokens, pos


def parse_ppm(data):
    data = bytes(data)
    if data[:2] != b"P6":
        raise FormatError("bad-magic", f"expected P6, found {data[:2]!r}", 0)
    toks, pos = _ppm_tokens(data[2:], 3)
    vals = []
    for tok, off in toks:
        if not tok.isdigit():
            raise FormatError("bad-header", f"expected an integer, found {tok!r}", off + 2)
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError("bad-maxval", f"only maxval 255 is supported, got {maxval}", toks[2][1] + 2)
    if w < 1 or h < 1:
        raise FormatError("bad-header", f"empty image {w}x{h}", toks[0][1] + 2)
    start = 2 + pos + 1
    need = w * h * 3
    payload = data[start : start + need]
    if len(payload) < need:
        raise FormatError("truncated", f"pixel data has {len(payload)} of {need} bytes", start + len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / 255.0


def load_ppm(path):
    """Read a binary P6 file into an (h, w, 3) float32 raster in [0, 1]."""
    return parse_ppm(Path(path).read_bytes())


def encode_ppm(image):
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_ppm(path, image):
    Path(path).write_bytes(encode_ppm(image))


# -- config text ---------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_DEFAULTS = ModelConfig()


def _parse_value(key, text, line):
    default = getattr(_DEFAULTS, key)
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(t) for t in text.replace("[", "").replace("]", "").split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"malformed value for {key}: {text!r}", line) from None
    raise ConfigError(f"unsupported key type for {key}", line)


def parse_config(text):
    """Parse ``key = value`` lines (``#`` starts a comment) into a ModelConfig."""
    values, seen = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", lineno)
        seen[key] = lineno
        values[key] = _parse_value(key, val, lineno)
    try:
        return ModelConfig(**values)
    except ConfigError as exc:
        # blame the earliest line after which the partial config is already invalid
        partial = {}
        for key in sorted(values, key=seen.get):
            partial[key] = values[key]
            try:
                ModelConfig(**partial)
            except ConfigError:
                raise ConfigError(str(exc), seen[key]) from None
        raise


def print_config(cfg):
    out = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, tuple):
            s = ", ".join(str(x) for x in v)
        else:
            s = repr(v)
        out.append(f"{name} = {s}")
    return "\n".join(out) + "\n"


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
