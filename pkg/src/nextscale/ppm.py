"""Binary PPM (P6, 8-bit) image files.

Images travel through the pipeline as float RGB in [0, 1]; quantization to
bytes happens only here, as round(clip(v) * 255).  The reader inverts the
byte scaling, so re-encoding a file this writer produced is byte-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

_MAXVAL = 255


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError("PPM needs an (H, W, 3) image")
    h, w = img.shape[:2]
    payload = np.rint(np.clip(img, 0.0, 1.0) * _MAXVAL).astype(np.uint8)
    return f"P6\n{w} {h}\n{_MAXVAL}\n".encode("ascii") + payload.tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_ppm(image))


def _read_header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # whitespace and '#' comments may separate header fields
    while pos < len(buf):
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ContractError("truncated PPM header")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    magic, pos = _read_header_token(buf, 0)
    if magic != b"P6":
        raise ContractError("not a binary PPM (P6) file")
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(buf, pos)
        if not tok.isdigit():
            raise ContractError("malformed PPM header field")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != _MAXVAL:
        raise ContractError(f"unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    payload = buf[pos : pos + need]
    if len(payload) != need:
        raise ContractError("truncated PPM payload")
    raster = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return raster.astype(np.float64) / _MAXVAL


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_ppm(f.read())
