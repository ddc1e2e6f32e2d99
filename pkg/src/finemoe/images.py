"""Image container, binary PPM (P6) I/O, and bilinear resizing.

No external image library: the corpus generator draws synthetic shapes
directly into float arrays and everything on disk is plain P6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ImageInput:
    """Float RGB image, values in [0, 1], shape [height, width, 3]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected [H, W, 3] pixels, got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def write_ppm(path, img: ImageInput) -> None:
    data = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> ImageInput:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")

    # Header: magic, width, height, maxval — whitespace separated, with
    # '#' comments running to end of line.
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(blob[start:pos])
    pos += 1                                  # single whitespace after maxval
    width, height, maxval = (int(f) for f in fields)
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"{path}: unsupported PPM maxval {maxval}")
    n = width * height * 3
    raw = blob[pos:pos + n]
    if len(raw) != n:
        raise ValueError(f"{path}: expected {n} pixel bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / maxval
    return ImageInput(pixels.reshape(height, width, 3))


def resize_bilinear(img: ImageInput, new_h: int, new_w: int) -> ImageInput:
    """Bilinear resample using pixel-center alignment with edge clamping."""
    if new_h < 1 or new_w < 1:
        raise ValueError("target size must be at least 1x1")
    h, w = img.height, img.width
    if (new_h, new_w) == (h, w):
        return ImageInput(img.pixels.copy())

    def axis_coords(n_src, n_dst):
        src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        lo = np.clip(np.floor(src).astype(np.int64), 0, n_src - 1)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = np.clip(src - lo, 0.0, 1.0)
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, new_h)
    x0, x1, fx = axis_coords(w, new_w)
    p = img.pixels
    top = p[y0][:, x0] * (1 - fx)[None, :, None] + p[y0][:, x1] * fx[None, :, None]
    bot = p[y1][:, x0] * (1 - fx)[None, :, None] + p[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return ImageInput(np.clip(out, 0.0, 1.0))


# -- synthetic drawing helpers (toy corpus) --------------------------------

def blank_image(height: int, width: int, color=(1.0, 1.0, 1.0)) -> ImageInput:
    pixels = np.empty((height, width, 3))
    pixels[:] = np.asarray(color, dtype=np.float64)
    return ImageInput(pixels)


def draw_rectangle(img: ImageInput, y0: int, x0: int, y1: int, x1: int,
                   color) -> None:
    img.pixels[max(y0, 0):y1, max(x0, 0):x1] = np.asarray(color)


def draw_disk(img: ImageInput, cy: float, cx: float, radius: float,
              color) -> None:
    yy, xx = np.mgrid[0:img.height, 0:img.width]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    img.pixels[mask] = np.asarray(color)
