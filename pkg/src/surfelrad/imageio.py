"""PFM and PNG image files."""
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, image):
    """Write a float image as little-endian PFM (``Pf`` for one channel, ``PF`` for RGB).

    ``image[0]`` is the top row; PFM stores rows bottom to top.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs an HxW or HxWx3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    data = np.ascontiguousarray(img[::-1], dtype="<f4")
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(data.tobytes())


def read_pfm(path):
    """Read a PFM file; returns float64 ``HxW`` or ``HxWx3`` with row 0 on top."""
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file (header {tag!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError(f"{path}: malformed PFM size line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if tag == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise ValueError(f"{path}: expected {w * h * channels} floats, found {data.size}")
    img = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    return img[::-1].astype(np.float64)


def tonemap(image):
    """Clamp to [0, 1] and apply a 1/2.2 display gamma."""
    return np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) ** (1.0 / 2.2)


def write_png(path, image):
    img = np.round(tonemap(image) * 255.0).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    Image.fromarray(img).save(Path(path))


def write_env_pfm(path, faces):
    """Six ``R x R`` faces stacked vertically in +X, -X, +Y, -Y, +Z, -Z order."""
    faces = np.asarray(faces)
    write_pfm(path, faces.reshape(-1, faces.shape[2], 3))


def read_env_pfm(path):
    img = read_pfm(path)
    if img.ndim != 3 or img.shape[0] != 6 * img.shape[1]:
        raise ValueError(f"{path}: environment PFM must be R wide and 6R tall, got {img.shape[1]}x{img.shape[0]}")
    r = img.shape[1]
    return img.reshape(6, r, r, 3)
