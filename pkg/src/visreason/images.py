"""Content-addressed image storage.

Images are RGBA uint8 arrays of shape (height, width, 4). Trajectories and
tool observations never embed pixels; they carry the content hash computed
here, and an ImageStore resolves hashes back to pixels. A store may be
purely in-memory or mirrored to a directory of hash-named PNG files.
"""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import VisreasonError


class ImageStoreError(VisreasonError):
    pass


class MissingImage(ImageStoreError):
    pass


def new_image(width: int, height: int, rgba: tuple[int, int, int, int] = (0, 0, 0, 255)) -> np.ndarray:
    if width <= 0 or height <= 0:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    img = np.empty((height, width, 4), dtype=np.uint8)
    img[:, :] = rgba
    return img


def as_image(arr: np.ndarray) -> np.ndarray:
    """Coerce to a contiguous (h, w, 4) uint8 array or raise."""
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != 4 or a.dtype != np.uint8:
        raise ValueError(f"expected (h, w, 4) uint8 image, got shape {a.shape} dtype {a.dtype}")
    return np.ascontiguousarray(a)


def image_hash(img: np.ndarray) -> str:
    """Content hash over dimensions and raw RGBA bytes (not PNG bytes)."""
    img = as_image(img)
    h = hashlib.sha256()
    h.update(f"{img.shape[1]}x{img.shape[0]}:".encode())
    h.update(img.tobytes())
    return h.hexdigest()


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(as_image(img), mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with PILImage.open(io.BytesIO(data)) as pil:
        return np.asarray(pil.convert("RGBA"), dtype=np.uint8)


class ImageStore:
    """Map from content hash to an immutable RGBA image.

    With a root directory the store persists each image as <hash>.png on
    put and lazily loads on get, so episodes can resume from disk.
    """

    def __init__(self, root: str | Path | None = None):
        self._images: dict[str, np.ndarray] = {}
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def put(self, img: np.ndarray) -> str:
        img = as_image(img).copy()
        ref = image_hash(img)
        if ref not in self._images:
            img.setflags(write=False)
            self._images[ref] = img
            if self.root is not None:
                path = self.root / f"{ref}.png"
                if not path.exists():
                    tmp = path.with_suffix(".png.tmp")
                    tmp.write_bytes(encode_png(img))
                    tmp.replace(path)
        return ref

    def get(self, ref: str) -> np.ndarray:
        img = self._images.get(ref)
        if img is None and self.root is not None:
            path = self.root / f"{ref}.png"
            if path.exists():
                img = decode_png(path.read_bytes())
                img.setflags(write=False)
                self._images[ref] = img
        if img is None:
            raise MissingImage(f"no image with ref {ref!r}")
        return img

    def __contains__(self, ref: str) -> bool:
        try:
            self.get(ref)
        except MissingImage:
            return False
        return True

    def refs(self) -> list[str]:
        known = set(self._images)
        if self.root is not None:
            known.update(p.stem for p in self.root.glob("*.png"))
        return sorted(known)
