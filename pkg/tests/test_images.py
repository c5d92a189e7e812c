from __future__ import annotations

import numpy as np
import pytest

from visreason.images import ImageStore, MissingImage, decode_png, encode_png, image_hash, new_image

from conftest import make_image


def test_put_get_round_trip(store: ImageStore):
    img = make_image(1)
    ref = store.put(img)
    assert np.array_equal(store.get(ref), img)


def test_refs_are_content_hashes(store: ImageStore):
    img = make_image(2)
    assert store.put(img) == image_hash(img)
    assert store.put(img.copy()) == image_hash(img)  # same content, same ref


def test_stored_images_are_immutable(store: ImageStore):
    ref = store.put(make_image(3))
    fetched = store.get(ref)
    with pytest.raises(ValueError):
        fetched[0, 0, 0] = 99


def test_missing_ref(store: ImageStore):
    with pytest.raises(MissingImage):
        store.get("nope")
    assert "nope" not in store


def test_png_round_trip():
    img = make_image(4, width=9, height=5)
    assert np.array_equal(decode_png(encode_png(img)), img)


def test_directory_persistence(tmp_path):
    img = make_image(5)
    first = ImageStore(tmp_path / "imgs")
    ref = first.put(img)
    assert (tmp_path / "imgs" / f"{ref}.png").exists()
    second = ImageStore(tmp_path / "imgs")
    assert np.array_equal(second.get(ref), img)
    assert second.refs() == [ref]


def test_new_image_fill():
    img = new_image(3, 2, (10, 20, 30, 40))
    assert img.shape == (2, 3, 4)
    assert (img[1, 2] == (10, 20, 30, 40)).all()
