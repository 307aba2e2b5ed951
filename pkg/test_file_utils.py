#!/usr/bin/env python3
"""
Tests for the CDLW/CDLD codecs, preview sheets and image import
"""

import struct

import numpy as np
import pytest
from PIL import Image

from conftest import TINY_STUDENT
from core.autodiff import Tensor
from core.errors import ConfigurationError, FormatError
from core.gradcheck_suite import mini_learners
from core.rng import SeededRng
from core.vit import BackboneWeights
from utils.file_utils import (
    DatasetRecord,
    FileUtils,
    decode_dataset,
    decode_weights,
    encode_dataset,
    encode_weights,
    images_from_folder,
    load_weights,
    save_preview,
    save_weights,
)


def test_weights_file_is_bit_exact(tmp_path):
    arrays = BackboneWeights.initialize(TINY_STUDENT, SeededRng(0, "cdlw")).arrays()
    path = tmp_path / "student.cdlw"
    digest = save_weights(str(path), arrays)
    loaded = load_weights(str(path))
    assert set(loaded) == set(arrays)
    for name, arr in arrays.items():
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == arr.tobytes()
    assert digest == FileUtils().calculate_file_hash(str(path))


def test_weights_layout():
    blob = encode_weights({"b": np.array([1.5]), "a": np.zeros((2, 3))})
    assert blob[:4] == b"CDLW"
    assert struct.unpack_from("<HI", blob, 4) == (1, 2)
    # entries follow sorted name order
    assert struct.unpack_from("<H", blob, 10) == (1,) and blob[12:13] == b"a"
    assert blob[-8:] == struct.pack("<d", 1.5)
    assert list(decode_weights(blob)) == ["a", "b"]


def test_scalar_and_empty_arrays():
    arrays = {"scalar": np.array(2.0), "empty": np.zeros((0, 4))}
    decoded = decode_weights(encode_weights(arrays))
    assert decoded["scalar"].shape == () and decoded["scalar"] == 2.0
    assert decoded["empty"].shape == (0, 4)


def test_weights_errors():
    blob = encode_weights({"w": np.ones(3)})
    with pytest.raises(FormatError):
        decode_weights(blob[:-1])
    with pytest.raises(FormatError):
        decode_weights(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_weights(blob + b"\0")
    with pytest.raises(FormatError):
        decode_weights(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(FormatError):
        encode_weights({"w": np.ones(3, dtype=np.float32)})


def test_dataset_record_is_bit_exact():
    pixels = SeededRng(0, "cdld").integers(0, 256, (5, 3, 4, 4)).astype(np.uint8)
    record = DatasetRecord(pixels, np.array([0, 1, 2, 3, 4]), 6, 2)
    decoded = decode_dataset(encode_dataset(record))
    assert decoded.pixels.tobytes() == pixels.tobytes()
    assert decoded.labels.tolist() == [0, 1, 2, 3, 4]
    assert (decoded.num_classes, decoded.pretrain_classes) == (6, 2)


def test_dataset_record_errors():
    pixels = np.zeros((2, 1, 2, 2), dtype=np.uint8)
    with pytest.raises(FormatError):
        encode_dataset(DatasetRecord(pixels, np.array([0, 3]), 3, 0))
    with pytest.raises(FormatError):
        encode_dataset(DatasetRecord(pixels.astype(np.float64), np.array([0, 1]), 3, 0))
    blob = encode_dataset(DatasetRecord(pixels, np.array([0, 1]), 3, 0))
    with pytest.raises(FormatError):
        decode_dataset(blob[:-3])
    with pytest.raises(FormatError):
        decode_dataset(b"CDLW" + blob[4:])


def test_preview_sheet(tmp_path):
    pixels = np.full((3, 3, 4, 4), 200, dtype=np.uint8)
    path = save_preview(str(tmp_path / "preview.png"), pixels, per_row=2, scale=2)
    with Image.open(path) as img:
        assert img.format == "PNG"
        assert img.size == (2 * 5 * 2, 2 * 5 * 2)
    with pytest.raises(FormatError):
        save_preview(str(tmp_path / "empty.png"), np.zeros((0, 3, 4, 4)))


def test_images_from_folder(tmp_path):
    for name, colour in (("cat", (255, 0, 0)), ("dog", (0, 0, 255))):
        folder = tmp_path / name
        folder.mkdir()
        for i in range(2):
            Image.new("RGB", (10, 6), colour).save(folder / f"{i}.png")
        (folder / "notes.txt").write_text("skip me")
    pixels, labels, names = images_from_folder(str(tmp_path), image_size=8)
    assert pixels.shape == (4, 3, 8, 8) and pixels.dtype == np.uint8
    assert labels.tolist() == [0, 0, 1, 1]
    assert names == ["cat", "dog"]
    assert pixels[0, 0].min() == 255 and pixels[3, 2].min() == 255
    gray, _, _ = images_from_folder(str(tmp_path), image_size=4, channels=1)
    assert gray.shape == (4, 1, 4, 4)


def test_images_from_folder_errors(tmp_path):
    with pytest.raises(FormatError):
        images_from_folder(str(tmp_path / "missing"), 8)
    with pytest.raises(FormatError):
        images_from_folder(str(tmp_path), 8)
    (tmp_path / "empty_class").mkdir()
    with pytest.raises(FormatError):
        images_from_folder(str(tmp_path), 8)


def test_json_and_csv_helpers(tmp_path):
    utils = FileUtils()
    utils.write_json(str(tmp_path / "a.json"), {"b": 1, "a": [1.5]})
    assert utils.read_json(str(tmp_path / "a.json")) == {"a": [1.5], "b": 1}
    utils.write_csv(str(tmp_path / "a.csv"), ["x", "y"], [{"x": 1, "y": "z"}])
    assert utils.read_csv(str(tmp_path / "a.csv")) == [{"x": "1", "y": "z"}]
    with pytest.raises(FormatError):
        utils.read_json(str(tmp_path / "missing.json"))
    assert utils.format_duration(75) == "1m 15s"


def _nudged(learner):
    learner.apply({
        name: Tensor(t.data + 0.25, requires_grad=True, name=t.name)
        for name, t in learner.trainable().items()
    })
    return learner


@pytest.mark.parametrize("pool", ["coda", "l2p", "dualprompt"])
def test_learner_state_round_trips_through_weights_file(tmp_path, pool):
    trained, _, _ = mini_learners(0, "kdp", pool)
    _nudged(trained)
    fresh, _, _ = mini_learners(0, "kdp", pool)
    assert fresh.checksum() != trained.checksum()

    path = tmp_path / "student.cdlw"
    save_weights(str(path), trained.arrays())
    stored = load_weights(str(path))
    assert {name for name in stored if name.startswith("pool/")} == set(trained.pool.parameters())
    assert not any(name.startswith("backbone/") for name in stored)

    fresh.load_arrays(stored)
    assert fresh.checksum() == trained.checksum()
    assert set(fresh.trainable()) == set(trained.trainable())


def test_pool_state_round_trip_and_mismatch(tmp_path):
    trained, _, _ = mini_learners(0, "none", "coda")
    _nudged(trained)
    fresh, _, _ = mini_learners(0, "none", "coda")
    path = tmp_path / "pool.cdlw"
    save_weights(str(path), trained.pool.arrays())
    fresh.pool.load_arrays(load_weights(str(path)))
    assert fresh.checksum() == trained.checksum()

    other, _, _ = mini_learners(0, "none", "l2p")
    with pytest.raises(ConfigurationError):
        other.pool.load_arrays(load_weights(str(path)))
    with pytest.raises(ConfigurationError):
        other.load_arrays(trained.arrays())
