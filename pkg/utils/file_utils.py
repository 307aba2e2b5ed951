"""
File utilities for the continual distillation lab
Binary weight/dataset codecs, checksums, JSON/CSV helpers and image I/O
"""

import csv
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from core.errors import FormatError

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"CDLW"
DATASET_MAGIC = b"CDLD"
FORMAT_VERSION = 1

DTYPE_F64 = 0

IMAGE_EXTENSIONS = {'.png', '.jpg', '.jpeg', '.bmp', '.gif', '.tif', '.tiff', '.webp'}


# ---------------------------------------------------------------- CDLW weights

def encode_weights(arrays):
    """Serialize ``{name: float64 array}`` in sorted name order"""
    names = sorted(arrays)
    out = [WEIGHTS_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(names))]
    for name in names:
        arr = np.asarray(arrays[name])
        if arr.dtype != np.float64:
            raise FormatError(f"Failed to encode {name}: only float64 arrays are supported, got {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        out.append(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob, what):
        self.blob = blob
        self.offset = 0
        self.what = what

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.blob):
            raise FormatError(f"Failed to read {self.what}: truncated at byte {self.offset}")
        values = struct.unpack_from(fmt, self.blob, self.offset)
        self.offset += size
        return values

    def raw(self, size):
        if self.offset + size > len(self.blob):
            raise FormatError(f"Failed to read {self.what}: truncated at byte {self.offset}")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def finish(self):
        if self.offset != len(self.blob):
            raise FormatError(f"Failed to read {self.what}: {len(self.blob) - self.offset} trailing bytes")


def _check_header(reader, magic):
    found = reader.raw(4)
    if found != magic:
        raise FormatError(f"Failed to read {reader.what}: bad magic {found!r}, expected {magic!r}")
    (version,) = reader.take("<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"Failed to read {reader.what}: unsupported version {version}")


def decode_weights(blob):
    reader = _Reader(blob, "weights")
    _check_header(reader, WEIGHTS_MAGIC)
    (count,) = reader.take("<I")
    manifest = []
    for _ in range(count):
        (length,) = reader.take("<H")
        try:
            name = reader.raw(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"Failed to read weights: bad entry name: {str(e)}")
        dtype, rank = reader.take("<BB")
        if dtype != DTYPE_F64:
            raise FormatError(f"Failed to read weights: unknown dtype tag {dtype} for {name}")
        manifest.append((name, reader.take(f"<{rank}I")))
    arrays = {}
    for name, shape in manifest:
        size = int(np.prod(shape, dtype=np.int64)) * 8
        arrays[name] = np.frombuffer(reader.raw(size), dtype="<f8").astype(np.float64).reshape(shape)
    reader.finish()
    return arrays


def save_weights(path, arrays):
    """Write a CDLW file and return the sha256 of its payload"""
    blob = encode_weights(arrays)
    try:
        with open(path, 'wb') as f:
            f.write(blob)
    except OSError as e:
        raise FormatError(f"Failed to write weights to {path}: {str(e)}")
    return hashlib.sha256(blob).hexdigest()


def load_weights(path):
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise FormatError(f"Failed to read weights from {path}: {str(e)}")
    return decode_weights(blob)


# ---------------------------------------------------------------- CDLD datasets

@dataclass
class DatasetRecord:
    pixels: np.ndarray          # uint8 [N, C, H, W]
    labels: np.ndarray
    num_classes: int
    pretrain_classes: int


def encode_dataset(record):
    pixels = np.asarray(record.pixels)
    labels = np.asarray(record.labels)
    if pixels.dtype != np.uint8 or pixels.ndim != 4:
        raise FormatError(f"Failed to encode dataset: pixels must be uint8 [N, C, H, W], got {pixels.dtype} {pixels.shape}")
    n, c, h, w = pixels.shape
    if labels.shape != (n,):
        raise FormatError(f"Failed to encode dataset: {labels.shape[0]} labels for {n} samples")
    if n and (labels.min() < 0 or labels.max() >= record.num_classes):
        raise FormatError("Failed to encode dataset: labels outside [0, n_classes)")
    header = struct.pack("<HIBHHHH", FORMAT_VERSION, n, c, h, w, record.num_classes, record.pretrain_classes)
    return b"".join([DATASET_MAGIC, header, labels.astype("<u2").tobytes(), np.ascontiguousarray(pixels).tobytes()])


def decode_dataset(blob):
    reader = _Reader(blob, "dataset")
    _check_header(reader, DATASET_MAGIC)
    n, c, h, w, classes, pretrain = reader.take("<IBHHHH")
    labels = np.frombuffer(reader.raw(2 * n), dtype="<u2").astype(np.int64)
    pixels = np.frombuffer(reader.raw(n * c * h * w), dtype=np.uint8).reshape(n, c, h, w).copy()
    reader.finish()
    return DatasetRecord(pixels, labels, classes, pretrain)


def save_dataset_file(path, record):
    blob = encode_dataset(record)
    try:
        with open(path, 'wb') as f:
            f.write(blob)
    except OSError as e:
        raise FormatError(f"Failed to write dataset to {path}: {str(e)}")
    return hashlib.sha256(blob).hexdigest()


def load_dataset_file(path):
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise FormatError(f"Failed to read dataset from {path}: {str(e)}")
    return decode_dataset(blob)


# ---------------------------------------------------------------- images

def save_preview(path, pixels, per_row=10, scale=4):
    """Tile uint8 [N, C, H, W] images into one PNG sheet"""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 4 or len(pixels) == 0:
        raise FormatError(f"Failed to write preview: expected a non-empty [N, C, H, W] array, got {pixels.shape}")
    n, c, h, w = pixels.shape
    cols = min(per_row, n)
    rows = -(-n // cols)
    sheet = np.zeros((rows * (h + 1), cols * (w + 1), c), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, cols)
        sheet[r * (h + 1):r * (h + 1) + h, col * (w + 1):col * (w + 1) + w] = pixels[i].transpose(1, 2, 0)
    image = Image.fromarray(sheet[..., 0] if c == 1 else sheet[..., :3])
    image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
    image.save(path, format="PNG")
    return path


def images_from_folder(directory, image_size, channels=3):
    """Class-per-subfolder image tree -> (uint8 [N, C, S, S], labels, class names)"""
    if not os.path.isdir(directory):
        raise FormatError(f"Failed to import images: {directory} is not a directory")
    class_names = sorted(d for d in os.listdir(directory) if os.path.isdir(os.path.join(directory, d)))
    if not class_names:
        raise FormatError(f"Failed to import images: no class subfolders in {directory}")
    mode = "L" if channels == 1 else "RGB"
    pixels, labels = [], []
    for label, name in enumerate(class_names):
        folder = os.path.join(directory, name)
        for filename in sorted(os.listdir(folder)):
            if os.path.splitext(filename.lower())[1] not in IMAGE_EXTENSIONS:
                continue
            try:
                with Image.open(os.path.join(folder, filename)) as img:
                    arr = np.asarray(img.convert(mode).resize((image_size, image_size), Image.BILINEAR))
            except OSError as e:
                raise FormatError(f"Failed to import {filename}: {str(e)}")
            pixels.append(arr[None] if channels == 1 else arr.transpose(2, 0, 1))
            labels.append(label)
    if not pixels:
        raise FormatError(f"Failed to import images: no readable images under {directory}")
    logger.info("Imported %d images in %d classes from %s", len(labels), len(class_names), directory)
    return np.stack(pixels).astype(np.uint8), np.asarray(labels, dtype=np.int64), class_names


# ---------------------------------------------------------------- misc helpers

class FileUtils:
    def ensure_directory_exists(self, directory):
        """Ensure directory exists, create if necessary"""
        try:
            os.makedirs(directory, exist_ok=True)
            return True, ""
        except PermissionError:
            return False, "Permission denied"
        except Exception as e:
            return False, str(e)

    def calculate_file_hash(self, filepath, algorithm='sha256', chunk_size=8192):
        """Calculate hash of file"""
        try:
            hash_obj = hashlib.new(algorithm)
            with open(filepath, 'rb') as f:
                while chunk := f.read(chunk_size):
                    hash_obj.update(chunk)
            return hash_obj.hexdigest()
        except OSError:
            return None

    def format_duration(self, seconds):
        """Format duration in seconds to readable format"""
        try:
            seconds = int(float(seconds))
            if seconds < 60:
                return f"{seconds}s"
            elif seconds < 3600:
                return f"{seconds // 60}m {seconds % 60}s"
            else:
                return f"{seconds // 3600}h {(seconds % 3600) // 60}m"
        except (ValueError, TypeError):
            return "Unknown"

    def write_json(self, path, data):
        try:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
                f.write("\n")
        except (OSError, TypeError) as e:
            raise FormatError(f"Failed to write {path}: {str(e)}")

    def read_json(self, path):
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (OSError, ValueError) as e:
            raise FormatError(f"Failed to read {path}: {str(e)}")

    def write_csv(self, path, fieldnames, rows):
        try:
            with open(path, 'w', newline='', encoding='utf-8') as csvfile:
                writer = csv.DictWriter(csvfile, fieldnames=fieldnames, lineterminator="\n")
                writer.writeheader()
                for row in rows:
                    writer.writerow(row)
        except OSError as e:
            raise FormatError(f"Failed to write {path}: {str(e)}")

    def read_csv(self, path):
        try:
            with open(path, 'r', newline='', encoding='utf-8') as csvfile:
                return list(csv.DictReader(csvfile))
        except OSError as e:
            raise FormatError(f"Failed to read {path}: {str(e)}")
