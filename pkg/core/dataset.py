"""
Synthetic image data and class-incremental task streams
Also holds the rehearsal audit that proves a task only reads its own samples
"""

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from core.errors import ConfigurationError, ContractViolation, FormatError, RehearsalError
from core.rng import SeededRng
from utils.file_utils import DatasetRecord, load_dataset_file, save_dataset_file

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 20           # continual-learning classes
    pretrain_classes: int = 10      # disjoint block used only for backbone pretraining
    image_size: int = 16
    channels: int = 3
    train_per_class: int = 200
    test_per_class: int = 50
    noise: float = 0.05
    max_shift: int = 1              # pixels, per axis
    contrast: float = 0.2           # factor drawn from [1 - contrast, 1 + contrast]
    coarse: int = 4                 # prototype grid before upsampling
    seed: int = 0

    def validate(self):
        if self.noise < 0:
            raise ContractViolation(f"noise sigma must be non-negative, got {self.noise}")
        if self.max_shift < 0 or not 0 <= self.contrast < 1:
            raise ContractViolation("jitter ranges must be non-negative (contrast below 1)")
        if self.num_classes < 1 or self.pretrain_classes < 0:
            raise ContractViolation("class counts must be positive")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ContractViolation("every class needs train and test samples")
        if self.image_size % self.coarse:
            raise ContractViolation(f"image size {self.image_size} is not a multiple of the prototype grid {self.coarse}")
        return self

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "pretrain_classes": self.pretrain_classes,
            "image_size": self.image_size,
            "channels": self.channels,
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "noise": self.noise,
            "max_shift": self.max_shift,
            "contrast": self.contrast,
            "coarse": self.coarse,
            "seed": self.seed,
        }


@dataclass
class LabeledImages:
    """uint8 pixels [N, C, H, W], integer labels and dataset-unique sample ids"""

    pixels: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    def __len__(self):
        return len(self.labels)

    def images(self, index=None):
        pixels = self.pixels if index is None else self.pixels[index]
        return pixels.astype(np.float64) / 255.0

    def subset(self, mask):
        return LabeledImages(self.pixels[mask], self.labels[mask], self.sample_ids[mask])

    def classes(self):
        return sorted(int(c) for c in np.unique(self.labels))


@dataclass
class SyntheticDataset:
    """Pretraining split plus continual train/test splits

    Pretraining labels are 0..P-1; continual labels are 0..C-1 and stand
    for global class ids P..P+C-1.
    """

    pretrain: LabeledImages
    train: LabeledImages
    test: LabeledImages
    num_classes: int
    pretrain_classes: int

    def global_classes(self):
        return list(range(self.pretrain_classes, self.pretrain_classes + self.num_classes))


def _prototype(spec, rng):
    grid = rng.uniform((spec.channels, spec.coarse, spec.coarse), 0.15, 0.85)
    scale = spec.image_size // spec.coarse
    return np.kron(grid, np.ones((1, scale, scale)))


def _render(prototype, count, spec, rng):
    out = np.empty((count,) + prototype.shape)
    shifts = rng.integers(-spec.max_shift, spec.max_shift + 1, (count, 2)) if spec.max_shift else np.zeros((count, 2), int)
    factors = rng.uniform((count,), 1.0 - spec.contrast, 1.0 + spec.contrast) if spec.contrast else np.ones(count)
    noise = rng.normal((count,) + prototype.shape, spec.noise) if spec.noise else np.zeros(out.shape)
    for i in range(count):
        img = np.roll(prototype, (int(shifts[i, 0]), int(shifts[i, 1])), axis=(1, 2))
        out[i] = 0.5 + factors[i] * (img - 0.5) + noise[i]
    return np.round(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_synthetic_dataset(spec):
    """Prototype-plus-jitter classes; deterministic for a given spec"""
    spec.validate()
    rng = SeededRng(spec.seed, "dataset")

    def block(prefix, classes, per_class, split):
        pixels, labels = [], []
        for c in range(classes):
            proto = _prototype(spec, rng.split(f"{prefix}{c}"))
            pixels.append(_render(proto, per_class, spec, rng.split(f"{prefix}{c}/{split}")))
            labels.append(np.full(per_class, c, dtype=np.int64))
        if not pixels:
            shape = (0, spec.channels, spec.image_size, spec.image_size)
            return np.zeros(shape, np.uint8), np.zeros(0, np.int64)
        return np.concatenate(pixels), np.concatenate(labels)

    pre_px, pre_y = block("pretrain", spec.pretrain_classes, spec.train_per_class, "train")
    tr_px, tr_y = block("class", spec.num_classes, spec.train_per_class, "train")
    te_px, te_y = block("class", spec.num_classes, spec.test_per_class, "test")
    dataset = assemble_dataset(pre_px, pre_y, tr_px, tr_y, te_px, te_y, spec.num_classes, spec.pretrain_classes)
    logger.info("Generated %d pretraining, %d train and %d test samples (%d + %d classes)",
                len(pre_y), len(tr_y), len(te_y), spec.pretrain_classes, spec.num_classes)
    return dataset


def assemble_dataset(pre_px, pre_y, tr_px, tr_y, te_px, te_y, num_classes, pretrain_classes):
    """Number samples in storage order: pretraining, continual train, continual test"""
    n_pre, n_tr = len(pre_y), len(tr_y)
    return SyntheticDataset(
        LabeledImages(pre_px, pre_y, np.arange(n_pre)),
        LabeledImages(tr_px, tr_y, np.arange(n_pre, n_pre + n_tr)),
        LabeledImages(te_px, te_y, np.arange(n_pre + n_tr, n_pre + n_tr + len(te_y))),
        num_classes,
        pretrain_classes,
    )


# ---------------------------------------------------------------- task streams

@dataclass
class TaskData:
    task_id: int
    classes: tuple
    train: LabeledImages
    test: LabeledImages


@dataclass
class TaskStream:
    tasks: list
    class_order: tuple

    @property
    def num_tasks(self):
        return len(self.tasks)

    @property
    def num_classes(self):
        return len(self.class_order)

    def seen_classes(self, task_id):
        seen = []
        for task in self.tasks[: task_id + 1]:
            seen.extend(task.classes)
        return sorted(seen)


def make_task_stream(dataset, num_tasks, seed):
    """Shuffle the continual classes by ``seed`` and chunk them into disjoint tasks"""
    classes = dataset.num_classes
    if num_tasks < 1 or classes % num_tasks:
        raise ConfigurationError(f"{classes} classes cannot be split evenly into {num_tasks} tasks")
    order = tuple(int(c) for c in SeededRng(seed, "class_order").permutation(classes))
    per_task = classes // num_tasks
    tasks = []
    for t in range(num_tasks):
        chunk = order[t * per_task:(t + 1) * per_task]
        tasks.append(TaskData(
            t,
            tuple(sorted(chunk)),
            dataset.train.subset(np.isin(dataset.train.labels, chunk)),
            dataset.test.subset(np.isin(dataset.test.labels, chunk)),
        ))
    return TaskStream(tasks, order)


def epoch_order(seed, task_id, epoch, count):
    """Sample order for one epoch; teacher and student both read it"""
    return SeededRng(seed, f"order/task{task_id}/epoch{epoch}").permutation(count)


# ---------------------------------------------------------------- rehearsal audit

@dataclass
class RehearsalAudit:
    """Counts every training read and rejects reads outside the open task"""

    current_task: int = None
    allowed: frozenset = frozenset()
    reads: dict = field(default_factory=dict)
    violations: int = 0

    def open_task(self, task):
        self.current_task = task.task_id
        self.allowed = frozenset(int(i) for i in task.train.sample_ids)
        self.reads.setdefault(task.task_id, 0)

    def record(self, sample_ids):
        if self.current_task is None:
            raise RehearsalError("training read before any task was opened")
        outside = [int(i) for i in sample_ids if int(i) not in self.allowed]
        if outside:
            self.violations += len(outside)
            raise RehearsalError(f"task {self.current_task} read {len(outside)} samples from other tasks, e.g. {outside[:3]}")
        self.reads[self.current_task] += len(sample_ids)


class TaskView:
    """Training-side access to one task's data, routed through the audit"""

    def __init__(self, task, audit=None):
        self.task = task
        self.audit = audit

    def __len__(self):
        return len(self.task.train)

    def batches(self, batch_size, order):
        if batch_size < 1:
            raise ContractViolation(f"batch size must be positive, got {batch_size}")
        data = self.task.train
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            ids = data.sample_ids[index]
            if self.audit is not None:
                self.audit.record(ids)
            yield data.images(index), data.labels[index], ids


# ---------------------------------------------------------------- persistence

TRAIN_FILE = "train.cdld"
TEST_FILE = "test.cdld"


def save_dataset(dataset, directory):
    """Write train/test CDLD files; continual labels are stored as global ids"""
    p = dataset.pretrain_classes
    total = p + dataset.num_classes
    train = DatasetRecord(
        np.concatenate([dataset.pretrain.pixels, dataset.train.pixels]),
        np.concatenate([dataset.pretrain.labels, dataset.train.labels + p]),
        total,
        p,
    )
    test = DatasetRecord(dataset.test.pixels, dataset.test.labels + p, total, p)
    return {
        TRAIN_FILE: save_dataset_file(os.path.join(directory, TRAIN_FILE), train),
        TEST_FILE: save_dataset_file(os.path.join(directory, TEST_FILE), test),
    }


def load_dataset(directory):
    train = load_dataset_file(os.path.join(directory, TRAIN_FILE))
    test = load_dataset_file(os.path.join(directory, TEST_FILE))
    if (train.num_classes, train.pretrain_classes) != (test.num_classes, test.pretrain_classes):
        raise FormatError(f"Failed to read dataset: {TRAIN_FILE} and {TEST_FILE} disagree on class counts")
    p = train.pretrain_classes
    if (test.labels < p).any():
        raise FormatError(f"Failed to read dataset: {TEST_FILE} holds pretraining classes")
    pre = train.labels < p
    return assemble_dataset(
        train.pixels[pre], train.labels[pre],
        train.pixels[~pre], train.labels[~pre] - p,
        test.pixels, test.labels - p,
        train.num_classes - p, p,
    )


def dataset_from_images(pixels, labels, pretrain_classes, test_fraction=0.2, seed=0):
    """Imported images -> dataset; the first ``pretrain_classes`` labels form the pretraining block"""
    labels = np.asarray(labels, dtype=np.int64)
    classes = int(labels.max()) + 1
    if not 0 <= pretrain_classes < classes:
        raise ConfigurationError(f"{pretrain_classes} pretraining classes leave no continual classes out of {classes}")
    rng = SeededRng(seed, "import_split")
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in range(pretrain_classes, classes):
        members = np.flatnonzero(labels == c)
        held = int(round(len(members) * test_fraction))
        test_mask[members[rng.split(str(c)).permutation(len(members))[:held]]] = True
    pre = labels < pretrain_classes
    cl_train = ~pre & ~test_mask
    return assemble_dataset(
        pixels[pre], labels[pre],
        pixels[cl_train], labels[cl_train] - pretrain_classes,
        pixels[test_mask], labels[test_mask] - pretrain_classes,
        classes - pretrain_classes, pretrain_classes,
    )


def class_prototypes(dataset):
    """First training sample of every class, pretraining block first (preview sheets)"""
    sheets = []
    for split in (dataset.pretrain, dataset.train):
        for c in split.classes():
            sheets.append(split.pixels[np.flatnonzero(split.labels == c)[0]])
    return np.stack(sheets)
