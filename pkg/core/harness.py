"""
Continual distillation harness
Backbone pretraining, per-task training, evaluation and the
teacher-then-student loop over a task stream
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from core.autodiff import Tape, cross_entropy, grad
from core.dataset import RehearsalAudit, TaskView, epoch_order
from core.distillation import DistillConfig, TeacherSnapshot, student_loss
from core.errors import ConfigurationError, ContractViolation
from core.learner import ContinualLearner
from core.metrics import MetricsReport, ResultMatrix
from core.optimizer import DEFAULT_LEARNING_RATE, Adam
from core.prompt_pool import POOL_PRESETS, PoolConfig
from core.rng import SeededRng
from core.vit import STUDENT_CONFIG, TEACHER_CONFIG, BackboneWeights, ClassifierHead, VisionTransformer, assert_frozen, classify

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    tasks: int = 5
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = DEFAULT_LEARNING_RATE
    pretrain_epochs: int = 3
    unfreeze_last_block: bool = False
    pool: PoolConfig = POOL_PRESETS["coda"]
    distill: DistillConfig = field(default_factory=DistillConfig)
    student: object = STUDENT_CONFIG
    teacher: object = TEACHER_CONFIG

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs per task must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.pretrain_epochs < 0:
            raise ConfigurationError("pretraining epochs must be >= 0")
        if self.tasks < 1:
            raise ConfigurationError("a run needs at least one task")
        self.student.validate()
        self.teacher.validate()
        self.distill.validate()
        if self.distill.method in ("fitnets", "reviewkd") and self.student.num_patches != self.teacher.num_patches:
            raise ConfigurationError("feature distillation needs matching teacher/student patch grids")
        return self


@dataclass
class PretrainResult:
    weights: BackboneWeights
    accuracy: float
    losses: list


@dataclass
class TaskLog:
    task_id: int
    role: str
    epoch_losses: list = field(default_factory=list)
    steps: int = 0


@dataclass
class CDLResult:
    student_matrix: ResultMatrix
    teacher_matrix: ResultMatrix
    student_report: MetricsReport
    teacher_report: MetricsReport
    audit: RehearsalAudit
    checksums: dict
    logs: list


# ---------------------------------------------------------------- pretraining

def pretrain_backbone(config, split, epochs, seed=0, batch_size=32, learning_rate=DEFAULT_LEARNING_RATE,
                      cl_classes=None, progress=False):
    """Plain cross-entropy training on the pretraining split; returns frozen weights"""
    classes = split.classes()
    if cl_classes is not None and set(classes) & set(cl_classes):
        raise ConfigurationError(f"pretraining classes overlap the continual classes: {sorted(set(classes) & set(cl_classes))}")
    if epochs < 0:
        raise ConfigurationError("pretraining epochs must be >= 0")
    rng = SeededRng(seed, f"pretrain/D{config.embed_dim}xL{config.blocks}")
    weights = BackboneWeights.initialize(config, rng.split("init"))
    if epochs == 0 or not classes:
        logger.info("No pretraining for the %d-block backbone; using its random initialization", config.blocks)
        return PretrainResult(weights.freeze(), 0.0, [])

    head = ClassifierHead.initialize(config.embed_dim, max(classes) + 1, rng.split("head"), role="pretrain")
    optimizer = Adam(lr=learning_rate)
    losses = []
    for epoch in tqdm(range(epochs), desc=f"pretrain D={config.embed_dim}", disable=not progress):
        order = rng.split(f"epoch{epoch}").permutation(len(split))
        total, batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            params = {f"backbone/{k}": v for k, v in weights.params.items()}
            params["head/w"], params["head/b"] = head.weight, head.bias
            with Tape():
                out = VisionTransformer(weights).forward_features(split.images(index))
                loss = cross_entropy(classify(out.cls_embedding, head), split.labels[index])
                grads = grad(loss, params)
            updated = optimizer.step(params, grads)
            weights = weights.updated({k[len("backbone/"):]: v for k, v in updated.items() if k.startswith("backbone/")})
            head = ClassifierHead(updated["head/w"], updated["head/b"], head.role)
            total += loss.item()
            batches += 1
        losses.append(total / max(batches, 1))
        logger.info("pretrain D=%d epoch %d: loss %.4f", config.embed_dim, epoch + 1, losses[-1])

    accuracy = _pretrain_accuracy(VisionTransformer(weights), head, split, batch_size=256)
    logger.info("pretrain D=%d done: train accuracy %.2f%%", config.embed_dim, accuracy)
    return PretrainResult(weights.freeze(), accuracy, losses)


def _pretrain_accuracy(vit, head, split, batch_size):
    correct = 0
    for start in range(0, len(split), batch_size):
        out = vit.forward_features(split.images(slice(start, start + batch_size)))
        pred = np.argmax(classify(out.cls_embedding, head).data, axis=-1)
        correct += int((pred == split.labels[start:start + batch_size]).sum())
    return 100.0 * correct / max(len(split), 1)


# ---------------------------------------------------------------- training

def build_learners(config, student_backbone, teacher_backbone):
    """Teacher and student learners with independent seeded streams"""
    rng = SeededRng(config.seed, "learners")
    teacher = ContinualLearner.build("teacher", teacher_backbone, config.pool, config.tasks, rng.split("teacher"))
    student = ContinualLearner.build(
        "student", student_backbone, config.pool, config.tasks, rng.split("student"),
        distill=config.distill, unfreeze_last_block=config.unfreeze_last_block,
        teacher_config=teacher_backbone.config,
    )
    return teacher, student


def train_task(learner, view, config, distill=None, teacher=None, seen_classes=None):
    """Adam over the learner's trainable tensors for ``config.epochs`` epochs on one task"""
    distill = distill or DistillConfig()
    if distill.needs_teacher and teacher is None:
        raise ContractViolation(f"distillation '{distill.method}' needs a teacher snapshot")
    if not distill.needs_teacher and teacher is not None:
        raise ContractViolation("a teacher snapshot was given but distillation is disabled")
    task = view.task
    optimizer = Adam(lr=config.learning_rate)
    log = TaskLog(task.task_id, learner.role)
    for epoch in range(config.epochs):
        order = epoch_order(config.seed, task.task_id, epoch, len(view))
        total, batches = 0.0, 0
        for images, labels, ids in view.batches(config.batch_size, order):
            queries = learner.queries(images, ids)
            params = learner.trainable()
            with Tape():
                loss, parts = student_loss(learner, images, labels, queries, task.task_id, distill,
                                           task.classes, seen_classes, teacher, ids)
                grads = grad(loss, params)
            learner.apply(optimizer.step(params, grads))
            logger.debug("%s task %d step %d: total %.4f ce %.4f distill %.4f pool %.4f", learner.role,
                         task.task_id, log.steps, parts.total, parts.ce, parts.distill, parts.pool)
            total += parts.total
            batches += 1
            log.steps += 1
        log.epoch_losses.append(total / max(batches, 1))
        logger.info("%s task %d epoch %d: mean loss %.4f", learner.role, task.task_id, epoch + 1, log.epoch_losses[-1])
    return log


def evaluate(learner, stream, upto):
    """Accuracy (percent) on each task 0..upto over every class seen so far"""
    seen = stream.seen_classes(upto)
    accuracies = []
    for task in stream.tasks[: upto + 1]:
        test = task.test
        if len(test) == 0:
            raise ContractViolation(f"task {task.task_id} has no test samples")
        pred = learner.predict(test.images(), seen, sample_ids=test.sample_ids)
        accuracies.append(100.0 * float(np.mean(pred == test.labels)))
    return accuracies


def _check_backbone(label, before, learner, allow_last_block):
    audit = assert_frozen(before, learner.vit.weights, allow_last_block=allow_last_block)
    if not audit.passed:
        raise ContractViolation(f"{label} backbone changed outside the allowed arrays: {audit.first_difference}")
    return audit


def _check_capacity(stream, *learners):
    for learner in learners:
        if learner.head.num_classes < stream.num_classes:
            raise ConfigurationError(
                f"{learner.role} head has {learner.head.num_classes} outputs for {stream.num_classes} classes"
            )


def continual_run(learner, stream, config, audit=None):
    """Plain prompt-based continual learning, no teacher"""
    config.validate()
    _check_capacity(stream, learner)
    audit = audit or RehearsalAudit()
    matrix = ResultMatrix(stream.num_tasks)
    started = time.perf_counter()
    before = learner.vit.weights
    for task in stream.tasks:
        learner.begin_task(task.task_id)
        audit.open_task(task)
        train_task(learner, TaskView(task, audit), config, seen_classes=stream.seen_classes(task.task_id))
        _check_backbone(learner.role, before, learner, config.unfreeze_last_block)
        matrix.record_row(task.task_id, evaluate(learner, stream, task.task_id))
    return matrix, MetricsReport.from_matrix(matrix, config.seed, time.perf_counter() - started)


def cdl_run(teacher, student, stream, config, audit=None, progress_callback=None):
    """Per task: train the teacher, snapshot it, distill into the student, evaluate both"""
    config.validate()
    _check_capacity(stream, teacher, student)
    if teacher.vit.config.embed_dim < student.vit.config.embed_dim:
        logger.warning("teacher is narrower than the student (D=%d < D=%d)",
                       teacher.vit.config.embed_dim, student.vit.config.embed_dim)
    audit = audit or RehearsalAudit()
    distill = config.distill
    student_matrix = ResultMatrix(stream.num_tasks)
    teacher_matrix = ResultMatrix(stream.num_tasks)
    teacher_before, student_before = teacher.vit.weights, student.vit.weights
    checksums = {"teacher_backbone": [], "student_backbone": [], "teacher_snapshot": []}
    logs = []
    started = time.perf_counter()

    for task in stream.tasks:
        t = task.task_id
        seen = stream.seen_classes(t)
        teacher.begin_task(t)
        student.begin_task(t)
        audit.open_task(task)
        view = TaskView(task, audit)

        logs.append(train_task(teacher, view, config, seen_classes=seen))
        snapshot = TeacherSnapshot.capture(teacher) if distill.needs_teacher else None
        logs.append(train_task(student, view, config, distill=distill, teacher=snapshot, seen_classes=seen))
        if snapshot is not None:
            checksums["teacher_snapshot"].append(snapshot.verify())

        _check_backbone("teacher", teacher_before, teacher, False)
        _check_backbone("student", student_before, student, config.unfreeze_last_block)
        checksums["teacher_backbone"].append(teacher.backbone_checksum())
        checksums["student_backbone"].append(student.backbone_checksum())

        teacher_matrix.record_row(t, evaluate(teacher, stream, t))
        student_matrix.record_row(t, evaluate(student, stream, t))
        logger.info("task %d: teacher %s | student %s", t,
                    " ".join(f"{a:.1f}" for a in teacher_matrix.row(t)),
                    " ".join(f"{a:.1f}" for a in student_matrix.row(t)))
        if progress_callback:
            progress_callback(t, {"teacher": list(teacher_matrix.row(t)), "student": list(student_matrix.row(t))})

    elapsed = time.perf_counter() - started
    return CDLResult(
        student_matrix,
        teacher_matrix,
        MetricsReport.from_matrix(student_matrix, config.seed, elapsed),
        MetricsReport.from_matrix(teacher_matrix, config.seed, elapsed),
        audit,
        checksums,
        logs,
    )
