"""
Registered finite-difference checks
Primitives, pool losses, distillation losses and the composite student
objective on a miniature model
"""

import logging
from dataclasses import dataclass

import numpy as np

from core import autodiff as ad
from core.autodiff import Tensor, no_tape
from core.distillation import (
    DistillConfig,
    FeatureMapping,
    TeacherSnapshot,
    dkd_loss,
    fitnets_loss,
    kd_loss,
    reviewkd_loss,
    student_loss,
)
from core.gradcheck import finite_difference_check
from core.learner import ContinualLearner
from core.prompt_pool import PoolConfig, build_pool, l2p_key_loss, pool_orthogonality
from core.rng import SeededRng
from core.vit import BackboneWeights, ViTConfig

logger = logging.getLogger(__name__)

PRIMITIVE_TOLERANCE = 1e-5
LOSS_TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3


@dataclass
class GradCheck:
    name: str
    kind: str               # primitive | loss | composite
    tolerance: float
    build: object           # seed -> (loss_builder, params, max_coords)


@dataclass
class SuiteEntry:
    name: str
    kind: str
    tolerance: float
    result: object = None
    error: str = None

    @property
    def passed(self):
        return self.error is None and self.result.passed(self.tolerance)


def _param(rng, name, shape, std=1.0, offset=0.0):
    return Tensor(rng.normal(shape, std) + offset, requires_grad=True, name=name)


def _projected(fn, inputs, rng):
    """sum(fn(*inputs) * W) for a fixed random W, so every output element matters"""
    with no_tape():
        shape = fn(*inputs).shape
    weight = rng.normal(shape)
    return lambda xs: (fn(*xs) * weight).sum()


def primitive(name, fn, shapes, transform=None):
    """Register-ready check of ``fn`` over random inputs of ``shapes``"""

    def build(seed):
        rng = SeededRng(seed, f"gradcheck/{name}")
        params = {}
        for i, shape in enumerate(shapes):
            data = rng.normal(shape)
            if transform is not None:
                data = transform(i, data)
            params[f"x{i}"] = Tensor(data, requires_grad=True, name=f"x{i}")
        names = sorted(params)
        project = _projected(fn, [params[n] for n in names], rng)
        return (lambda p: project([p[n] for n in names])), params, None

    return GradCheck(name, "primitive", PRIMITIVE_TOLERANCE, build)


def _positive(i, data):
    return np.abs(data) + 0.5


def _distribution(i, data):
    e = np.exp(data)
    return e / e.sum(axis=-1, keepdims=True)


def _labels(rows, classes):
    return np.arange(rows) % classes


PRIMITIVES = [
    primitive("add", ad.add, [(3, 4), (4,)]),
    primitive("sub", ad.sub, [(3, 4), (3, 1)]),
    primitive("mul", ad.mul, [(3, 4), (3, 4)]),
    primitive("matmul", ad.matmul, [(2, 3, 4), (4, 5)]),
    primitive("sqrt", ad.sqrt, [(3, 4)], transform=_positive),
    primitive("sigmoid", ad.sigmoid, [(3, 4)]),
    primitive("gelu", ad.gelu, [(3, 4)]),
    primitive("layer_norm", ad.layer_norm, [(3, 6), (6,), (6,)]),
    primitive("reshape", lambda x: ad.reshape(x, (6, 2)), [(3, 4)]),
    primitive("transpose", lambda x: ad.transpose(x, (1, 0, 2)), [(2, 3, 4)]),
    primitive("broadcast_to", lambda x: ad.broadcast_to(x, (3, 2, 4)), [(1, 4)]),
    primitive("concat", lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    primitive("stack", lambda a, b: ad.stack([a, b], axis=0), [(2, 3), (2, 3)]),
    primitive("narrow", lambda x: ad.narrow(x, 1, 1, 3), [(2, 4)]),
    primitive("index_select", lambda x: ad.index_select(x, np.array([[0, 2], [2, 2]])), [(3, 4)]),
    primitive("take_along", lambda x: ad.take_along(x, np.array([[1, 0], [3, 3]])), [(2, 4)]),
    primitive("sum", lambda x: ad.sum_(x, axis=1), [(3, 4)]),
    primitive("mean", lambda x: ad.mean(x, axis=0, keepdims=True), [(3, 4)]),
    primitive("softmax", ad.softmax, [(3, 5)]),
    primitive("log_softmax", ad.log_softmax, [(3, 5)]),
    primitive("logsumexp", ad.logsumexp, [(3, 5)]),
    primitive("softmax_with_temperature", lambda x: ad.softmax_with_temperature(x, 2.0), [(3, 5)]),
    primitive("kl_divergence", ad.kl_divergence, [(3, 5), (3, 5)], transform=lambda i, d: _distribution(i, d) if i == 0 else d),
    primitive("cross_entropy", lambda x: ad.cross_entropy(x, _labels(4, 5)), [(4, 5)]),
    primitive("mse", ad.mse, [(3, 4), (3, 4)]),
    primitive("cosine_similarity", ad.cosine_similarity, [(3, 1, 4), (2, 4)]),
]


# ---------------------------------------------------------------- loss checks

def _loss_check(name, tolerance=LOSS_TOLERANCE, kind="loss"):
    def register(build):
        return GradCheck(name, kind, tolerance, build)
    return register


@_loss_check("l2p_key_loss")
def _check_key_loss(seed):
    rng = SeededRng(seed, "gradcheck/l2p_key_loss")
    query = rng.normal((3, 6))
    params = {"keys": _param(rng, "keys", (3, 2, 6))}
    return (lambda p: l2p_key_loss(query, p["keys"])), params, None


@_loss_check("coda_orthogonality")
def _check_orthogonality(seed):
    rng = SeededRng(seed, "gradcheck/coda_orthogonality")
    pool = build_pool(PoolConfig(method="coda", prompt_length=2, layers=(0, 1), components_per_task=2),
                      MINI_STUDENT, 2, rng.split("pool"))
    pool.begin_task(1)
    params = pool.trainable()

    def loss(p):
        pool.apply(p)
        return pool_orthogonality(pool)

    return loss, params, None


@_loss_check("kd_loss")
def _check_kd(seed):
    rng = SeededRng(seed, "gradcheck/kd_loss")
    teacher = rng.normal((4, 5))
    params = {"z": _param(rng, "z", (4, 5))}
    return (lambda p: kd_loss(p["z"], teacher, 2.0)), params, None


@_loss_check("dkd_loss")
def _check_dkd(seed):
    rng = SeededRng(seed, "gradcheck/dkd_loss")
    teacher = rng.normal((4, 5))
    target = _labels(4, 5)
    params = {"z": _param(rng, "z", (4, 5))}

    def loss(p):
        tckd, nckd = dkd_loss(p["z"], teacher, target, 2.0)
        return tckd + nckd

    return loss, params, None


@_loss_check("fitnets_loss")
def _check_fitnets(seed):
    rng = SeededRng(seed, "gradcheck/fitnets_loss")
    teacher = rng.normal((2, 3, 4))
    params = {"f": _param(rng, "f", (2, 3, 2)), "w": _param(rng, "w", (2, 4)), "b": _param(rng, "b", (4,))}
    return (lambda p: fitnets_loss(p["f"], teacher, FeatureMapping(p["w"], p["b"]))), params, None


@_loss_check("reviewkd_loss")
def _check_reviewkd(seed):
    rng = SeededRng(seed, "gradcheck/reviewkd_loss")
    teachers = [rng.normal((2, 3, 4)) for _ in range(3)]
    params = {}
    for j in (1, 2):
        params[f"f{j}"] = _param(rng, f"f{j}", (2, 3, 2))
        params[f"w{j}"] = _param(rng, f"w{j}", (2, 4))
        params[f"b{j}"] = _param(rng, f"b{j}", (4,))
    params["gate"] = _param(rng, "gate", ())

    def loss(p):
        mappings = [FeatureMapping(p["w1"], p["b1"]), FeatureMapping(p["w2"], p["b2"])]
        return reviewkd_loss([p["f1"], p["f2"]], teachers, mappings, [p["gate"]])

    return loss, params, None


# ---------------------------------------------------------------- composite

MINI_STUDENT = ViTConfig(image_size=8, channels=3, patch_size=4, embed_dim=8, heads=2, blocks=2, mlp_ratio=2, num_classes=4)
MINI_TEACHER = ViTConfig(image_size=8, channels=3, patch_size=4, embed_dim=12, heads=2, blocks=3, mlp_ratio=2, num_classes=4)


def mini_learners(seed, method="kdp", pool="coda", **distill_overrides):
    """Student and teacher snapshot on miniature backbones"""
    rng = SeededRng(seed, "gradcheck/mini")
    pool_config = {
        "coda": PoolConfig(method="coda", prompt_length=2, layers=(0, 1), components_per_task=2),
        "l2p": PoolConfig(method="l2p", size=4, top_k=2, prompt_length=2, layers=(0,)),
        "dualprompt": PoolConfig(method="dualprompt", prompt_length=2, layers=(1,), g_layers=(0,)),
    }[pool]
    distill = DistillConfig(method=method, kd_prompt_length=2, **distill_overrides).validate()
    student_bb = BackboneWeights.initialize(MINI_STUDENT, rng.split("student_bb")).freeze()
    teacher_bb = BackboneWeights.initialize(MINI_TEACHER, rng.split("teacher_bb")).freeze()
    teacher = ContinualLearner.build("teacher", teacher_bb, pool_config, 2, rng.split("teacher"))
    student = ContinualLearner.build("student", student_bb, pool_config, 2, rng.split("student"),
                                     distill=distill, teacher_config=MINI_TEACHER)
    snapshot = TeacherSnapshot.capture(teacher) if distill.needs_teacher else None
    return student, snapshot, distill


def _composite(method, pool="coda", tolerance=COMPOSITE_TOLERANCE):
    def build(seed):
        student, snapshot, distill = mini_learners(seed, method, pool)
        rng = SeededRng(seed, f"gradcheck/{method}/batch")
        images = rng.uniform((3, 3, 8, 8))
        labels = np.array([0, 1, 0])
        queries = student.queries(images)
        params = student.trainable()

        def loss(p):
            student.apply(p)
            total, _ = student_loss(student, images, labels, queries, 0, distill, (0, 1), (0, 1), snapshot)
            return total

        return loss, params, 3

    return GradCheck(f"student_loss/{pool}-{method}", "loss" if method == "none" else "composite", tolerance, build)


LOSSES = [
    _check_key_loss,
    _check_orthogonality,
    _check_kd,
    _check_dkd,
    _check_fitnets,
    _check_reviewkd,
    _composite("none", "l2p", LOSS_TOLERANCE),
    _composite("none", "dualprompt", LOSS_TOLERANCE),
    _composite("none", "coda", LOSS_TOLERANCE),
    _composite("kd", "coda"),
    _composite("dkd", "coda"),
    _composite("fitnets", "coda"),
    _composite("reviewkd", "coda"),
    _composite("deit", "coda"),
    _composite("kdp", "coda"),
    _composite("kdp", "dualprompt"),
]


def registered_checks():
    return PRIMITIVES + LOSSES


def run_gradcheck_suite(checks=None, seed=0, eps=1e-5):
    """Run every check; failures are reported, never raised"""
    entries = []
    for check in checks if checks is not None else registered_checks():
        entry = SuiteEntry(check.name, check.kind, check.tolerance)
        try:
            loss, params, max_coords = check.build(seed)
            entry.result = finite_difference_check(loss, params, eps=eps, max_coords=max_coords, seed=seed)
        except Exception as e:
            logger.error("gradcheck %s raised: %s", check.name, e, exc_info=True)
            entry.error = f"{type(e).__name__}: {e}"
        level = logging.INFO if entry.passed else logging.ERROR
        logger.log(level, "gradcheck %-28s %s", check.name, "ok" if entry.passed else "FAILED")
        entries.append(entry)
    return entries
