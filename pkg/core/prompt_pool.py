"""
Prompt pools for prompt-based continual learning
L2P top-K key matching, DualPrompt G/E prompts and CODA-Prompt attended
composition, together with their pool losses
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from core.autodiff import (
    Tensor,
    concat,
    cosine_similarity,
    index_select,
    matmul,
    mul,
    narrow,
    no_tape,
    sqrt,
    stack,
)
from core.errors import ConfigurationError, ContractViolation
from core.vit import PrefixSet

logger = logging.getLogger(__name__)

METHODS = ("l2p", "dualprompt", "coda")

# depth of the full-scale backbone the full-scale presets are written for
REFERENCE_DEPTH = 12


@dataclass(frozen=True)
class PoolConfig:
    method: str = "coda"
    size: int = 0               # M; 0 means "derive from the task count"
    top_k: int = 2
    prompt_length: int = 8
    layers: tuple = ()          # empty means "derive from the preset"
    g_layers: tuple = ()
    components_per_task: int = 4

    def to_dict(self):
        return {
            "method": self.method,
            "size": self.size,
            "top_k": self.top_k,
            "prompt_length": self.prompt_length,
            "layers": list(self.layers),
            "g_layers": list(self.g_layers),
            "components_per_task": self.components_per_task,
        }


# desk-scale defaults
POOL_PRESETS = {
    "l2p": PoolConfig(method="l2p", size=10, top_k=2, prompt_length=20, layers=(0,)),
    "dualprompt": PoolConfig(method="dualprompt", prompt_length=20, layers=(2, 3, 4), g_layers=(0, 1)),
    "coda": PoolConfig(method="coda", prompt_length=8, layers=(0, 1, 2, 3, 4), components_per_task=4),
}

# full-scale values
FULL_SCALE_POOL_PRESETS = {
    "l2p": PoolConfig(method="l2p", size=30, top_k=5, prompt_length=20, layers=(0,)),
    "dualprompt": PoolConfig(method="dualprompt", size=10, prompt_length=20, layers=(2, 3, 4), g_layers=(0, 1)),
    "coda": PoolConfig(method="coda", size=100, prompt_length=8, layers=(0, 1, 2, 3, 4)),
}


def scale_layers(layers, blocks, reference=REFERENCE_DEPTH):
    """Map block indices written for a ``reference``-deep model onto ``blocks`` blocks"""
    if not layers:
        return ()
    if blocks >= reference:
        return tuple(layers)
    start = min(math.ceil(min(layers) * blocks / reference), blocks - 1)
    stop = min(max(math.ceil((max(layers) + 1) * blocks / reference), start + 1), blocks)
    return tuple(range(start, stop))


@dataclass
class PromptComponent:
    key: Tensor
    prompt: Tensor              # [len(layers), L_p, D]
    attention: Tensor = None
    owner_task: int = 0

    def tensors(self):
        out = {"key": self.key, "prompt": self.prompt}
        if self.attention is not None:
            out["attention"] = self.attention
        return out


@dataclass
class Selection:
    method: str
    prefix: PrefixSet
    indices: np.ndarray = None
    alpha: Tensor = None
    scores: np.ndarray = None
    keys: Tensor = None


def _rows_like(tensor, trainable):
    return Tensor._wrap(tensor.data, requires_grad=trainable, name=tensor.name)


@dataclass
class PromptPool:
    method: str
    components: list
    layers: tuple
    prompt_length: int
    embed_dim: int
    key_dim: int
    top_k: int = 1
    num_tasks: int = 1
    g_prompt: Tensor = None
    g_layers: tuple = ()
    current_task: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def size(self):
        return len(self.components)

    @property
    def per_task(self):
        return self.size // self.num_tasks

    @property
    def active_count(self):
        """Components visible to the current task (CODA grows by one partition per task)"""
        if self.method == "coda":
            return self.per_task * (self.current_task + 1)
        return self.size

    def partition(self, task):
        return range(task * self.per_task, (task + 1) * self.per_task)

    def begin_task(self, task):
        """Set the trainable partition for ``task``"""
        if not 0 <= task < self.num_tasks:
            raise ContractViolation(f"task {task} outside [0, {self.num_tasks})")
        self.current_task = task
        if self.method != "coda":
            return
        current = set(self.partition(task))
        for i, comp in enumerate(self.components):
            trainable = i in current
            comp.key = _rows_like(comp.key, trainable)
            comp.prompt = _rows_like(comp.prompt, trainable)
            comp.attention = _rows_like(comp.attention, trainable)

    def parameters(self):
        params = {}
        for i, comp in enumerate(self.components):
            for kind, tensor in comp.tensors().items():
                params[f"pool/comp{i}/{kind}"] = tensor
        if self.g_prompt is not None:
            params["pool/g/prompt"] = self.g_prompt
        return params

    def trainable(self):
        return {name: t for name, t in self.parameters().items() if t.requires_grad}

    def apply(self, updates):
        for name, tensor in updates.items():
            if not name.startswith("pool/"):
                continue
            parts = name.split("/")
            if parts[1] == "g":
                self.g_prompt = tensor
            else:
                setattr(self.components[int(parts[1][4:])], parts[2], tensor)

    def arrays(self):
        """Pool state keyed by its ``pool/`` parameter names, as stored in CDLW files"""
        return {name: np.array(t.data, copy=True) for name, t in self.parameters().items()}

    def load_arrays(self, arrays):
        """Restore state written by ``arrays``; entries outside ``pool/`` are ignored"""
        current = self.parameters()
        stored = {name: np.asarray(a, dtype=np.float64) for name, a in arrays.items() if name.startswith("pool/")}
        mismatched = sorted(
            name for name in set(current) | set(stored)
            if name not in current or name not in stored or current[name].shape != stored[name].shape
        )
        if mismatched:
            raise ConfigurationError(
                f"stored pool state does not match this {self.method} pool ({mismatched[0]} "
                f"and {len(mismatched) - 1} more)"
            )
        self.apply({
            name: Tensor(stored[name], requires_grad=t.requires_grad, name=t.name)
            for name, t in current.items()
        })

    def frozen_copy(self):
        comps = [
            PromptComponent(
                _rows_like(c.key, False),
                _rows_like(c.prompt, False),
                None if c.attention is None else _rows_like(c.attention, False),
                c.owner_task,
            )
            for c in self.components
        ]
        g = None if self.g_prompt is None else _rows_like(self.g_prompt, False)
        return PromptPool(self.method, comps, self.layers, self.prompt_length, self.embed_dim, self.key_dim,
                          self.top_k, self.num_tasks, g, self.g_layers, self.current_task, dict(self.extras))

    def stacked(self, kind, count=None):
        comps = self.components[: count if count is not None else self.size]
        tensors = [getattr(c, kind) for c in comps]
        shapes = {t.shape for t in tensors}
        if len(shapes) != 1:
            raise ContractViolation(f"pool {kind} shapes drifted: {sorted(shapes)}")
        return stack(tensors, axis=0)


def build_pool(config, vit_config, num_tasks, rng, extra_length=0):
    """Create a pool for a model with ``vit_config``; ``extra_length`` widens every CL prompt"""
    method = config.method
    if method not in METHODS:
        raise ConfigurationError(f"unknown pool method '{method}', expected one of {METHODS}")
    d, dk, blocks = vit_config.embed_dim, vit_config.key_dim, vit_config.blocks
    length = config.prompt_length + extra_length
    if length % 2:
        raise ConfigurationError(f"prompt length must be even, got {length}")

    if method == "l2p":
        size = config.size or 10
        if not 1 <= config.top_k <= size:
            raise ConfigurationError(f"L2P needs 1 <= K <= M, got K={config.top_k}, M={size}")
        layers = tuple(l for l in (config.layers or (0,)) if l < blocks) or (0,)
    elif method == "dualprompt":
        size = num_tasks
        layers = scale_layers(config.layers or (2, 3, 4), blocks)
    else:
        size = config.size or config.components_per_task * num_tasks
        if size % num_tasks:
            raise ConfigurationError(f"CODA pool of {size} components cannot be split across {num_tasks} tasks")
        layers = tuple(range(min(5, blocks))) if not config.layers else tuple(l for l in config.layers if l < blocks)

    scale = 1.0 / math.sqrt(dk)
    components = []
    for i in range(size):
        crng = rng.split(f"comp{i}")
        key = Tensor(crng.uniform((dk,), -1.0, 1.0) * scale, requires_grad=True, name=f"pool/comp{i}/key")
        prompt = Tensor(crng.normal((len(layers), length, d), 0.02), requires_grad=True, name=f"pool/comp{i}/prompt")
        attention = None
        if method == "coda":
            attention = Tensor(crng.uniform((dk,), -1.0, 1.0) * scale, requires_grad=True,
                               name=f"pool/comp{i}/attention")
        owner = i if method == "dualprompt" else (i * num_tasks // size if method == "coda" else 0)
        components.append(PromptComponent(key, prompt, attention, owner))

    g_prompt, g_layers = None, ()
    if method == "dualprompt":
        g_layers = scale_layers(config.g_layers or (0, 1), blocks)
        g_prompt = Tensor(rng.split("g").normal((len(g_layers), length, d), 0.02), requires_grad=True,
                          name="pool/g/prompt")

    pool = PromptPool(method, components, layers, length, d, dk, config.top_k, num_tasks, g_prompt, g_layers)
    pool.begin_task(0)
    logger.debug("built %s pool: M=%d, L_p=%d, layers=%s, g_layers=%s", method, size, length, layers, g_layers)
    return pool


# ---------------------------------------------------------------- selection helpers

def _as_batch(query):
    q = np.asarray(query, dtype=np.float64)
    return q[None, :] if q.ndim == 1 else q


def _similarities(query, keys):
    with no_tape():
        return cosine_similarity(Tensor._wrap(query[:, None, :]), keys.detach()).data


def _add_prompt_layers(prefix, layers, prompts, layer_axis):
    """Split [.., layers, L_p, D] prompts per layer into key/value prefixes"""
    for pos, layer in enumerate(layers):
        prompt = narrow(prompts, layer_axis, pos, pos + 1)
        shape = prompt.shape[:layer_axis] + prompt.shape[layer_axis + 1:]
        pk, pv = PrefixSet.split(prompt.reshape(shape))
        if pk.ndim > 3:
            b = pk.shape[0]
            pk = pk.reshape(b, -1, pk.shape[-1])
            pv = pv.reshape(b, -1, pv.shape[-1])
        if layer in prefix.cl:
            old_k, old_v = prefix.cl[layer]
            pk, pv = _join(old_k, pk), _join(old_v, pv)
        prefix.cl[layer] = (pk, pv)
    return prefix


def _join(a, b):
    if a.ndim == 2 and b.ndim == 3:
        a = a.reshape(1, *a.shape) * np.ones((b.shape[0], 1, 1))
    elif b.ndim == 2 and a.ndim == 3:
        b = b.reshape(1, *b.shape) * np.ones((a.shape[0], 1, 1))
    return concat([a, b], axis=-2)


# ---------------------------------------------------------------- L2P

def l2p_select(query, pool, k=None):
    """Per-sample top-K components by cosine similarity; ties go to the lower index"""
    if pool.method != "l2p":
        raise ContractViolation(f"l2p_select called on a {pool.method} pool")
    k = pool.top_k if k is None else k
    if not 1 <= k <= pool.size:
        raise ContractViolation(f"top-K of {k} from a pool of {pool.size}")
    q = _as_batch(query)
    keys = pool.stacked("key")
    scores = _similarities(q, keys)
    indices = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    prompts = index_select(pool.stacked("prompt"), indices)        # [B, K, layers, L_p, D]
    prefix = _add_prompt_layers(PrefixSet(), pool.layers, prompts, layer_axis=2)
    return Selection("l2p", prefix, indices=indices, scores=scores, keys=index_select(keys, indices))


def l2p_key_loss(query, selected_keys):
    """Batch mean of sum_k (1 - cos(q(x), k)) over the selected keys"""
    q = _as_batch(query)
    keys = selected_keys
    if keys.ndim == 2:
        keys = keys.reshape(1, *keys.shape)
    if keys.shape[1] == 0:
        raise ContractViolation("key loss over an empty selection")
    cos = cosine_similarity(Tensor._wrap(q[:, None, :]), keys)
    return (1.0 - cos).sum(axis=1).mean()


# ---------------------------------------------------------------- DualPrompt

def dualprompt_compose(query, pool, task_id=None):
    """G prompt for every input; E prompt by task id (training) or nearest key (testing)"""
    if pool.method != "dualprompt":
        raise ContractViolation(f"dualprompt_compose called on a {pool.method} pool")
    q = _as_batch(query)
    b = q.shape[0]
    keys = pool.stacked("key")
    scores = _similarities(q, keys)
    if task_id is not None:
        if not 0 <= task_id < pool.size:
            raise ContractViolation(f"unknown task id {task_id} for a pool of {pool.size} E-prompts")
        indices = np.full(b, task_id, dtype=np.intp)
    else:
        seen = pool.current_task + 1
        indices = np.argmax(scores[:, :seen], axis=1)

    prefix = PrefixSet()
    if pool.g_prompt is not None:
        _add_prompt_layers(prefix, pool.g_layers, pool.g_prompt, layer_axis=0)
    prompts = index_select(pool.stacked("prompt"), indices)         # [B, layers, L_p, D]
    _add_prompt_layers(prefix, pool.layers, prompts, layer_axis=1)
    chosen = index_select(keys, indices[:, None])                   # [B, 1, D_k]
    return Selection("dualprompt", prefix, indices=indices, scores=scores, keys=chosen)


# ---------------------------------------------------------------- CODA-Prompt

def coda_weights(query, pool):
    """alpha_i = cos(q(x) * A_i, k_i) over every partition opened so far

    Partitions of earlier tasks are frozen but still weigh in. Partitions
    of tasks not yet started are unallocated and get alpha 0, so a
    learner never draws on components it has not trained.
    """
    if pool.method != "coda":
        raise ContractViolation(f"coda_weights called on a {pool.method} pool")
    if any(c.attention is None for c in pool.components):
        raise ContractViolation("every CODA component needs an attention vector")
    q = _as_batch(query)
    active = pool.active_count
    attention = pool.stacked("attention", active)
    keys = pool.stacked("key", active)
    masked = mul(Tensor._wrap(q[:, None, :]), attention)           # [B, m, D_k]
    alpha = cosine_similarity(masked, keys)                          # [B, m]
    if active < pool.size:
        alpha = concat([alpha, Tensor._wrap(np.zeros((q.shape[0], pool.size - active)))], axis=1)
    return alpha


def coda_compose(alpha, pool):
    """P_x = sum_i alpha_i P_i, returned as [B, layers, L_p, D]"""
    if alpha.ndim == 1:
        alpha = alpha.reshape(1, alpha.shape[0])
    if alpha.shape[-1] != pool.size:
        raise ContractViolation(f"alpha has {alpha.shape[-1]} weights for a pool of {pool.size}")
    prompts = pool.stacked("prompt")
    flat = prompts.reshape(pool.size, -1)
    composed = matmul(alpha, flat)
    return composed.reshape(alpha.shape[0], *prompts.shape[1:])


def coda_select(query, pool):
    alpha = coda_weights(query, pool)
    prefix = _add_prompt_layers(PrefixSet(), pool.layers, coda_compose(alpha, pool), layer_axis=1)
    return Selection("coda", prefix, alpha=alpha)


# ---------------------------------------------------------------- losses

def orthogonality_loss(matrix):
    """Frobenius norm of B B^T - I"""
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ContractViolation(f"orthogonality penalty needs a matrix with rows, got shape {matrix.shape}")
    gram = matmul(matrix, matrix.transpose(1, 0))
    diff = gram - np.eye(matrix.shape[0])
    return sqrt((diff * diff).sum())


def pool_orthogonality(pool):
    """L_or(P) + L_or(K) + L_or(A) over the components visible to the current task"""
    active = pool.active_count
    prompts = pool.stacked("prompt", active)                         # [m, layers, L_p, D]
    total = None
    for pos in range(len(pool.layers)):
        layer_rows = narrow(prompts, 1, pos, pos + 1).reshape(active, -1)
        term = orthogonality_loss(layer_rows)
        total = term if total is None else total + term
    total = total + orthogonality_loss(pool.stacked("key", active))
    return total + orthogonality_loss(pool.stacked("attention", active))


def select(pool, query, task_id=None, train=True):
    """Dispatch to the pool's selection rule"""
    if pool.method == "l2p":
        return l2p_select(query, pool)
    if pool.method == "dualprompt":
        return dualprompt_compose(query, pool, task_id if train else None)
    return coda_select(query, pool)


def pool_loss(method, query, selection, pool, lam):
    """L_pool: lambda * key loss (L2P / DualPrompt) or lambda * orthogonality (CODA)"""
    if method != pool.method or selection.method != method:
        raise ContractViolation(f"pool loss for '{method}' on a {pool.method} pool with a {selection.method} selection")
    if method == "coda":
        loss = pool_orthogonality(pool)
    else:
        loss = l2p_key_loss(query, selection.keys)
    return loss * float(lam)
