"""
Small vision transformer with prefix-tuning hooks
Holds the backbone weights, the CL/KD prefix plumbing, classifier heads and
the frozen-backbone audit
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from core.autodiff import (
    Tensor,
    add,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    matmul,
    narrow,
    no_tape,
    softmax,
)
from core.errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

# -inf surrogate for classes outside the training mask
MASK_VALUE = -1e9


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    heads: int = 4
    blocks: int = 4
    mlp_ratio: int = 2
    num_classes: int = 20

    @property
    def key_dim(self):
        return self.embed_dim

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_size * self.patch_size

    def validate(self):
        if self.blocks < 1:
            raise ConfigurationError(f"a ViT needs at least one block, got {self.blocks}")
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed dim {self.embed_dim} is not divisible by {self.heads} heads")
        if self.image_size % self.patch_size:
            raise ConfigurationError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if self.num_classes < 1:
            raise ConfigurationError("class capacity must be positive")
        return self

    def to_dict(self):
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "blocks": self.blocks,
            "mlp_ratio": self.mlp_ratio,
            "num_classes": self.num_classes,
        }


STUDENT_CONFIG = ViTConfig(embed_dim=32, heads=4, blocks=4)
TEACHER_CONFIG = ViTConfig(embed_dim=64, heads=4, blocks=6)


def _block_names(j):
    pre = f"block{j}/"
    return [pre + s for s in (
        "ln1/g", "ln1/b",
        "attn/wq", "attn/bq", "attn/wk", "attn/bk", "attn/wv", "attn/bv", "attn/wo", "attn/bo",
        "ln2/g", "ln2/b",
        "mlp/w1", "mlp/b1", "mlp/w2", "mlp/b2",
    )]


@dataclass
class BackboneWeights:
    """Named backbone arrays; frozen weights carry requires_grad=False everywhere"""

    config: ViTConfig
    params: dict
    frozen: bool = True

    @classmethod
    def initialize(cls, config, rng):
        config.validate()
        d, hidden = config.embed_dim, config.embed_dim * config.mlp_ratio
        arrays = {
            "patch_embed/w": rng.normal((config.patch_dim, d), 1.0 / np.sqrt(config.patch_dim)),
            "patch_embed/b": np.zeros(d),
            "cls_token": rng.normal((d,), 0.02),
            "pos_embed": rng.normal((config.num_patches + 1, d), 0.02),
        }
        for j in range(config.blocks):
            pre = f"block{j}/"
            block_rng = rng.split(f"block{j}")
            arrays[pre + "ln1/g"] = np.ones(d)
            arrays[pre + "ln1/b"] = np.zeros(d)
            for proj in ("q", "k", "v", "o"):
                arrays[pre + f"attn/w{proj}"] = block_rng.normal((d, d), 1.0 / np.sqrt(d))
                arrays[pre + f"attn/b{proj}"] = np.zeros(d)
            arrays[pre + "ln2/g"] = np.ones(d)
            arrays[pre + "ln2/b"] = np.zeros(d)
            arrays[pre + "mlp/w1"] = block_rng.normal((d, hidden), 1.0 / np.sqrt(d))
            arrays[pre + "mlp/b1"] = np.zeros(hidden)
            arrays[pre + "mlp/w2"] = block_rng.normal((hidden, d), 1.0 / np.sqrt(hidden))
            arrays[pre + "mlp/b2"] = np.zeros(d)
        arrays["norm/g"] = np.ones(d)
        arrays["norm/b"] = np.zeros(d)
        return cls.from_arrays(config, arrays, frozen=False)

    @classmethod
    def from_arrays(cls, config, arrays, frozen=True):
        params = {name: Tensor(arr, requires_grad=not frozen, name=name) for name, arr in arrays.items()}
        return cls(config, params, frozen)

    def arrays(self):
        return {name: t.data for name, t in self.params.items()}

    def last_block_names(self):
        return set(_block_names(self.config.blocks - 1))

    def freeze(self):
        return BackboneWeights.from_arrays(self.config, self.arrays(), frozen=True)

    def with_trainable(self, names):
        """Frozen copy except for ``names`` (the unfreeze-last-block ablation)"""
        names = set(names)
        params = {
            name: Tensor._wrap(t.data, requires_grad=name in names, name=name)
            for name, t in self.params.items()
        }
        return BackboneWeights(self.config, params, frozen=not names)

    def trainable(self):
        return {name: t for name, t in self.params.items() if t.requires_grad}

    def updated(self, new_params):
        params = dict(self.params)
        params.update(new_params)
        return replace(self, params=params)

    def checksum(self):
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return digest.hexdigest()


@dataclass
class PrefixSet:
    """Per-layer prefix pairs (P_K, P_V); layers are 0-based block indices"""

    cl: dict = field(default_factory=dict)
    kd: dict = field(default_factory=dict)

    @staticmethod
    def split(prompt):
        """Split a [..., L_p, D] prompt into key/value halves"""
        length = prompt.shape[-2]
        if length % 2:
            raise ContractViolation(f"prompt length must be even to split into key/value halves, got {length}")
        half = length // 2
        return narrow(prompt, -2, 0, half), narrow(prompt, -2, half, length)


@dataclass
class ClassifierHead:
    weight: Tensor
    bias: Tensor
    role: str = "student"

    @classmethod
    def initialize(cls, dim, classes, rng, role="student", prefix="head"):
        return cls(
            Tensor(rng.normal((dim, classes), 1.0 / np.sqrt(dim)), requires_grad=True, name=f"{prefix}/w"),
            Tensor(np.zeros(classes), requires_grad=True, name=f"{prefix}/b"),
            role,
        )

    @property
    def num_classes(self):
        return self.weight.shape[1]


@dataclass
class ForwardOutput:
    cls_embedding: Tensor
    kd_embedding: Tensor = None
    features: list = None


def class_mask(num_classes, active):
    """Additive logit mask: 0 for active classes, MASK_VALUE elsewhere"""
    active = list(active)
    if not active:
        raise ContractViolation("training-time class mask is empty")
    mask = np.full(num_classes, MASK_VALUE)
    mask[active] = 0.0
    return mask


def classify(embedding, head, mask=None):
    """Affine head; ``mask`` is an iterable of active classes (None for full logits)"""
    if embedding.shape[-1] != head.weight.shape[0]:
        raise ContractViolation(f"embedding dim {embedding.shape[-1]} does not match head input {head.weight.shape[0]}")
    logits = add(matmul(embedding, head.weight), head.bias)
    if mask is not None:
        logits = add(logits, class_mask(head.num_classes, mask))
    return logits


class VisionTransformer:
    def __init__(self, weights):
        self.weights = weights
        self.config = weights.config

    @property
    def p(self):
        return self.weights.params

    def patchify(self, images):
        images = np.asarray(images, dtype=np.float64)
        cfg = self.config
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ContractViolation(f"images must be [B, {', '.join(map(str, expected))}], got {images.shape}")
        b, c, size, patch = images.shape[0], cfg.channels, cfg.image_size, cfg.patch_size
        g = size // patch
        x = images.reshape(b, c, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, g * g, c * patch * patch)

    def patch_embed(self, images):
        """[B, C, H, W] -> [B, N + 1, D] with the class token first and positions added"""
        patches = Tensor._wrap(self.patchify(images))
        tokens = add(matmul(patches, self.p["patch_embed/w"]), self.p["patch_embed/b"])
        b, d = patches.shape[0], self.config.embed_dim
        cls = broadcast_to(self.p["cls_token"].reshape(1, 1, d), (b, 1, d))
        return add(concat([cls, tokens], axis=1), self.p["pos_embed"])

    def attention_with_prefix(self, h, prefix, layer, return_weights=False):
        """MSA(h_Q, [P^cl_K; h_K; P^kd_K], [P^cl_V; h_V; P^kd_V]) for block ``layer``

        ``h`` is the normalized token sequence; the output keeps its length.
        """
        cfg = self.config
        if not 0 <= layer < cfg.blocks:
            raise ContractViolation(f"layer {layer} outside [0, {cfg.blocks})")
        pre = f"block{layer}/attn/"
        b, length, d = h.shape
        heads, dh = cfg.heads, d // cfg.heads

        q = add(matmul(h, self.p[pre + "wq"]), self.p[pre + "bq"])
        k = add(matmul(h, self.p[pre + "wk"]), self.p[pre + "bk"])
        v = add(matmul(h, self.p[pre + "wv"]), self.p[pre + "bv"])

        keys, values = [k], [v]
        prefix = prefix or PrefixSet()
        for pair, front in ((prefix.cl.get(layer), True), (prefix.kd.get(layer), False)):
            if pair is None:
                continue
            pk, pv = (self._batched(t, b, d) for t in pair)
            if pk.shape[1] == 0:
                continue
            if front:
                keys.insert(0, pk)
                values.insert(0, pv)
            else:
                keys.append(pk)
                values.append(pv)
        k = concat(keys, axis=1) if len(keys) > 1 else k
        v = concat(values, axis=1) if len(values) > 1 else v
        span = k.shape[1]

        qh = q.reshape(b, length, heads, dh).transpose(0, 2, 1, 3)
        kt = k.reshape(b, span, heads, dh).transpose(0, 2, 3, 1)
        vh = v.reshape(b, span, heads, dh).transpose(0, 2, 1, 3)
        weights = softmax(matmul(qh, kt) * (1.0 / np.sqrt(dh)), axis=-1)
        out = matmul(weights, vh).transpose(0, 2, 1, 3).reshape(b, length, d)
        out = add(matmul(out, self.p[pre + "wo"]), self.p[pre + "bo"])
        if return_weights:
            return out, weights
        return out

    def _batched(self, t, b, d):
        if t.shape[-1] != d:
            raise ContractViolation(f"prefix embed dim {t.shape[-1]} does not match backbone dim {d}")
        if t.ndim == 2:
            return broadcast_to(t.reshape(1, t.shape[0], d), (b, t.shape[0], d))
        return t

    def block(self, h, layer, prefix=None):
        pre = f"block{layer}/"
        a = layer_norm(h, self.p[pre + "ln1/g"], self.p[pre + "ln1/b"])
        h = h + self.attention_with_prefix(a, prefix, layer)
        m = layer_norm(h, self.p[pre + "ln2/g"], self.p[pre + "ln2/b"])
        m = gelu(add(matmul(m, self.p[pre + "mlp/w1"]), self.p[pre + "mlp/b1"]))
        m = add(matmul(m, self.p[pre + "mlp/w2"]), self.p[pre + "mlp/b2"])
        return h + m

    def forward_features(self, images, prefix=None, use_kd_token=False, kd_token=None, collect_features=False):
        """Run all blocks; the KD token joins the sequence after block 0"""
        if use_kd_token and kd_token is None:
            raise ConfigurationError("KD token requested but the model has no KD head/token configured")
        h = self.patch_embed(images)
        b, seq, d = h.shape
        features = [] if collect_features else None
        for j in range(self.config.blocks):
            h = self.block(h, j, prefix)
            if j == 0 and use_kd_token:
                h = concat([h, broadcast_to(kd_token.reshape(1, 1, d), (b, 1, d))], axis=1)
            if collect_features:
                features.append(narrow(h, 1, 0, seq) if use_kd_token else h)
        out = layer_norm(h, self.p["norm/g"], self.p["norm/b"])
        cls = narrow(out, 1, 0, 1).reshape(b, d)
        kd = narrow(out, 1, seq, seq + 1).reshape(b, d) if use_kd_token else None
        return ForwardOutput(cls, kd, features)

    def query_encode(self, images):
        """q(x): class embedding of a promptless pass through the frozen backbone"""
        if not self.weights.frozen:
            raise ContractViolation("query_encode needs a frozen backbone")
        with no_tape():
            return self.forward_features(images).cls_embedding.data


@dataclass
class FrozenAudit:
    passed: bool
    first_difference: str = None
    differing: tuple = ()


def assert_frozen(before, after, allow_last_block=False):
    """Compare two backbone snapshots array by array

    With ``allow_last_block`` only arrays of the final block may differ.
    """
    if set(before.params) != set(after.params):
        raise ContractViolation("backbone snapshots have different array names")
    differing = []
    for name in sorted(before.params):
        a, b = before.params[name].data, after.params[name].data
        if a.shape != b.shape:
            raise ContractViolation(f"array {name} changed shape {a.shape} -> {b.shape}")
        if a.tobytes() != b.tobytes():
            differing.append(name)
    allowed = before.last_block_names() if allow_last_block else set()
    offending = [name for name in differing if name not in allowed]
    first = offending[0] if offending else (differing[0] if differing else None)
    return FrozenAudit(passed=not offending, first_difference=first, differing=tuple(differing))
