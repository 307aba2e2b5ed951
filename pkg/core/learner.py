"""
Prompt-based continual learner
Composes the ViT, its frozen query encoder, the prompt pool, the classifier
heads and the distillation extras (KD token, KD prompts, feature mappings)
"""

import hashlib
import logging

import numpy as np

from core.autodiff import Tensor, no_tape
from core.distillation import DistillConfig, FeatureMapping, combine_heads_predict
from core.errors import ConfigurationError, ContractViolation
from core.prompt_pool import build_pool, select
from core.vit import ClassifierHead, PrefixSet, VisionTransformer, classify

logger = logging.getLogger(__name__)

ROLES = ("student", "teacher")


def _frozen(tensor):
    return None if tensor is None else Tensor._wrap(tensor.data, requires_grad=False, name=tensor.name)


class ContinualLearner:
    def __init__(self, role, backbone, query_backbone, pool, head, distill=None,
                 kd_head=None, kd_token=None, kd_prompts=None, mappings=None):
        if role not in ROLES:
            raise ContractViolation(f"unknown learner role '{role}'")
        if not query_backbone.frozen:
            raise ContractViolation("the query encoder must be frozen")
        self.role = role
        self.vit = VisionTransformer(backbone)
        self.query_vit = VisionTransformer(query_backbone)
        self.pool = pool
        self.head = head
        self.distill = distill or DistillConfig()
        self.kd_head = kd_head
        self.kd_token = kd_token
        self.kd_prompts = dict(kd_prompts or {})
        self.mappings = dict(mappings or {})
        self._query_cache = {}

    @classmethod
    def build(cls, role, pretrained, pool_config, num_tasks, rng, distill=None,
              unfreeze_last_block=False, teacher_config=None):
        """Fresh learner on top of a pretrained backbone

        The query encoder always uses the pretrained weights as they were
        handed in; only the ablation copy of the backbone may train.
        """
        distill = (distill or DistillConfig()).validate()
        config = pretrained.config
        d = config.embed_dim
        query_backbone = pretrained.freeze()
        if unfreeze_last_block:
            backbone = pretrained.with_trainable(pretrained.last_block_names())
        else:
            backbone = query_backbone

        extra = distill.extra_pool_length if role == "student" else 0
        pool = build_pool(pool_config, config, num_tasks, rng.split("pool"), extra_length=extra)
        head = ClassifierHead.initialize(d, config.num_classes, rng.split("head"), role=role)

        kd_head = kd_token = None
        kd_prompts, mappings = {}, {}
        if role == "student":
            if distill.uses_kd_token:
                kd_head = ClassifierHead.initialize(d, config.num_classes, rng.split("kd_head"),
                                                    role="kd", prefix="kd_head")
                cls_token = pretrained.params["cls_token"].data
                kd_token = Tensor(cls_token + rng.split("kd_token").normal(cls_token.shape, 0.02),
                                  requires_grad=True, name="kd/token")
            prompt_rng = rng.split("kd_prompt")
            for j in range(distill.kd_depth(config.blocks)):
                kd_prompts[j] = Tensor(prompt_rng.normal((distill.kd_prompt_length, d), 0.02),
                                       requires_grad=True, name=f"kd/prompt{j}")
            if distill.method in ("fitnets", "reviewkd"):
                if teacher_config is None:
                    raise ContractViolation(f"{distill.method} needs the teacher's ViT config to size its mappings")
                n = config.blocks
                blocks = [n] if distill.method == "fitnets" else range(1, n + 1)
                map_rng = rng.split("mappings")
                for j in blocks:
                    mappings[j] = FeatureMapping.initialize(d, teacher_config.embed_dim, map_rng.split(str(j)),
                                                            f"map/{j}", with_gate=distill.method == "reviewkd" and j < n)
        learner = cls(role, backbone, query_backbone, pool, head, distill, kd_head, kd_token, kd_prompts, mappings)
        logger.debug("built %s learner: D=%d, blocks=%d, pool=%s, distill=%s, %d trainable tensors",
                     role, d, config.blocks, pool.method, distill.method, len(learner.trainable()))
        return learner

    # ------------------------------------------------------------ parameters

    @property
    def gates(self):
        n = self.vit.config.blocks
        return [self.mappings[j].gate for j in range(1, n) if j in self.mappings]

    def parameters(self):
        params = {f"backbone/{name}": t for name, t in self.vit.weights.params.items()}
        params.update(self.pool.parameters())
        params["head/w"], params["head/b"] = self.head.weight, self.head.bias
        if self.kd_head is not None:
            params["kd_head/w"], params["kd_head/b"] = self.kd_head.weight, self.kd_head.bias
        if self.kd_token is not None:
            params["kd/token"] = self.kd_token
        for j, prompt in self.kd_prompts.items():
            params[f"kd/prompt{j}"] = prompt
        for j, mapping in self.mappings.items():
            params[f"map/{j}/w"], params[f"map/{j}/b"] = mapping.weight, mapping.bias
            if mapping.gate is not None:
                params[f"map/{j}/gate"] = mapping.gate
        return params

    def trainable(self):
        return {name: t for name, t in self.parameters().items() if t.requires_grad}

    def apply(self, updates):
        """Swap in updated tensors, routed by name prefix"""
        backbone = {}
        for name, tensor in updates.items():
            group, _, rest = name.partition("/")
            if group == "backbone":
                backbone[rest] = tensor
            elif group == "pool":
                self.pool.apply({name: tensor})
            elif group in ("head", "kd_head"):
                head = self.head if group == "head" else self.kd_head
                setattr(head, "weight" if rest == "w" else "bias", tensor)
            elif name == "kd/token":
                self.kd_token = tensor
            elif group == "kd" and rest.startswith("prompt"):
                self.kd_prompts[int(rest[len("prompt"):])] = tensor
            elif group == "map":
                j, attr = rest.split("/")
                attr = {"w": "weight", "b": "bias"}.get(attr, attr)
                setattr(self.mappings[int(j)], attr, tensor)
            else:
                raise ContractViolation(f"no parameter named '{name}'")
        if backbone:
            self.vit = VisionTransformer(self.vit.weights.updated(backbone))

    def _persisted(self):
        backbone = self.vit.weights.trainable()
        return {
            name: t for name, t in self.parameters().items()
            if not name.startswith("backbone/") or name[len("backbone/"):] in backbone
        }

    def arrays(self):
        """Learned state for a CDLW file: pool (under ``pool/``), heads, KD extras
        and any backbone tensors the ablation unfroze"""
        return {name: np.array(t.data, copy=True) for name, t in self._persisted().items()}

    def load_arrays(self, arrays):
        current = self._persisted()
        mismatched = sorted(
            name for name in set(current) | set(arrays)
            if name not in current or name not in arrays or current[name].shape != np.shape(arrays[name])
        )
        if mismatched:
            raise ConfigurationError(
                f"stored {self.role} state does not match this learner ({mismatched[0]} "
                f"and {len(mismatched) - 1} more)"
            )
        self.pool.load_arrays(arrays)
        self.apply({
            name: Tensor(arrays[name], requires_grad=t.requires_grad, name=t.name)
            for name, t in current.items() if not name.startswith("pool/")
        })

    def begin_task(self, task):
        self.pool.begin_task(task)

    def frozen_copy(self):
        """Deep, fully frozen snapshot that shares the query cache contents"""
        weights = self.vit.weights.freeze()
        head = ClassifierHead(_frozen(self.head.weight), _frozen(self.head.bias), self.head.role)
        kd_head = None
        if self.kd_head is not None:
            kd_head = ClassifierHead(_frozen(self.kd_head.weight), _frozen(self.kd_head.bias), self.kd_head.role)
        mappings = {
            j: FeatureMapping(_frozen(m.weight), _frozen(m.bias), _frozen(m.gate))
            for j, m in self.mappings.items()
        }
        copy = ContinualLearner(self.role, weights, self.query_vit.weights, self.pool.frozen_copy(), head,
                                self.distill, kd_head, _frozen(self.kd_token),
                                {j: _frozen(p) for j, p in self.kd_prompts.items()}, mappings)
        copy._query_cache = dict(self._query_cache)
        return copy

    def checksum(self):
        digest = hashlib.sha256()
        for name, tensor in sorted(self.parameters().items()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()

    def backbone_checksum(self):
        return self.vit.weights.checksum()

    # ------------------------------------------------------------ forward

    def queries(self, images, sample_ids=None):
        """q(x) from the frozen query encoder, cached per sample id"""
        if sample_ids is None:
            return self.query_vit.query_encode(images)
        ids = [int(i) for i in sample_ids]
        missing = [pos for pos, i in enumerate(ids) if i not in self._query_cache]
        if missing:
            encoded = self.query_vit.query_encode(np.asarray(images)[missing])
            for row, pos in enumerate(missing):
                self._query_cache[ids[pos]] = encoded[row]
        return np.stack([self._query_cache[i] for i in ids])

    def select(self, queries, task_id=None, train=True):
        return select(self.pool, queries, task_id, train)

    def prefix(self, selection):
        """CL prefixes from the pool selection plus the global KD prompts"""
        kd = {j: PrefixSet.split(prompt) for j, prompt in self.kd_prompts.items()}
        return PrefixSet(cl=dict(selection.prefix.cl), kd=kd)

    def forward(self, images, queries, task_id=None, train=True, collect_features=False):
        selection = self.select(queries, task_id, train)
        out = self.vit.forward_features(images, prefix=self.prefix(selection),
                                        use_kd_token=self.kd_token is not None, kd_token=self.kd_token,
                                        collect_features=collect_features)
        return out, selection

    def predict(self, images, classes, sample_ids=None, batch_size=128):
        """Class-incremental prediction restricted to ``classes`` (no task identity)"""
        classes = np.asarray(sorted(classes), dtype=np.intp)
        if classes.size == 0:
            raise ContractViolation("prediction needs at least one candidate class")
        images = np.asarray(images)
        predictions = []
        with no_tape():
            for start in range(0, len(images), batch_size):
                chunk = images[start:start + batch_size]
                ids = None if sample_ids is None else sample_ids[start:start + batch_size]
                out, _ = self.forward(chunk, self.queries(chunk, ids), train=False)
                logits = classify(out.cls_embedding, self.head).data[:, classes]
                if self.kd_head is not None and out.kd_embedding is not None:
                    kd_logits = classify(out.kd_embedding, self.kd_head).data[:, classes]
                    _, local = combine_heads_predict(logits, kd_logits)
                else:
                    local = np.argmax(logits, axis=-1)
                predictions.append(classes[local])
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.intp)
