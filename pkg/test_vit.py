#!/usr/bin/env python3
"""
Tests for the ViT backbone, prefix attention, heads and the frozen audit
"""

import numpy as np
import pytest

from conftest import TINY_STUDENT
from core.autodiff import Tape, Tensor, grad
from core.errors import ConfigurationError, ContractViolation
from core.optimizer import Adam
from core.rng import SeededRng
from core.vit import (
    BackboneWeights,
    ClassifierHead,
    PrefixSet,
    ViTConfig,
    VisionTransformer,
    assert_frozen,
    classify,
)


def _vit(config=TINY_STUDENT, seed=0, frozen=True):
    weights = BackboneWeights.initialize(config, SeededRng(seed, "vit"))
    return VisionTransformer(weights.freeze() if frozen else weights)


def test_patch_embed_token_count():
    vit = _vit(ViTConfig(image_size=16, patch_size=4, embed_dim=8, heads=2, blocks=1))
    tokens = vit.patch_embed(np.zeros((2, 3, 16, 16)))
    assert tokens.shape == (2, 17, 8)


def test_zero_image_gives_position_plus_bias():
    vit = _vit()
    tokens = vit.patch_embed(np.zeros((1, 3, 8, 8))).data[0]
    p = vit.p
    assert np.allclose(tokens[0], p["cls_token"].data + p["pos_embed"].data[0])
    assert np.allclose(tokens[1:], p["patch_embed/b"].data + p["pos_embed"].data[1:])


def test_patch_embed_is_deterministic(random_images):
    images = random_images(2)
    a = _vit().patch_embed(images).data
    b = _vit().patch_embed(images).data
    assert a.tobytes() == b.tobytes()


def test_empty_prefix_equals_plain_attention(random_images):
    vit = _vit()
    h = vit.patch_embed(random_images(2))
    empty = PrefixSet(cl={0: (Tensor(np.zeros((0, 8))), Tensor(np.zeros((0, 8))))})
    plain = vit.attention_with_prefix(h, None, 0).data
    with_empty = vit.attention_with_prefix(h, empty, 0).data
    assert np.max(np.abs(plain - with_empty)) <= 1e-12


def test_prefix_keeps_length_and_rows_sum_to_one(random_images):
    vit = _vit()
    h = vit.patch_embed(random_images(2))
    rng = SeededRng(1, "prefix")
    prefix = PrefixSet(
        cl={0: (Tensor(rng.normal((3, 8))), Tensor(rng.normal((3, 8))))},
        kd={0: (Tensor(rng.normal((2, 8))), Tensor(rng.normal((2, 8))))},
    )
    out, weights = vit.attention_with_prefix(h, prefix, 0, return_weights=True)
    assert out.shape == h.shape
    assert weights.shape[-1] == h.shape[1] + 5
    assert np.allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)


def test_single_head_prefix_attention_matches_brute_force():
    config = ViTConfig(image_size=4, channels=1, patch_size=4, embed_dim=2, heads=1, blocks=1, num_classes=2)
    arrays = BackboneWeights.initialize(config, SeededRng(0, "bf")).arrays()
    for proj in "qkvo":
        arrays[f"block0/attn/w{proj}"] = np.eye(2)
        arrays[f"block0/attn/b{proj}"] = np.zeros(2)
    vit = VisionTransformer(BackboneWeights.from_arrays(config, arrays))
    h = Tensor(np.array([[[1.0, 0.0], [0.0, 2.0]]]))
    pk, pv = np.array([[0.5, 0.5]]), np.array([[1.0, -1.0]])
    out = vit.attention_with_prefix(h, PrefixSet(cl={0: (Tensor(pk), Tensor(pv))}), 0).data[0]

    keys = np.vstack([pk, h.data[0]])
    values = np.vstack([pv, h.data[0]])
    expected = []
    for row in h.data[0]:
        scores = keys @ row / np.sqrt(2.0)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        expected.append(w @ values)
    assert np.allclose(out, np.array(expected), atol=1e-12)


def test_prompt_length_must_be_even():
    with pytest.raises(ContractViolation):
        PrefixSet.split(Tensor(np.zeros((3, 8))))


def test_kd_token_absent_when_disabled(random_images):
    vit = _vit()
    images = random_images(2)
    out = vit.forward_features(images)
    assert out.kd_embedding is None
    token = Tensor(np.ones(8))
    with_token = vit.forward_features(images, use_kd_token=True, kd_token=token)
    assert with_token.kd_embedding.shape == (2, 8)
    with pytest.raises(ConfigurationError):
        vit.forward_features(images, use_kd_token=True)


def test_single_block_kd_embedding_is_normalized_token(random_images):
    config = ViTConfig(image_size=8, patch_size=4, embed_dim=8, heads=2, blocks=1, num_classes=4)
    vit = _vit(config)
    token = SeededRng(2, "token").normal((8,))
    out = vit.forward_features(random_images(1, config), use_kd_token=True, kd_token=Tensor(token))
    g, b = vit.p["norm/g"].data, vit.p["norm/b"].data
    centered = token - token.mean()
    expected = centered / np.sqrt((centered ** 2).mean() + 1e-6) * g + b
    assert np.allclose(out.kd_embedding.data[0], expected, atol=1e-10)


def test_collect_features_excludes_kd_token(random_images):
    out = _vit().forward_features(random_images(2), use_kd_token=True, kd_token=Tensor(np.zeros(8)),
                                  collect_features=True)
    assert len(out.features) == TINY_STUDENT.blocks
    assert all(f.shape == (2, TINY_STUDENT.num_patches + 1, 8) for f in out.features)


def test_query_encode(random_images):
    vit = _vit()
    images = random_images(3)
    q1 = vit.query_encode(images)
    q2 = vit.query_encode(images.copy())
    assert np.array_equal(q1, q2)
    assert np.all(np.linalg.norm(q1, axis=1) > 0)
    with pytest.raises(ContractViolation):
        _vit(frozen=False).query_encode(images)


def test_classify_mask_and_oracle():
    rng = SeededRng(0, "head")
    head = ClassifierHead.initialize(8, 4, rng)
    emb = rng.normal((2, 8))
    logits = classify(Tensor(emb), head).data
    assert np.allclose(logits, emb @ head.weight.data + head.bias.data)
    assert np.allclose(classify(Tensor(emb), head, mask=range(4)).data, logits)
    masked = classify(Tensor(emb), head, mask=[2]).data
    assert np.all(np.argmax(masked, axis=1) == 2)
    with pytest.raises(ContractViolation):
        classify(Tensor(emb), head, mask=[])


def test_assert_frozen_after_prompt_only_step(random_images):
    vit = _vit()
    before = vit.weights
    prompt = Tensor(SeededRng(0, "p").normal((2, 8)), requires_grad=True)
    head = ClassifierHead.initialize(8, 4, SeededRng(0, "h"))
    params = {"prompt": prompt, "head/w": head.weight, "head/b": head.bias}
    with Tape():
        pk, pv = PrefixSet.split(prompt)
        out = vit.forward_features(random_images(2), prefix=PrefixSet(cl={0: (pk, pv)}))
        loss = classify(out.cls_embedding, head).sum()
        grads = grad(loss, params)
    Adam(lr=0.1).step(params, grads)
    audit = assert_frozen(before, vit.weights)
    assert audit.passed and audit.differing == ()


def test_unfrozen_last_block_diff(random_images):
    base = BackboneWeights.initialize(TINY_STUDENT, SeededRng(0, "vit")).freeze()
    weights = base.with_trainable(base.last_block_names())
    head = ClassifierHead.initialize(8, 4, SeededRng(0, "h"))
    optimizer = Adam(lr=0.05)
    for step in range(3):
        params = weights.trainable()
        with Tape():
            out = VisionTransformer(weights).forward_features(random_images(2, seed=step))
            loss = classify(out.cls_embedding, head).sum()
            grads = grad(loss, params)
        weights = weights.updated(optimizer.step(params, grads))
    audit = assert_frozen(base, weights, allow_last_block=True)
    assert audit.passed
    assert set(audit.differing) <= base.last_block_names()
    assert audit.differing
    strict = assert_frozen(base, weights)
    assert not strict.passed
    assert strict.first_difference.startswith(f"block{TINY_STUDENT.blocks - 1}/")
