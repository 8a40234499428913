"""Dual-encoder tests: forward contracts, gradients, pretraining
determinism, checkpoint format, and alignment on the cached pretrained model."""

import struct

import numpy as np
import pytest

from covertalign.autodiff import Tensor, backward, cosine_similarity
from covertalign import encoder as E
from covertalign.encoder import (
    DualEncoder,
    EncoderBundle,
    build_corpus,
    compose_text_scene,
    encode_image_global,
    encode_image_local,
    encode_text,
    encode_text_batch,
    in_batch_retrieval,
    load_weights,
    parameter_count,
    phrase_image,
    pretrain_contrastive,
    save_weights,
)
from covertalign.wordlist import heldout_words, sample_phrase


def _random_image(seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(3, 64, 64)).astype(dtype)


@pytest.fixture(scope="module")
def enc():
    return DualEncoder.initialize(3)


# ---------------------------------------------------------------------------
# forward contracts


def test_global_embedding_is_unit_norm(enc):
    for seed in range(4):
        g = encode_image_global(enc, _random_image(seed))
        assert g.shape == (32,)
        assert abs(float(np.linalg.norm(g)) - 1.0) <= 1e-6


def test_image_forward_is_deterministic(enc):
    x = _random_image(1)
    a = encode_image_global(enc, x)
    b = encode_image_global(enc, x)
    assert np.array_equal(a, b)


def test_local_features_shape_and_nondegeneracy(enc):
    x = _random_image(2)
    loc = encode_image_local(enc, x)
    assert loc.shape == (64, 32)
    black = np.zeros((3, 64, 64), dtype=np.float32)
    white = np.full((3, 64, 64), 255.0, dtype=np.float32)
    assert not np.allclose(encode_image_local(enc, black), encode_image_local(enc, white))


def test_wrong_resolution_is_rejected(enc):
    with pytest.raises(ValueError, match="no resizing"):
        encode_image_global(enc, np.zeros((3, 32, 32), dtype=np.float32))
    with pytest.raises(ValueError, match="no resizing"):
        encode_image_global(enc, np.zeros((1, 64, 64), dtype=np.float32))
    with pytest.raises(ValueError, match="expected"):
        encode_image_global(enc, np.zeros((64, 64), dtype=np.float32))


def test_batch_matches_single_forward(enc):
    xs = np.stack([_random_image(s) for s in range(3)])
    batch = encode_image_global(enc, xs)
    assert batch.shape == (3, 32)
    for i in range(3):
        single = encode_image_global(enc, xs[i])
        np.testing.assert_allclose(batch[i], single, atol=1e-6)


def test_one_pixel_nudge_moves_embedding_within_lipschitz_bound(enc):
    x = _random_image(4, dtype=np.float64)
    c, i, j = 1, 20, 33
    x[c, i, j] = 100.0  # headroom for the nudge
    e0 = encode_image_global(enc, x)

    nudged = x.copy()
    nudged[c, i, j] += 1.0 / 255.0
    moved = float(np.linalg.norm(encode_image_global(enc, nudged) - e0))
    assert moved > 0.0

    h = 1e-2
    xp, xm = x.copy(), x.copy()
    xp[c, i, j] += h
    xm[c, i, j] -= h
    jac = (encode_image_global(enc, xp) - encode_image_global(enc, xm)) / (2 * h)
    bound = float(np.linalg.norm(jac)) * (1.0 / 255.0) * 1.5 + 1e-9
    assert moved <= bound


def test_patch_swap_permutes_tokens_when_positions_are_zeroed():
    base = DualEncoder.initialize(5)
    params = dict(base.params)
    params["img_pos"] = np.zeros((64, 32), dtype=np.float32)
    ablated = DualEncoder(params, 2, seed=5)

    x = _random_image(6, dtype=np.float64)
    # patches (row 1, col 2) and (row 5, col 7) -> token ids 10 and 47
    x2 = x.copy()
    x2[:, 8:16, 16:24] = x[:, 40:48, 56:64]
    x2[:, 40:48, 56:64] = x[:, 8:16, 16:24]

    loc1 = encode_image_local(ablated, x)
    loc2 = encode_image_local(ablated, x2)
    perm = np.arange(64)
    perm[10], perm[47] = 47, 10
    np.testing.assert_allclose(loc2, loc1[perm], atol=1e-10)


def test_positional_embeddings_break_patch_symmetry(enc):
    x = _random_image(7)
    x2 = x.copy()
    x2[:, 8:16, 16:24] = x[:, 40:48, 56:64]
    x2[:, 40:48, 56:64] = x[:, 8:16, 16:24]
    loc1, loc2 = encode_image_local(enc, x), encode_image_local(enc, x2)
    perm = np.arange(64)
    perm[10], perm[47] = 47, 10
    assert not np.allclose(loc2, loc1[perm], atol=1e-3)


# ---------------------------------------------------------------------------
# text tower


def test_text_embedding_contracts(enc):
    t = encode_text(enc, "None of the above")
    assert t.shape == (32,)
    assert abs(float(np.linalg.norm(t)) - 1.0) <= 1e-6
    assert np.array_equal(t, encode_text(enc, "None of the above"))
    assert not np.allclose(encode_text(enc, "abc"), encode_text(enc, "abd"))


def test_text_input_validation(enc):
    with pytest.raises(ValueError, match="empty"):
        encode_text(enc, "")
    with pytest.raises(ValueError, match="64"):
        encode_text(enc, "x" * 65)
    with pytest.raises(ValueError, match="unsupported character"):
        encode_text(enc, "café")
    with pytest.raises(ValueError, match="unsupported character"):
        encode_text(enc, "tab\there")


def test_text_batch_matches_single(enc):
    texts = ["guitar", "None of the above", "w", "a longer phrase to pad"]
    batch = encode_text_batch(enc, texts)
    assert batch.shape == (4, 32)
    for i, s in enumerate(texts):
        np.testing.assert_allclose(batch[i], encode_text(enc, s), atol=1e-6)


# ---------------------------------------------------------------------------
# gradients


def test_cosine_to_text_gradient_matches_finite_differences(enc):
    x = _random_image(8, dtype=np.float64)
    t = encode_text(enc, "violin sunset").astype(np.float64)

    x_t = Tensor(x, requires_grad=True)
    sim = cosine_similarity(encode_image_global(enc, x_t), Tensor(t))
    backward(sim)

    rng = np.random.default_rng(9)
    h = 1e-2
    for _ in range(5):
        c, i, j = rng.integers(0, 3), rng.integers(0, 64), rng.integers(0, 64)
        xp, xm = x.copy(), x.copy()
        xp[c, i, j] += h
        xm[c, i, j] -= h
        fd = (
            float(encode_image_global(enc, xp) @ t / np.linalg.norm(t))
            - float(encode_image_global(enc, xm) @ t / np.linalg.norm(t))
        ) / (2 * h)
        got = float(x_t.grad[c, i, j])
        if abs(fd) < 1e-6:
            assert abs(got - fd) <= 1e-8
        else:
            assert abs(got - fd) <= 1e-3 * abs(fd)


def test_distinct_seeds_give_distinct_embeddings():
    a, b = DualEncoder.initialize(1), DualEncoder.initialize(2)
    for seed in range(3):
        x = _random_image(40 + seed)
        cos = float(encode_image_global(a, x) @ encode_image_global(b, x))
        assert cos < 0.99


# ---------------------------------------------------------------------------
# pretraining


def test_zero_steps_returns_seeded_initialization():
    a = pretrain_contrastive(seed=21, steps=0)
    b = DualEncoder.initialize(21)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_same_seed_pretraining_is_bit_identical():
    a = pretrain_contrastive(seed=22, steps=4, corpus_size=32)
    b = pretrain_contrastive(seed=22, steps=4, corpus_size=32)
    assert save_weights(a) == save_weights(b)


def test_pretraining_changes_weights_and_freezes_them():
    trained = pretrain_contrastive(seed=23, steps=2, corpus_size=32)
    init = DualEncoder.initialize(23)
    assert any(not np.array_equal(trained.params[k], init.params[k]) for k in trained.params)
    with pytest.raises(ValueError):
        trained.params["img_proj"][0, 0] = 1.0


def test_pretrain_input_validation():
    with pytest.raises(ValueError, match="steps"):
        pretrain_contrastive(seed=0, steps=-1)
    with pytest.raises(ValueError, match="corpus_size"):
        pretrain_contrastive(seed=0, steps=1, corpus_size=8)


def test_corpus_scenes_are_valid_images():
    rng = np.random.default_rng(30)
    phrases, scenes = build_corpus(rng, 8)
    assert len(phrases) == len(set(phrases)) == 8
    assert scenes.shape == (8, 3, 64, 64)
    assert scenes.dtype == np.float32
    assert scenes.min() >= 0.0 and scenes.max() <= 255.0


def test_scene_composition_is_rng_deterministic():
    a = compose_text_scene("silver lantern", np.random.default_rng(31))
    b = compose_text_scene("silver lantern", np.random.default_rng(31))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_is_identity():
    enc0 = DualEncoder.initialize(33)
    blob = save_weights(enc0)
    enc1 = load_weights(blob)
    assert enc1.seed == 33 and enc1.n_blocks == 2
    assert all(np.array_equal(enc0.params[k], enc1.params[k]) for k in enc0.params)
    assert save_weights(enc1) == blob


def test_checkpoint_roundtrip_for_deeper_variant():
    enc0 = DualEncoder.initialize(34, n_blocks=3)
    enc1 = load_weights(save_weights(enc0))
    assert enc1.n_blocks == 3
    assert all(np.array_equal(enc0.params[k], enc1.params[k]) for k in enc0.params)


def test_checkpoint_byte_length_is_header_plus_payload():
    enc0 = DualEncoder.initialize(35)
    blob = save_weights(enc0)
    spec = E._param_spec(2)
    header = len(E.CHECKPOINT_MAGIC) + struct.calcsize("<IIq") + 4
    for name, shape in spec:
        header += 2 + len(name) + 1 + 4 * len(shape)
    assert len(blob) == header + 4 * parameter_count(2)


def test_checkpoint_rejects_corruption():
    blob = save_weights(DualEncoder.initialize(36))
    with pytest.raises(ValueError, match="truncated"):
        load_weights(blob[:-5])
    with pytest.raises(ValueError, match="trailing"):
        load_weights(blob + b"\x00\x00\x00\x00")
    with pytest.raises(ValueError, match="magic"):
        load_weights(b"NOTADUAL" + blob[8:])
    bad_version = blob[:8] + struct.pack("<I", 99) + blob[12:]
    with pytest.raises(ValueError, match="version"):
        load_weights(bad_version)


def test_parameter_count_matches_hand_tally():
    per_block = (2 * 32) + 4 * (32 * 32 + 32) + (2 * 32) + (32 * 128 + 128) + (128 * 32 + 32)
    img = (192 * 32 + 32) + 64 * 32 + 2 * per_block + 2 * 32 + 32 * 32
    txt = 95 * 32 + 64 * 32 + 2 * per_block + 2 * 32 + 32 * 32
    assert parameter_count(2) == img + txt + 1


# ---------------------------------------------------------------------------
# bundles


def test_bundle_validation():
    encs = tuple(DualEncoder.initialize(s) for s in (1, 2))
    b = EncoderBundle(encs, "surrogate")
    assert b.seeds == (1, 2) and len(b) == 2
    assert [e.seed for e in b] == [1, 2]
    with pytest.raises(ValueError, match="empty"):
        EncoderBundle((), "surrogate")
    with pytest.raises(ValueError, match="role"):
        EncoderBundle(encs, "adversary")
    with pytest.raises(ValueError, match="duplicate"):
        EncoderBundle((encs[0], encs[0]), "victim")


# ---------------------------------------------------------------------------
# pretrained-model behavior (session-cached checkpoint)


def test_heldout_retrieval_beats_chance_by_5x(surrogate_one):
    rng = np.random.default_rng(12345)
    phrases, scenes = build_corpus(rng, 32, words=heldout_words())
    acc = in_batch_retrieval(surrogate_one, scenes, phrases)
    assert acc >= 5.0 / 32.0, f"held-out retrieval {acc:.3f} below 5x chance"


def test_matched_phrase_alignment_margin(surrogate_one):
    target = "None of the above"
    img = encode_image_global(surrogate_one, phrase_image(target))
    matched = float(img @ encode_text(surrogate_one, target))

    rng = np.random.default_rng(777)
    others, seen = [], {target}
    while len(others) < 100:
        p = sample_phrase(rng)
        if p not in seen:
            seen.add(p)
            others.append(p)
    mismatched = float((encode_text_batch(surrogate_one, others) @ img).mean())
    assert matched - mismatched >= 0.3, (
        f"alignment margin {matched - mismatched:.3f} (matched {matched:.3f}, "
        f"mismatched mean {mismatched:.3f})")
