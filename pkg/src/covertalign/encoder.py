"""Dual image/text encoders with contrastive pretraining.

A pair of small pre-LN transformers sharing a 32-d joint embedding space:
the image tower eats 64x64 RGB as 64 patch tokens, the text tower eats
printable ASCII as character tokens. Both are written on the autodiff
engine, so every output stays differentiable with respect to the image.

Surrogate encoders (the ones the attack optimizes against) and victim
encoders (held out for transfer measurement) are the same architecture at
different seeds, with one deeper victim variant. Pretraining aligns rendered
text with its source string via symmetric InfoNCE on synthetic composites;
it is plain seeded gradient descent, bit-reproducible across runs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, clamp, gelu, l2_normalize, layer_norm, log_softmax, softmax, take_rows
from .textimage import render_text
from .trigger import build_mask
from .wordlist import sample_phrase, train_words

IMAGE_SIZE = 64
PATCH = 8
GRID = IMAGE_SIZE // PATCH
N_TOKENS = GRID * GRID  # 64 patch tokens
WIDTH = 32
N_HEADS = 4
HEAD_DIM = WIDTH // N_HEADS
MLP_HIDDEN = 4 * WIDTH
JOINT_DIM = 32
MAX_TEXT_LEN = 64
VOCAB_SIZE = 95  # printable ASCII 0x20..0x7E
CHAR_BASE = 0x20

LOGIT_SCALE_INIT = math.log(1.0 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)

SURROGATE_SEEDS = (1, 2, 3)
# victims: unseen seed at the surrogate depth, plus a deeper variant
VICTIM_SPECS = ((101, 2), (102, 3))

CHECKPOINT_MAGIC = b"DUALENC\x00"
CHECKPOINT_VERSION = 1

_NEG_INF = -1e9  # key-mask bias; large enough to zero the softmax weight in f32


def _param_spec(n_blocks: int):
    """Ordered (name, shape) table; order fixes init draws and checkpoints."""
    spec = [
        ("img_patch_w", (3 * PATCH * PATCH, WIDTH)),
        ("img_patch_b", (WIDTH,)),
        ("img_pos", (N_TOKENS, WIDTH)),
    ]
    for i in range(n_blocks):
        spec += _block_spec("img", i)
    spec += [
        ("img_post_g", (WIDTH,)),
        ("img_post_b", (WIDTH,)),
        ("img_proj", (WIDTH, JOINT_DIM)),
        ("txt_embed", (VOCAB_SIZE, WIDTH)),
        ("txt_pos", (MAX_TEXT_LEN, WIDTH)),
    ]
    for i in range(n_blocks):
        spec += _block_spec("txt", i)
    spec += [
        ("txt_post_g", (WIDTH,)),
        ("txt_post_b", (WIDTH,)),
        ("txt_proj", (WIDTH, JOINT_DIM)),
        ("logit_scale", ()),
    ]
    return spec


def _block_spec(tower: str, i: int):
    pf = f"{tower}_b{i}_"
    return [
        (pf + "ln1_g", (WIDTH,)), (pf + "ln1_b", (WIDTH,)),
        (pf + "q_w", (WIDTH, WIDTH)), (pf + "q_b", (WIDTH,)),
        (pf + "k_w", (WIDTH, WIDTH)), (pf + "k_b", (WIDTH,)),
        (pf + "v_w", (WIDTH, WIDTH)), (pf + "v_b", (WIDTH,)),
        (pf + "o_w", (WIDTH, WIDTH)), (pf + "o_b", (WIDTH,)),
        (pf + "ln2_g", (WIDTH,)), (pf + "ln2_b", (WIDTH,)),
        (pf + "fc1_w", (WIDTH, MLP_HIDDEN)), (pf + "fc1_b", (MLP_HIDDEN,)),
        (pf + "fc2_w", (MLP_HIDDEN, WIDTH)), (pf + "fc2_b", (WIDTH,)),
    ]


def parameter_count(n_blocks: int = 2) -> int:
    return sum(int(np.prod(shape, dtype=np.int64)) for _, shape in _param_spec(n_blocks))


class DualEncoder:
    """Frozen dual-tower encoder. Weights are immutable after construction."""

    def __init__(self, params: dict, n_blocks: int, seed: int):
        spec = _param_spec(n_blocks)
        expected = [name for name, _ in spec]
        if list(params.keys()) != expected:
            raise ValueError("DualEncoder: parameter table does not match the architecture")
        for name, shape in spec:
            if params[name].shape != shape:
                raise ValueError(
                    f"DualEncoder: {name} has shape {params[name].shape}, expected {shape}")
        self.params = {}
        for name, _ in spec:
            # np.array keeps 0-d shapes (ascontiguousarray would promote them)
            arr = np.array(params[name], dtype=np.float32, order="C")
            arr.flags.writeable = False
            self.params[name] = arr
        self.n_blocks = int(n_blocks)
        self.seed = int(seed)
        self._wrapped: dict = {}  # dtype -> constant-Tensor view of the weights

    @classmethod
    def initialize(cls, seed: int, n_blocks: int = 2) -> "DualEncoder":
        """Seeded random weights; the same (seed, n_blocks) always yields
        identical parameters."""
        rng = np.random.default_rng([seed, 0])
        params = {}
        for name, shape in _param_spec(n_blocks):
            if name == "logit_scale":
                params[name] = np.asarray(LOGIT_SCALE_INIT, dtype=np.float32)
            elif name.endswith("_g"):
                params[name] = np.ones(shape, dtype=np.float32)
            elif name.endswith("_b"):
                params[name] = np.zeros(shape, dtype=np.float32)
            else:
                params[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        return cls(params, n_blocks, seed)

    def tensors(self, dtype=np.float32) -> dict:
        """Constant-Tensor view of the weights, cached per dtype."""
        key = np.dtype(dtype)
        if key not in self._wrapped:
            self._wrapped[key] = {
                name: Tensor(arr.astype(key, copy=False)) for name, arr in self.params.items()
            }
        return self._wrapped[key]

    def __repr__(self):
        return f"DualEncoder(seed={self.seed}, n_blocks={self.n_blocks})"


@dataclass(frozen=True)
class EncoderBundle:
    """Ordered encoder ensemble tagged by its role in the experiment."""

    encoders: tuple
    role: str

    def __post_init__(self):
        if not self.encoders:
            raise ValueError("EncoderBundle: empty ensemble")
        if self.role not in ("surrogate", "victim"):
            raise ValueError(f"EncoderBundle: unknown role {self.role!r}")
        seeds = [e.seed for e in self.encoders]
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"EncoderBundle: duplicate seeds {seeds}")

    @property
    def seeds(self) -> tuple:
        return tuple(e.seed for e in self.encoders)

    def __len__(self):
        return len(self.encoders)

    def __iter__(self):
        return iter(self.encoders)


# ---------------------------------------------------------------------------
# forward passes


def _attention(h: Tensor, p: dict, pf: str, mask_bias) -> Tensor:
    B, T = h.shape[0], h.shape[1]

    def heads(t):
        return t.reshape(B, T, N_HEADS, HEAD_DIM).transpose(0, 2, 1, 3)

    q = heads(h @ p[pf + "q_w"] + p[pf + "q_b"])
    k = heads(h @ p[pf + "k_w"] + p[pf + "k_b"])
    v = heads(h @ p[pf + "v_w"] + p[pf + "v_b"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(HEAD_DIM))
    if mask_bias is not None:
        scores = scores + Tensor(mask_bias.astype(scores.dtype, copy=False))
    att = softmax(scores, axis=-1)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, WIDTH)
    return ctx @ p[pf + "o_w"] + p[pf + "o_b"]


def _block(h: Tensor, p: dict, tower: str, i: int, mask_bias=None) -> Tensor:
    pf = f"{tower}_b{i}_"
    h = h + _attention(layer_norm(h, p[pf + "ln1_g"], p[pf + "ln1_b"]), p, pf, mask_bias)
    z = layer_norm(h, p[pf + "ln2_g"], p[pf + "ln2_b"])
    return h + gelu(z @ p[pf + "fc1_w"] + p[pf + "fc1_b"]) @ p[pf + "fc2_w"] + p[pf + "fc2_b"]


def _image_tokens(p: dict, x: Tensor, n_blocks: int) -> Tensor:
    # x: (B, 3, 64, 64) in [0, 255]; tokens are 8x8 patches, row-major grid
    B = x.shape[0]
    t = x * (1.0 / 255.0)
    t = t.reshape(B, 3, GRID, PATCH, GRID, PATCH).transpose(0, 2, 4, 1, 3, 5)
    t = t.reshape(B, N_TOKENS, 3 * PATCH * PATCH)
    h = t @ p["img_patch_w"] + p["img_patch_b"]
    h = h + p["img_pos"]
    for i in range(n_blocks):
        h = _block(h, p, "img", i)
    return h  # (B, 64, 32); these rows are the local features


def _project(pooled: Tensor, p: dict, tower: str) -> Tensor:
    z = layer_norm(pooled, p[f"{tower}_post_g"], p[f"{tower}_post_b"])
    return l2_normalize(z @ p[f"{tower}_proj"], axis=-1)


def _image_global_from_tokens(tokens: Tensor, p: dict) -> Tensor:
    return _project(tokens.mean(axis=1), p, "img")


def _text_global(p: dict, idx: np.ndarray, lengths: np.ndarray, n_blocks: int,
                 dtype=np.float32) -> Tensor:
    B, T = idx.shape
    h = take_rows(p["txt_embed"], idx.reshape(-1)).reshape(B, T, WIDTH)
    h = h + p["txt_pos"][:T]
    if np.any(lengths < T):
        # keys beyond each sequence's length are masked out of every softmax
        key_ok = np.arange(T)[None, :] < lengths[:, None]
        mask_bias = np.where(key_ok, 0.0, _NEG_INF)[:, None, None, :]
    else:
        mask_bias = None
    for i in range(n_blocks):
        h = _block(h, p, "txt", i, mask_bias)
    valid = (np.arange(T)[None, :] < lengths[:, None]).astype(dtype)[:, :, None]
    summed = (h * Tensor(valid)).sum(axis=1)
    pooled = summed * Tensor((1.0 / lengths.astype(np.float64)).astype(dtype)[:, None])
    return _project(pooled, p, "txt")


def _pick_dtype(x) -> np.dtype:
    dt = x.data.dtype if isinstance(x, Tensor) else np.asarray(x).dtype
    return np.dtype(dt) if dt in (np.float32, np.float64) else np.dtype(np.float32)


def _as_batched_tensor(x, what: str):
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_pick_dtype(x)))
    if t.data.ndim == 3:
        t = t.reshape(1, *t.data.shape)
        single = True
    elif t.data.ndim == 4:
        single = False
    else:
        raise ValueError(f"{what}: expected (3, 64, 64) or a batch of them, got {t.data.shape}")
    if t.data.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(
            f"{what}: expected 3x{IMAGE_SIZE}x{IMAGE_SIZE} input, got {t.data.shape[1:]}"
            " (no resizing happens inside the encoder)")
    return t, single


def encode_image_features(enc: DualEncoder, x):
    """(global, local) features from one tower pass.

    x may be a numpy array or a Tensor on a tape, (3, H, W) or (B, 3, H, W),
    values in [0, 255]. Returns Tensors; single inputs drop the batch axis:
    global (32,) unit-normalized, local (64, 32).
    """
    t, single = _as_batched_tensor(x, "encode_image_features")
    p = enc.tensors(t.data.dtype)
    tokens = _image_tokens(p, t, enc.n_blocks)
    glob = _image_global_from_tokens(tokens, p)
    if single:
        return glob.reshape(JOINT_DIM), tokens.reshape(N_TOKENS, WIDTH)
    return glob, tokens


def encode_image_global(enc: DualEncoder, x):
    """Unit-norm global embedding; numpy in, numpy out (Tensors stay Tensors)."""
    glob, _ = encode_image_features(enc, x)
    return glob if isinstance(x, Tensor) else glob.data


def encode_image_local(enc: DualEncoder, x):
    """Per-patch token features from the final block, shape (64, 32)."""
    _, local = encode_image_features(enc, x)
    return local if isinstance(x, Tensor) else local.data


def _text_indices(text: str) -> np.ndarray:
    if not text:
        raise ValueError("encode_text: empty string")
    if len(text) > MAX_TEXT_LEN:
        raise ValueError(f"encode_text: length {len(text)} exceeds the {MAX_TEXT_LEN}-character limit")
    codes = []
    for ch in text:
        o = ord(ch)
        if not (CHAR_BASE <= o <= 0x7E):
            raise ValueError(f"encode_text: unsupported character {ch!r}")
        codes.append(o - CHAR_BASE)
    return np.asarray(codes, dtype=np.int64)


def encode_text(enc: DualEncoder, text: str) -> np.ndarray:
    """Unit-norm embedding of a printable-ASCII string (length <= 64)."""
    idx = _text_indices(text)[None, :]
    lengths = np.asarray([idx.shape[1]], dtype=np.int64)
    out = _text_global(enc.tensors(), idx, lengths, enc.n_blocks)
    return out.data[0].copy()


def encode_text_batch(enc: DualEncoder, texts) -> np.ndarray:
    """Stacked unit-norm text embeddings, shape (len(texts), 32)."""
    if not texts:
        raise ValueError("encode_text_batch: no texts")
    seqs = [_text_indices(t) for t in texts]
    lengths = np.asarray([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max())
    idx = np.zeros((len(seqs), T), dtype=np.int64)
    for r, s in enumerate(seqs):
        idx[r, : len(s)] = s
    return _text_global(enc.tensors(), idx, lengths, enc.n_blocks).data.copy()


# ---------------------------------------------------------------------------
# synthetic pretraining corpus


def compose_text_scene(phrase: str, rng: np.random.Generator,
                       size: int = IMAGE_SIZE) -> np.ndarray:
    """Render a phrase and composite it over uniform noise at random geometry.

    Contrast is drawn from [0.15, 1], so the towers also learn to read faint
    text; draw order is fixed, making scenes a pure function of rng state.
    """
    textimg = render_text(phrase)
    bg = rng.uniform(0.0, 255.0, size=(3, size, size))
    theta = float(rng.uniform(-0.35, 0.35))
    r_w = float(rng.uniform(0.35, 0.9))
    r_h = float(rng.uniform(0.12, 0.45))
    contrast = float(rng.uniform(0.15, 1.0))
    ink = 255.0 if rng.random() < 0.5 else 0.0
    mask = build_mask(textimg, theta, r_w, r_h, size, size)
    scene = bg + mask.soft[None] * (contrast * (ink - bg))
    return scene.astype(np.float32)


def phrase_image(phrase: str, size: int = IMAGE_SIZE, r_w: float = 0.8,
                 r_h: float = 0.3, ink: float = 255.0, bg: float = 0.0) -> np.ndarray:
    """Canonical clean render: the phrase centered at fixed geometry on a
    flat background. Used for alignment probes and retrieval candidates."""
    textimg = render_text(phrase)
    mask = build_mask(textimg, 0.0, r_w, r_h, size, size)
    base = np.full((3, size, size), bg, dtype=np.float32)
    return (base + mask.soft[None].astype(np.float32) * (ink - bg)).astype(np.float32)


def build_corpus(rng: np.random.Generator, count: int, words=None):
    """`count` distinct phrases with their composited scenes."""
    if words is None:
        words = train_words()
    phrases, seen = [], set()
    while len(phrases) < count:
        ph = sample_phrase(rng, words)
        if ph not in seen:
            seen.add(ph)
            phrases.append(ph)
    scenes = np.stack([compose_text_scene(ph, rng) for ph in phrases])
    return phrases, scenes


# ---------------------------------------------------------------------------
# contrastive pretraining


def clip_scores(image_emb: Tensor, text_emb: Tensor, p: dict) -> Tensor:
    """Temperature-scaled cosine score matrix (images x texts)."""
    scale = ad.exp(clamp(p["logit_scale"], 0.0, LOGIT_SCALE_MAX))
    return (image_emb @ text_emb.transpose()) * scale


def _info_nce(logits: Tensor) -> Tensor:
    B = logits.shape[0]
    diag = (np.arange(B), np.arange(B))
    img_to_txt = log_softmax(logits, axis=-1)[diag]
    txt_to_img = log_softmax(logits, axis=0)[diag]
    return (img_to_txt + txt_to_img).mean() * (-0.5)


def in_batch_retrieval(enc: DualEncoder, scenes: np.ndarray, phrases) -> float:
    """Fraction of scenes whose highest-scoring text is their own."""
    img = encode_image_global(enc, scenes)
    txt = encode_text_batch(enc, phrases)
    hits = (img @ txt.T).argmax(axis=1) == np.arange(len(phrases))
    return float(hits.mean())


def pretrain_contrastive(seed: int, steps: int = 2000, corpus_size: int = 512,
                         lr: float = 1e-2, batch_size: int = 32,
                         n_blocks: int = 2, progress=None) -> DualEncoder:
    """Train a seeded DualEncoder with symmetric InfoNCE; fully deterministic.

    steps=0 returns the untouched random initialization. The data stream
    (corpus, batches) runs off its own seeded generator, so the same seed
    always sees the same pairs in the same order.
    """
    if steps < 0:
        raise ValueError("pretrain_contrastive: steps must be >= 0")
    base = DualEncoder.initialize(seed, n_blocks)
    if steps == 0:
        return base
    if corpus_size < batch_size:
        raise ValueError(f"pretrain_contrastive: corpus_size {corpus_size} < batch size {batch_size}")

    params = {name: Tensor(arr.copy(), requires_grad=True) for name, arr in base.params.items()}
    rng = np.random.default_rng([seed, 1])
    phrases, scenes = build_corpus(rng, corpus_size)
    seqs = [_text_indices(ph) for ph in phrases]
    lengths_all = np.asarray([len(s) for s in seqs], dtype=np.int64)

    for step in range(steps):
        sel = rng.choice(corpus_size, size=batch_size, replace=False)
        x = Tensor(scenes[sel])
        lengths = lengths_all[sel]
        T = int(lengths.max())
        idx = np.zeros((batch_size, T), dtype=np.int64)
        for r, s_i in enumerate(sel):
            idx[r, : lengths[r]] = seqs[s_i]

        tokens = _image_tokens(params, x, n_blocks)
        img_emb = _image_global_from_tokens(tokens, params)
        txt_emb = _text_global(params, idx, lengths, n_blocks)
        loss = _info_nce(clip_scores(img_emb, txt_emb, params))
        backward(loss, release=True)

        for t in params.values():
            if t.grad is not None:
                t.data -= (lr * t.grad).astype(np.float32)
            t.zero_grad()
        if progress is not None:
            progress(step, float(loss.data))

    return DualEncoder({k: t.data for k, t in params.items()}, n_blocks, seed)


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_weights(enc: DualEncoder) -> bytes:
    """magic | version u32 | n_blocks u32 | seed i64 | table | raw LE float32."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<IIq", CHECKPOINT_VERSION, enc.n_blocks, enc.seed)
    spec = _param_spec(enc.n_blocks)
    out += struct.pack("<I", len(spec))
    for name, shape in spec:
        nb = name.encode("ascii")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
    for name, _ in spec:
        out += np.ascontiguousarray(enc.params[name], dtype="<f4").tobytes()
    return bytes(out)


def load_weights(blob: bytes) -> DualEncoder:
    """Inverse of save_weights; any mismatch or short read raises ValueError."""
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise ValueError("not an encoder checkpoint (bad magic)")
    version, n_blocks, seed = struct.unpack("<IIq", take(16))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if not (1 <= n_blocks <= 16):
        raise ValueError(f"implausible block count {n_blocks}")
    (n_entries,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("ascii")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        table.append((name, tuple(int(d) for d in shape)))
    if table != _param_spec(n_blocks):
        raise ValueError("checkpoint shape table does not match the architecture")

    params = {}
    for name, shape in table:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(4 * count)
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        params[name] = arr
    if pos != len(view):
        raise ValueError(f"trailing bytes after checkpoint payload ({len(view) - pos})")
    return DualEncoder(params, n_blocks, seed)
