"""Tiny contrastive image-text model.

Image side: 4x4 patch embedding to 64-dim tokens, a learned class token,
2 pre-norm transformer blocks, 4 heads, L2-normalized 64-dim global
embedding. Text side: token + position embeddings, 2 blocks, masked mean
pooling. The image forward keeps per-block q/k/v so the dense probe can
re-run the last block with modified wiring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import FAMILIES, MAX_CAPTION_LEN, PAD_ID, VOCAB, caption_render, caption_tokenize, pad_tokens
from .optim import AdamWState, adamw_step
from .rng import RngStream
from .tensor import Tensor, backward

EMBED_DIM = 64
PATCH = 4
IMAGE_SIZE = 32
N_PATCHES = (IMAGE_SIZE // PATCH) ** 2
N_HEADS = 4
MLP_HIDDEN = 128
N_BLOCKS = 2
TEXT_LEN = MAX_CAPTION_LEN
MAX_LOGIT_SCALE = 100.0

SEG_VARIANTS = ("vanilla", "value_extract", "correlative_attn", "residual_free")


class ClipError(Exception):
    pass


@dataclass
class EncodeOutput:
    global_embedding: np.ndarray            # (64,) unit norm
    patch_tokens: np.ndarray                # (64, 64) projected, pre-normalization
    attention_internals: list = field(default_factory=list)  # per block dict of q/k/v


def _init_linear(rng, n_in, n_out, scale=0.02):
    w = Tensor(rng.normal((n_in, n_out)) * scale, requires_grad=True)
    b = Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True)
    return w, b


def _init_block(rng, dim):
    p = {}
    p["ln1_g"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
    p["ln1_b"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
    for name in ("q", "k", "v", "o"):
        p[f"w{name}"], p[f"b{name}"] = _init_linear(rng.split(name), dim, dim)
    p["ln2_g"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
    p["ln2_b"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
    p["w1"], p["b1"] = _init_linear(rng.split("mlp1"), dim, MLP_HIDDEN)
    p["w2"], p["b2"] = _init_linear(rng.split("mlp2"), MLP_HIDDEN, dim)
    return p


def _split_heads(x, n, t):
    # (n, t, D) -> (n, heads, t, d)
    return T.transpose(T.reshape(x, (n, t, N_HEADS, EMBED_DIM // N_HEADS)), (0, 2, 1, 3))


def _merge_heads(x, n, t):
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (n, t, EMBED_DIM))


def _block_forward(p, x, variant="vanilla", internals=None):
    n, t = x.data.shape[0], x.data.shape[1]
    h = T.layer_norm(x, p["ln1_g"], p["ln1_b"])
    q = _split_heads(T.add(T.matmul(h, p["wq"]), p["bq"]), n, t)
    k = _split_heads(T.add(T.matmul(h, p["wk"]), p["bk"]), n, t)
    v = _split_heads(T.add(T.matmul(h, p["wv"]), p["bv"]), n, t)
    if internals is not None:
        internals.append({"q": q.data, "k": k.data, "v": v.data})

    d = EMBED_DIM // N_HEADS
    swap = (0, 1, 3, 2)
    if variant in ("vanilla", "residual_free"):
        scores = T.mul(T.matmul(q, T.transpose(k, swap)), 1.0 / np.sqrt(d))
        mixed = T.matmul(T.softmax(scores, axis=-1), v)
    elif variant == "correlative_attn":
        scores = T.add(T.matmul(q, T.transpose(q, swap)), T.matmul(k, T.transpose(k, swap)))
        scores = T.mul(scores, 1.0 / np.sqrt(d))
        mixed = T.matmul(T.softmax(scores, axis=-1), v)
    elif variant == "value_extract":
        mixed = v
    else:
        raise ClipError(f"unknown block variant {variant!r}")
    attn_out = T.add(T.matmul(_merge_heads(mixed, n, t), p["wo"]), p["bo"])
    if variant == "residual_free":
        return attn_out
    x = T.add(x, attn_out)
    h2 = T.layer_norm(x, p["ln2_g"], p["ln2_b"])
    mlp = T.add(T.matmul(T.silu(T.add(T.matmul(h2, p["w1"]), p["b1"])), p["w2"]), p["b2"])
    return T.add(x, mlp)


class ClipModel:
    """Paired encoders plus a learnable similarity-logit scale."""

    def __init__(self, seed=0):
        rng = RngStream(seed, ("clip-init",))
        self.params = {}
        p = self.params
        ir = rng.split("image")
        p["img.patch_w"], p["img.patch_b"] = _init_linear(ir.split("patch"), 3 * PATCH * PATCH, EMBED_DIM)
        p["img.cls"] = Tensor(ir.split("cls").normal((1, 1, EMBED_DIM)) * 0.02, requires_grad=True)
        p["img.pos"] = Tensor(ir.split("pos").normal((1, N_PATCHES + 1, EMBED_DIM)) * 0.02,
                              requires_grad=True)
        for b in range(N_BLOCKS):
            for k, v in _init_block(ir.split(f"block{b}"), EMBED_DIM).items():
                p[f"img.b{b}.{k}"] = v
        p["img.lnf_g"] = Tensor(np.ones(EMBED_DIM, dtype=np.float32), requires_grad=True)
        p["img.lnf_b"] = Tensor(np.zeros(EMBED_DIM, dtype=np.float32), requires_grad=True)
        p["img.proj"] = Tensor(ir.split("proj").normal((EMBED_DIM, EMBED_DIM)) / np.sqrt(EMBED_DIM),
                               requires_grad=True)

        tr = rng.split("text")
        p["txt.tok"] = Tensor(tr.split("tok").normal((len(VOCAB), EMBED_DIM)) * 0.02,
                              requires_grad=True)
        p["txt.pos"] = Tensor(tr.split("pos").normal((1, TEXT_LEN, EMBED_DIM)) * 0.02,
                              requires_grad=True)
        for b in range(N_BLOCKS):
            for k, v in _init_block(tr.split(f"block{b}"), EMBED_DIM).items():
                p[f"txt.b{b}.{k}"] = v
        p["txt.lnf_g"] = Tensor(np.ones(EMBED_DIM, dtype=np.float32), requires_grad=True)
        p["txt.lnf_b"] = Tensor(np.zeros(EMBED_DIM, dtype=np.float32), requires_grad=True)
        p["txt.proj"] = Tensor(tr.split("proj").normal((EMBED_DIM, EMBED_DIM)) / np.sqrt(EMBED_DIM),
                               requires_grad=True)
        # similarity-logit scale, stored as a log; init 1/0.07, clamped <= 100
        p["log_temperature"] = Tensor(np.log(1.0 / 0.07).astype(np.float32), requires_grad=True)

    # -- parameter plumbing ---------------------------------------------------
    def image_param_names(self):
        return [k for k in self.params if k.startswith("img.")]

    def text_param_names(self):
        return [k for k in self.params if k.startswith("txt.")]

    def named_params(self, names=None):
        names = list(self.params) if names is None else names
        return [(n, self.params[n]) for n in names]

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ClipError(f"state dict key mismatch: {sorted(missing)}")
        for k, v in state.items():
            self.params[k].data = np.asarray(v, dtype=np.float32).reshape(self.params[k].data.shape)

    def set_requires_grad(self, flag, names=None):
        for _, p in self.named_params(names):
            p.requires_grad = flag

    @property
    def logit_scale(self):
        return float(min(np.exp(self.params["log_temperature"].item()), MAX_LOGIT_SCALE))

    def clamp_logit_scale(self):
        lt = self.params["log_temperature"]
        lt.data = np.minimum(lt.data, np.log(MAX_LOGIT_SCALE).astype(np.float32))

    # -- forward passes -------------------------------------------------------
    def image_tokens(self, images):
        """(N, 32, 32, 3) float array -> patch token Tensor inputs."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ClipError(f"expected (N, 32, 32, 3) images, got {images.shape}")
        n = images.shape[0]
        g = IMAGE_SIZE // PATCH
        patches = images.reshape(n, g, PATCH, g, PATCH, 3).transpose(0, 1, 3, 2, 4, 5)
        return patches.reshape(n, N_PATCHES, 3 * PATCH * PATCH)

    def image_forward(self, images, variant="vanilla", keep_internals=False):
        """Returns (global Tensor (N,64) unit rows, patch token Tensor (N,64,64), internals)."""
        if variant not in SEG_VARIANTS:
            raise ClipError(f"unknown inference variant {variant!r}")
        p = self.params
        patches = Tensor(self.image_tokens(images))
        n = patches.data.shape[0]
        tok = T.add(T.matmul(patches, p["img.patch_w"]), p["img.patch_b"])
        cls = T.broadcast_to(p["img.cls"], (n, 1, EMBED_DIM))
        x = T.add(T.concat([cls, tok], axis=1), p["img.pos"])
        internals = [] if keep_internals else None
        for b in range(N_BLOCKS):
            bp = {k.split(".")[-1]: v for k, v in p.items() if k.startswith(f"img.b{b}.")}
            block_variant = variant if b == N_BLOCKS - 1 else "vanilla"
            x = _block_forward(bp, x, variant=block_variant, internals=internals)
        x = T.layer_norm(x, p["img.lnf_g"], p["img.lnf_b"])
        cls_tok = T.reshape(T.slice_axis(x, 1, 0, 1), (n, EMBED_DIM))
        global_emb = T.l2_normalize(T.matmul(cls_tok, p["img.proj"]), axis=-1)
        patch_tok = T.matmul(T.slice_axis(x, 1, 1, N_PATCHES), p["img.proj"])
        return global_emb, patch_tok, internals or []

    def text_forward(self, token_batch):
        """(N, TEXT_LEN) padded int ids -> unit-norm (N, 64) Tensor."""
        ids = np.asarray(token_batch)
        if ids.ndim != 2 or ids.shape[1] != TEXT_LEN:
            raise ClipError(f"expected (N, {TEXT_LEN}) token ids, got {ids.shape}")
        if ids.min() < 0 or ids.max() >= len(VOCAB):
            raise ClipError(f"token id out of vocabulary: {ids.min()}..{ids.max()}")
        p = self.params
        x = T.add(T.embedding(p["txt.tok"], ids), p["txt.pos"])
        for b in range(N_BLOCKS):
            bp = {k.split(".")[-1]: v for k, v in p.items() if k.startswith(f"txt.b{b}.")}
            x = _block_forward(bp, x)
        x = T.layer_norm(x, p["txt.lnf_g"], p["txt.lnf_b"])
        mask = (ids != PAD_ID).astype(np.float32)[:, :, None]
        denom = np.maximum(mask.sum(axis=1), 1.0)
        pooled = T.mul(T.tsum(T.mul(x, Tensor(mask)), axis=1), Tensor(1.0 / denom))
        return T.l2_normalize(T.matmul(pooled, p["txt.proj"]), axis=-1)

    # -- inference conveniences (plain arrays out) ------------------------------
    def encode_image(self, image, variant="vanilla"):
        image = np.asarray(image, dtype=np.float32)
        if image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ClipError(f"expected (32, 32, 3) image, got {image.shape}")
        g, pt, internals = self.image_forward(image[None], variant=variant, keep_internals=True)
        return EncodeOutput(global_embedding=g.data[0], patch_tokens=pt.data[0],
                            attention_internals=internals)

    def encode_images(self, images, batch_size=256):
        outs = []
        for i in range(0, len(images), batch_size):
            g, _, _ = self.image_forward(np.asarray(images[i:i + batch_size]))
            outs.append(g.data)
        return np.concatenate(outs, axis=0)

    def encode_text(self, tokens):
        ids = np.asarray(pad_tokens(tuple(tokens)))[None]
        return self.text_forward(ids).data[0]

    def encode_texts(self, token_seqs):
        ids = np.stack([np.asarray(pad_tokens(tuple(t))) for t in token_seqs])
        return self.text_forward(ids).data


def infonce_loss(image_embs, text_embs, temperature):
    """Symmetric cross-entropy over similarity/temperature logits."""
    b = image_embs.data.shape[0]
    if b < 2:
        raise ClipError(f"contrastive loss needs batch >= 2, got {b}")
    if isinstance(temperature, Tensor):
        inv_t = T.power(temperature, -1.0)
    else:
        inv_t = Tensor(1.0 / float(temperature))
    logits = T.mul(T.matmul(image_embs, T.transpose(text_embs, (1, 0))), inv_t)
    if not np.isfinite(logits.data).all():
        raise ClipError("non-finite contrastive logits")
    eye = Tensor(np.eye(b, dtype=np.float32))

    def ce(lg, axis):
        logp = T.log(T.softmax(lg, axis=axis))
        return T.mul(T.tmean(T.tsum(T.mul(logp, eye), axis=axis)), -1.0)

    return T.mul(T.add(ce(logits, 1), ce(logits, 0)), 0.5)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    caption_family_prob: float = 0.4   # chance each optional family is mentioned
    eval_every: int = 100
    train_temperature: bool = True


def masked_caption_tokens(scene, rng, prob):
    """Caption mentioning a random subset of optional attribute families."""
    optional = [f for f in FAMILIES if f != "presence"]
    keep = {f for f in optional if rng.uniform(()) < prob}
    keep.add("presence")
    return caption_tokenize(caption_render(scene.attrs, families=keep))


def retrieval_at_1(model, scenes, batch_size=32):
    """Image-to-text retrieval@1 over batches of candidate captions."""
    correct = total = 0
    for i in range(0, len(scenes) - len(scenes) % batch_size, batch_size):
        batch = scenes[i:i + batch_size]
        img = model.encode_images(np.stack([s.image for s in batch]))
        txt = model.encode_texts([s.caption for s in batch])
        sims = img @ txt.T
        correct += int((sims.argmax(axis=1) == np.arange(len(batch))).sum())
        total += len(batch)
    return correct / max(total, 1)


def train_clip(corpus, config, seed):
    """Returns (model with best-val-retrieval weights, per-step loss list)."""
    train = corpus.split("train")
    val = corpus.split("val")
    if not train or not val:
        raise ClipError("corpus needs non-empty train and val splits")
    model = ClipModel(seed=seed)
    names = sorted(model.params)
    if not config.train_temperature:
        names = [n for n in names if n != "log_temperature"]
    params = [model.params[n] for n in names]
    state = AdamWState(params, learning_rate=config.learning_rate,
                       weight_decay=config.weight_decay)
    state.set_names(names)

    batch_rng = RngStream(seed, ("clip-train", "batch"))
    cap_rng = RngStream(seed, ("clip-train", "caption"))

    curve = []
    best = (-1.0, None)
    for step in range(config.steps):
        idx = batch_rng.choice(len(train), size=config.batch_size, replace=False)
        batch = [train[int(i)] for i in idx]
        images = np.stack([s.image for s in batch])
        tokens = np.stack([
            np.asarray(pad_tokens(masked_caption_tokens(s, cap_rng, config.caption_family_prob)))
            for s in batch])
        img_emb, _, _ = model.image_forward(images)
        txt_emb = model.text_forward(tokens)
        scale = T.exp(model.params["log_temperature"])
        loss = infonce_loss(img_emb, txt_emb, temperature=T.power(scale, -1.0))
        lv = loss.item()
        if not np.isfinite(lv):
            raise ClipError(f"training diverged (non-finite loss) at step {step}")
        curve.append(lv)
        for p in params:
            p.zero_grad()
        backward(loss, params=params)
        adamw_step(params, [p.grad for p in params], state)
        model.clamp_logit_scale()

        if (step + 1) % config.eval_every == 0 or step == config.steps - 1:
            r1 = retrieval_at_1(model, val, batch_size=min(config.batch_size, len(val)))
            if r1 > best[0]:
                best = (r1, model.state_dict())
    if best[1] is not None:
        model.load_state_dict(best[1])
    return model, curve
