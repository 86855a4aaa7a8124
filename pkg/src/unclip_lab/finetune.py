"""Finetuning the image encoder against a frozen diffusion decoder.

The encoder is updated to minimize the decoder's noise-prediction loss;
the decoder stays frozen so the optimized embeddings are pulled toward
its original input domain, which is what preserves text alignment.
Ablation modes insert a trainable projector (random or identity init)
or unfreeze the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diffusion import Denoiser, forward_diffuse, to_model_space
from .optim import AdamWState, adamw_step
from .rng import RngStream
from .tensor import Tensor, backward

COND_DIM = 64
BANK_PAIRS = 20

VARIANTS = ("default", "projector_random", "projector_identity", "update_G")


class FinetuneError(Exception):
    pass


class FreezeViolation(FinetuneError):
    """Gradient reached parameters that must stay frozen."""


@dataclass
class FinetuneMode:
    variant: str
    projector_w: Tensor | None = None
    projector_b: Tensor | None = None

    @classmethod
    def create(cls, variant, seed=0):
        if variant not in VARIANTS:
            raise FinetuneError(f"unknown finetune variant {variant!r}")
        if variant == "projector_random":
            rng = RngStream(seed, ("projector",))
            w = Tensor(rng.normal((COND_DIM, COND_DIM)) / np.sqrt(COND_DIM), requires_grad=True)
            b = Tensor(np.zeros(COND_DIM, dtype=np.float32), requires_grad=True)
            return cls(variant, w, b)
        if variant == "projector_identity":
            w = Tensor(np.eye(COND_DIM, dtype=np.float32), requires_grad=True)
            b = Tensor(np.zeros(COND_DIM, dtype=np.float32), requires_grad=True)
            return cls(variant, w, b)
        return cls(variant)

    @property
    def has_projector(self):
        return self.projector_w is not None

    def apply(self, emb):
        if not self.has_projector:
            return emb
        return T.add(T.matmul(emb, self.projector_w), self.projector_b)

    def apply_np(self, emb):
        if not self.has_projector:
            return emb
        return emb @ self.projector_w.data + self.projector_b.data


@dataclass(frozen=True)
class NoiseBank:
    """Frozen (noise, timestep) pairs per test image, keyed by scene id.

    The same bank applied to different encoders makes their diffusion
    losses directly comparable.
    """
    scene_ids: tuple
    eps: np.ndarray        # (n_images, BANK_PAIRS, 3, 32, 32)
    timesteps: np.ndarray  # (n_images, BANK_PAIRS)
    bank_seed: int
    schedule_digest: str


def make_noise_bank(test_set, schedule, bank_seed):
    if not test_set:
        raise FinetuneError("noise bank needs a non-empty test set")
    scenes = sorted(test_set, key=lambda s: s.scene_id)
    eps = np.empty((len(scenes), BANK_PAIRS, 3, 32, 32), dtype=np.float32)
    ts = np.empty((len(scenes), BANK_PAIRS), dtype=np.int64)
    for i, s in enumerate(scenes):
        rng = RngStream(bank_seed, ("noise-bank", s.scene_id))
        eps[i] = rng.normal((BANK_PAIRS, 3, 32, 32))
        ts[i] = np.asarray(rng.integers(1, schedule.T + 1, (BANK_PAIRS,)))
    eps.setflags(write=False)
    ts.setflags(write=False)
    return NoiseBank(scene_ids=tuple(s.scene_id for s in scenes), eps=eps, timesteps=ts,
                     bank_seed=bank_seed, schedule_digest=schedule.digest())


def diagnostic_loss(encoder, denoiser, test_set, bank, schedule, mode=None):
    """Mean banked noise-prediction error; a pure function of its inputs."""
    if bank.schedule_digest != schedule.digest():
        raise FinetuneError("noise bank was built for a different schedule")
    scenes = sorted(test_set, key=lambda s: s.scene_id)
    if tuple(s.scene_id for s in scenes) != bank.scene_ids:
        raise FinetuneError("noise bank does not cover this test set")

    images = np.stack([s.image for s in scenes])
    saved = [(p, p.requires_grad) for p in getattr(denoiser, "params", {}).values()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        cond = encoder.encode_images(images)
        if mode is not None:
            cond = mode.apply_np(cond)
        x0 = to_model_space(images)

        total = 0.0
        for i in range(len(scenes)):
            t = bank.timesteps[i]
            eps = bank.eps[i]
            x_t = forward_diffuse(np.repeat(x0[i][None], BANK_PAIRS, axis=0), t, eps, schedule)
            pred = denoiser.forward(Tensor(x_t), t,
                                    Tensor(np.repeat(cond[i][None], BANK_PAIRS, axis=0)))
            total += float(np.mean((pred.data - eps) ** 2, dtype=np.float64))
        return total / len(scenes)
    finally:
        for p, flag in saved:
            p.requires_grad = flag


@dataclass(frozen=True)
class DriftReport:
    """Image-text cosine distances before/after finetuning, matched captions."""
    finetuned_distance: float
    original_distance: float

    @property
    def delta(self):
        return self.finetuned_distance - self.original_distance


def alignment_drift(encoder_new, encoder_orig, eval_set):
    """Cosine distance of image embeddings to the original text embeddings.

    The text side always comes from the original model; the method never
    touches it, so it is the fixed reference frame.
    """
    if not eval_set:
        raise FinetuneError("alignment drift needs a non-empty eval set")
    scenes = sorted(eval_set, key=lambda s: s.scene_id)
    images = np.stack([s.image for s in scenes])
    txt = encoder_orig.encode_texts([s.caption for s in scenes])
    new_d = float(np.mean(1.0 - np.sum(encoder_new.encode_images(images) * txt, axis=1)))
    orig_d = float(np.mean(1.0 - np.sum(encoder_orig.encode_images(images) * txt, axis=1)))
    return DriftReport(finetuned_distance=new_d, original_distance=orig_d)


def _frozen_param_set(encoder, denoiser, mode):
    """(trainable, frozen) name->Tensor maps for the given mode."""
    trainable = {f"enc.{n}": encoder.params[n] for n in encoder.image_param_names()}
    frozen = {f"enc.{n}": encoder.params[n] for n in encoder.params
              if not n.startswith("img.")}
    if mode.has_projector:
        trainable["proj.w"] = mode.projector_w
        trainable["proj.b"] = mode.projector_b
    gen = {f"gen.{n}": p for n, p in denoiser.named_params()}
    if mode.variant == "update_G":
        trainable.update(gen)
    else:
        frozen.update(gen)
    return trainable, frozen


def un2clip_step(encoder, denoiser, images, schedule, mode, state, rng):
    """One encoder-inversion step: backprop the denoising loss into the encoder.

    Timestep and noise sampling mirror the decoder's own training
    configuration (uniform t, standard-normal noise). Raises
    FreezeViolation if any frozen parameter picks up a gradient.
    """
    trainable, frozen = _frozen_param_set(encoder, denoiser, mode)
    for p in trainable.values():
        p.requires_grad = True
    for p in frozen.values():
        p.requires_grad = False

    images = np.asarray(images, dtype=np.float32)
    n = len(images)
    t = np.asarray(rng.integers(1, schedule.T + 1, (n,)))
    eps = rng.normal((n, 3, 32, 32))
    x_t = forward_diffuse(to_model_space(images), t, eps, schedule)

    emb, _, _ = encoder.image_forward(images)
    cond = mode.apply(emb)
    pred = denoiser.forward(Tensor(x_t), t, cond)
    diff = T.sub(pred, Tensor(eps))
    loss = T.tmean(T.mul(diff, diff))
    lv = loss.item()
    if not np.isfinite(lv):
        raise FinetuneError("non-finite finetune loss")

    names = sorted(trainable)
    params = [trainable[nm] for nm in names]
    for p in params:
        p.zero_grad()
    # stale grads from earlier training would fake a freeze violation below
    for p in frozen.values():
        p.zero_grad()
    backward(loss, params=params)
    for nm, p in frozen.items():
        if p.grad is not None:
            raise FreezeViolation(f"gradient reached frozen parameter {nm}")
    adamw_step(params, [p.grad for p in params], state)
    return lv


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 0.0
    bank_seed: int = 1234


@dataclass
class FinetuneRecord:
    epoch: int
    encoder_state: dict
    diagnostic: float
    drift: DriftReport
    generator_checksum: str
    train_loss: float | None = None


def finetune(encoder_init, denoiser, corpus, schedule, mode, epochs, config, seed=0):
    """Epoch-level finetune sweep; emits one record per epoch (epoch 0 = initial).

    In default and projector modes the generator is bit-frozen: its
    checksum is recorded into every emitted record.
    """
    from .clip import ClipModel

    encoder = ClipModel(seed=0)
    encoder.load_state_dict(encoder_init.state_dict())
    original = encoder_init

    train = corpus.split("train")
    test = corpus.split("test")
    if not train or not test:
        raise FinetuneError("corpus needs train and test splits")
    bank = make_noise_bank(test, schedule, config.bank_seed)

    # the diagnostic is always measured against the generator as it was at
    # entry, even in update_G mode, so losses stay comparable across runs
    reference_G = Denoiser(seed=0)
    reference_G.load_state_dict(denoiser.state_dict())

    trainable, _ = _frozen_param_set(encoder, denoiser, mode)
    names = sorted(trainable)
    params = [trainable[nm] for nm in names]
    state = AdamWState(params, learning_rate=config.learning_rate,
                       weight_decay=config.weight_decay)
    state.set_names(names)

    def snapshot(epoch, train_loss=None):
        return FinetuneRecord(
            epoch=epoch,
            encoder_state=encoder.state_dict(),
            diagnostic=diagnostic_loss(encoder, reference_G, test, bank, schedule, mode=mode),
            drift=alignment_drift(encoder, original, test),
            generator_checksum=denoiser.checksum(),
            train_loss=train_loss)

    records = [snapshot(0)]
    images = np.stack([s.image for s in train])
    order_rng = RngStream(seed, ("finetune", "order"))
    noise_rng = RngStream(seed, ("finetune", "noise"))
    for epoch in range(1, epochs + 1):
        perm = order_rng.permutation(len(train))
        losses = []
        for start in range(0, len(train) - config.batch_size + 1, config.batch_size):
            idx = perm[start:start + config.batch_size]
            try:
                losses.append(un2clip_step(encoder, denoiser, images[idx], schedule,
                                           mode, state, noise_rng))
            except FinetuneError as e:
                raise type(e)(f"{e} (epoch {epoch})") from e
        records.append(snapshot(epoch, train_loss=float(np.mean(losses)) if losses else None))
    # leave the denoiser's grad-tracking on for any later caller
    denoiser.set_requires_grad(True)
    encoder.set_requires_grad(True)
    return records
