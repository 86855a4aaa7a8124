"""Pixel-space denoising diffusion with an image-embedding-conditioned denoiser.

The denoiser is a small 3-resolution convolutional encoder-decoder with
skip connections. Conditioning = sinusoidal timestep embedding plus a
linear projection of the 64-dim encoder embedding, projected and added
per channel at every resolution. Images live in [-1, 1] inside the
diffusion process and in [0, 1] at the module boundary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import AdamWState, adamw_step
from .rng import RngStream
from .tensor import Tensor, backward, sinusoidal_embedding

COND_DIM = 64
TIME_DIM = 64
BASE_CH = 16


class DiffusionError(Exception):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Arrays are 0-indexed internally; timestep t uses index t-1."""
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def digest(self):
        h = hashlib.sha256()
        h.update(np.int64(self.T).tobytes())
        h.update(self.beta.astype(np.float64).tobytes())
        return h.hexdigest()


def make_schedule(T, beta_min, beta_max):
    if T < 1:
        raise DiffusionError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise DiffusionError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(T=T, beta=beta.astype(np.float32),
                             alpha=alpha.astype(np.float32),
                             alpha_bar=alpha_bar.astype(np.float32))


def check_terminal_noise(schedule, limit=0.05):
    """Construction-time invariant: the forward process must end near pure noise."""
    terminal = float(schedule.alpha_bar[-1])
    if terminal >= limit:
        raise DiffusionError(
            f"alpha_bar[T]={terminal:.4f} >= {limit}; schedule does not reach noise")


def forward_diffuse(x0, t, eps, schedule):
    """Closed-form x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; no RNG inside."""
    x0 = np.asarray(x0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if eps.shape != x0.shape:
        raise DiffusionError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise DiffusionError(f"timestep out of range 1..{schedule.T}: {t}")
    ab = schedule.alpha_bar[t_arr - 1]
    if t_arr.ndim > 0:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predicted_x0(x_t, eps_hat, t, schedule):
    """Algebraic inversion of forward_diffuse given a noise estimate."""
    ab = schedule.alpha_bar[np.asarray(t) - 1]
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


class Denoiser:
    """Conditional noise-prediction network over (3, 32, 32) inputs."""

    # (name, in_ch, out_ch) for each conv; cond baked in after every conv but the last
    _CONVS = (
        ("c_in", 3, BASE_CH),
        ("c_d1", BASE_CH, 2 * BASE_CH),
        ("c_d2", 2 * BASE_CH, 2 * BASE_CH),
        ("c_mid", 2 * BASE_CH, 2 * BASE_CH),
        ("c_u1", 4 * BASE_CH, 2 * BASE_CH),
        ("c_u0", 3 * BASE_CH, BASE_CH),
        ("c_out", BASE_CH, 3),
    )

    def __init__(self, seed=0):
        rng = RngStream(seed, ("denoiser-init",))
        self.params = {}
        p = self.params
        for name, cin, cout in self._CONVS:
            fan = cin * 9
            p[f"{name}.w"] = Tensor(rng.split(name).normal((cout, cin, 3, 3)) / np.sqrt(fan),
                                    requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros((1, cout, 1, 1), dtype=np.float32),
                                    requires_grad=True)
        p["cond.w"] = Tensor(rng.split("cond").normal((COND_DIM, TIME_DIM)) / np.sqrt(COND_DIM),
                             requires_grad=True)
        p["cond.b"] = Tensor(np.zeros(TIME_DIM, dtype=np.float32), requires_grad=True)
        for name, _, cout in self._CONVS[:-1]:
            p[f"{name}.cw"] = Tensor(
                rng.split(name + "-cond").normal((TIME_DIM, cout)) / np.sqrt(TIME_DIM),
                requires_grad=True)
            p[f"{name}.cb"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def named_params(self):
        return [(n, self.params[n]) for n in sorted(self.params)]

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise DiffusionError("denoiser state dict key mismatch")
        for k, v in state.items():
            self.params[k].data = np.asarray(v, dtype=np.float32).reshape(self.params[k].data.shape)

    def set_requires_grad(self, flag):
        for p in self.params.values():
            p.requires_grad = flag

    def checksum(self):
        h = hashlib.sha256()
        for n, p in self.named_params():
            h.update(n.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def _cond_vector(self, t, cond):
        f = T.silu(T.add(T.matmul(cond, self.params["cond.w"]), self.params["cond.b"]))
        return T.add(f, Tensor(sinusoidal_embedding(t, TIME_DIM)))

    def _conv(self, name, x, f=None, act=True):
        p = self.params
        y = T.add(T.conv2d(x, p[f"{name}.w"], padding="same"), p[f"{name}.b"])
        if f is not None:
            n = f.data.shape[0]
            cbias = T.add(T.matmul(f, p[f"{name}.cw"]), p[f"{name}.cb"])
            y = T.add(y, T.reshape(cbias, (n, y.data.shape[1], 1, 1)))
        return T.silu(y) if act else y

    def forward(self, x_t, t, cond):
        """x_t: (N, 3, 32, 32) Tensor, t: (N,) ints, cond: (N, 64) Tensor."""
        if not isinstance(x_t, Tensor):
            x_t = Tensor(x_t)
        if not isinstance(cond, Tensor):
            cond = Tensor(cond)
        if x_t.data.ndim != 4 or x_t.data.shape[1] != 3:
            raise DiffusionError(f"expected (N, 3, H, W) input, got {x_t.data.shape}")
        f = self._cond_vector(t, cond)
        h0 = self._conv("c_in", x_t, f)                               # 32x32, 16
        h1 = self._conv("c_d1", T.avg_pool2(h0), f)                   # 16x16, 32
        h2 = self._conv("c_d2", T.avg_pool2(h1), f)                   # 8x8, 32
        m = self._conv("c_mid", h2, f)                                # 8x8, 32
        u1 = self._conv("c_u1", T.concat([T.upsample2(m), h1], axis=1), f)   # 16x16, 32
        u0 = self._conv("c_u0", T.concat([T.upsample2(u1), h0], axis=1), f)  # 32x32, 16
        return self._conv("c_out", u0, act=False)                     # 32x32, 3


def to_model_space(images):
    """(N, 32, 32, 3) in [0, 1] -> (N, 3, 32, 32) in [-1, 1]."""
    x = np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)
    return 2.0 * x - 1.0


def from_model_space(x):
    img = (np.asarray(x, dtype=np.float32) + 1.0) / 2.0
    return np.clip(img, 0.0, 1.0).transpose(0, 2, 3, 1)


def unclip_train_step(denoiser, cond_embeddings, images, schedule, state, rng):
    """One conditional denoising step; only denoiser parameters move.

    `cond_embeddings` must be plain arrays (the frozen encoder's outputs),
    so no gradient can reach the encoder by construction.
    """
    cond = np.asarray(cond_embeddings, dtype=np.float32)
    n = len(images)
    t = np.asarray(rng.integers(1, schedule.T + 1, (n,)))
    eps = rng.normal((n, 3, 32, 32))
    x0 = to_model_space(images)
    x_t = forward_diffuse(x0, t, eps, schedule)
    pred = denoiser.forward(Tensor(x_t), t, Tensor(cond))
    diff = T.sub(pred, Tensor(eps))
    loss = T.tmean(T.mul(diff, diff))
    lv = loss.item()
    if not np.isfinite(lv):
        raise DiffusionError("non-finite diffusion loss")
    names = [n_ for n_, _ in denoiser.named_params()]
    params = [denoiser.params[n_] for n_ in names]
    for p in params:
        p.zero_grad()
    backward(loss, params=params)
    adamw_step(params, [p.grad for p in params], state)
    return lv


@dataclass(frozen=True)
class UnclipTrainConfig:
    steps: int = 1200
    batch_size: int = 32
    learning_rate: float = 2e-3
    weight_decay: float = 0.0


def train_unclip(encoder, corpus, schedule, config, seed):
    """Trains a fresh denoiser against the frozen encoder; returns (denoiser, curve)."""
    check_terminal_noise(schedule)
    train = corpus.split("train")
    if not train:
        raise DiffusionError("corpus has no train split")
    denoiser = Denoiser(seed=seed)
    names = [n for n, _ in denoiser.named_params()]
    params = [denoiser.params[n] for n in names]
    state = AdamWState(params, learning_rate=config.learning_rate,
                       weight_decay=config.weight_decay)
    state.set_names(names)

    images = np.stack([s.image for s in train])
    cond_all = encoder.encode_images(images)
    batch_rng = RngStream(seed, ("unclip-train", "batch"))
    noise_rng = RngStream(seed, ("unclip-train", "noise"))
    curve = []
    for step in range(config.steps):
        idx = batch_rng.choice(len(train), size=min(config.batch_size, len(train)),
                               replace=False)
        try:
            lv = unclip_train_step(denoiser, cond_all[idx], images[idx], schedule,
                                   state, noise_rng)
        except DiffusionError as e:
            raise DiffusionError(f"{e} at step {step}") from e
        curve.append(lv)
    return denoiser, curve


def sample(denoiser, cond, schedule, seed, mode="ancestral"):
    """Reverse process from pure noise; returns a (32, 32, 3) image in [0, 1].

    Ancestral mode is the stochastic posterior update; deterministic mode is
    its zero-added-noise variant. Identical (cond, seed, mode) give
    bit-identical outputs.
    """
    if mode not in ("ancestral", "deterministic"):
        raise DiffusionError(f"unknown sampling mode {mode!r}")
    cond = np.asarray(cond, dtype=np.float32).reshape(1, COND_DIM)
    rng = RngStream(seed, ("sample",))
    x = rng.normal((1, 3, 32, 32))

    flags = [p.requires_grad for _, p in denoiser.named_params()]
    denoiser.set_requires_grad(False)
    try:
        for t in range(schedule.T, 0, -1):
            eps_hat = denoiser.forward(Tensor(x), np.array([t]), Tensor(cond)).data
            ab_t = schedule.alpha_bar[t - 1]
            ab_prev = schedule.alpha_bar[t - 2] if t > 1 else np.float32(1.0)
            if mode == "ancestral":
                alpha_t = schedule.alpha[t - 1]
                beta_t = schedule.beta[t - 1]
                mean = (x - beta_t / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(alpha_t)
                if t > 1:
                    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
                    x = mean + np.sqrt(var) * rng.normal(x.shape)
                else:
                    x = mean
            else:
                x0_hat = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
                x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    finally:
        for (_, p), fl in zip(denoiser.named_params(), flags):
            p.requires_grad = fl
    return from_model_space(x)[0]
