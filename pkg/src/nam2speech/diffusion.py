"""Conditional DDPM over mel segments with classifier-free guidance.

Mel targets are standardised per bin before diffusion (see ``MelScaler``);
the network predicts the injected noise and is trained with an L1 loss.
Conditioning streams (lip at 25 Hz, NAM and phoneme text at 50 Hz) are
brought to the mel frame rate and concatenated per frame.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .align import Durations, length_regulate, upsample_durations
from .numerics import Tensor

log = logging.getLogger(__name__)

TIME_EMBED_DIM = 16
# guidance arithmetic runs on this dyadic grid so affine identities are exact
GUIDANCE_GRID = 2.0**-30
GUIDANCE_CLIP = 2.0**12


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    beta: np.ndarray  # beta[t-1] for t = 1..T

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ScheduleError("every beta must lie in (0, 1)")
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t: int) -> float:
        """alpha_bar at step t, with alpha_bar(0) = 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"t={t} outside [1, {self.T}]")


def make_schedule(T: int = 50, beta_start: float | None = None, beta_end: float | None = None,
                  shape: str = "linear") -> NoiseSchedule:
    """Linear beta schedule.

    Unset endpoints default to the 1000-step convention (1e-4 -> 0.02)
    rescaled by 1000 / T, so short chains still end near pure noise. The
    rescaled endpoints are capped at 0.5 to stay valid for very short chains.
    """
    if shape != "linear":
        raise ScheduleError(f"unsupported schedule shape {shape!r}")
    if T < 1:
        raise ScheduleError("T must be >= 1")
    scale = 1000.0 / T
    b1 = min(0.02 * scale, 0.5) if beta_end is None else beta_end
    b0 = min(1e-4 * scale, 0.5) if beta_start is None else beta_start
    if not 0 < b0 <= b1 < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {b0}, {b1}")
    return NoiseSchedule(np.linspace(b0, b1, T))


def forward_step(schedule: NoiseSchedule, x_prev, t: int, noise) -> np.ndarray:
    """One draw from q(x_t | x_{t-1})."""
    schedule.check_t(t)
    b = schedule.beta[t - 1]
    return np.sqrt(1.0 - b) * np.asarray(x_prev) + np.sqrt(b) * np.asarray(noise)


def forward_diffuse(schedule: NoiseSchedule, x0, t: int, noise) -> np.ndarray:
    """Closed-form marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    schedule.check_t(t)
    a = schedule.abar(t)
    return np.sqrt(a) * np.asarray(x0) + np.sqrt(1.0 - a) * np.asarray(noise)


def posterior_params(schedule: NoiseSchedule, x_t, x0, t: int) -> tuple[np.ndarray, float]:
    """Mean and variance of q(x_{t-1} | x_t, x0)."""
    schedule.check_t(t)
    a_t, a_prev = schedule.abar(t), schedule.abar(t - 1)
    b = schedule.beta[t - 1]
    mean = (np.sqrt(a_prev) * b * np.asarray(x0)
            + np.sqrt(schedule.alpha[t - 1]) * (1.0 - a_prev) * np.asarray(x_t)) / (1.0 - a_t)
    var = b * (1.0 - a_prev) / (1.0 - a_t)
    return mean, float(var)


def timestep_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# --- conditioning -------------------------------------------------------------------


@dataclass
class Conditioner:
    lip_stream: np.ndarray  # (ceil(T/2), d_lip) at 25 Hz
    nam_stream: np.ndarray  # (T, d_nam) at 50 Hz
    text_stream: np.ndarray | None = None  # (T, d_text), length-regulated

    def frames(self, n_frames: int | None = None) -> np.ndarray:
        """Per-frame concatenation [lip x2 | nam | text] at the mel rate."""
        T = len(self.nam_stream) if n_frames is None else n_frames
        lip_durs = upsample_durations(Durations(np.ones(len(self.lip_stream), dtype=np.int64), 25.0), 2)
        lip = length_regulate(self.lip_stream, lip_durs)[:T]
        if len(lip) < T or len(self.nam_stream) < T:
            raise ValueError(f"conditioning streams shorter than {T} frames")
        parts = [lip, self.nam_stream[:T]]
        if self.text_stream is not None:
            if len(self.text_stream) < T:
                raise ValueError(f"text stream shorter than {T} frames")
            parts.append(self.text_stream[:T])
        out = np.concatenate(parts, axis=1)
        expected = sum(p.shape[1] for p in parts)
        assert out.shape[1] == expected
        return out

    @property
    def dim(self) -> int:
        d = self.lip_stream.shape[1] + self.nam_stream.shape[1]
        return d + (0 if self.text_stream is None else self.text_stream.shape[1])


def text_embedding_table(n_phonemes: int, dim: int = 16, seed: int = 0) -> np.ndarray:
    """Fixed random phoneme embeddings used for the text conditioning stream."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    return rng.normal(0.0, 1.0, size=(n_phonemes, dim))


@dataclass
class MelScaler:
    mean: np.ndarray
    std: np.ndarray
    lo: np.ndarray  # per-bin x0 clamp range, in standardised units
    hi: np.ndarray

    @classmethod
    def fit(cls, mels: list[np.ndarray], floor: float = 1e-5) -> "MelScaler":
        """Per-bin standardisation; clamp range is [log floor, max_train + 1] in mel units."""
        allf = np.concatenate(mels, axis=0)
        mean = allf.mean(axis=0)
        std = np.maximum(allf.std(axis=0), 1e-3)
        lo = (np.log(floor) - mean) / std
        hi = (allf.max() + 1.0 - mean) / std
        return cls(mean, std, lo, hi)

    @property
    def clamp(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lo, self.hi

    def transform(self, mel):
        return (np.asarray(mel) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z) * self.std + self.mean


# --- denoiser ------------------------------------------------------------------------


@dataclass
class DenoiserConfig:
    n_mels: int = 80
    cond_dim: int = 48
    hidden: int = 64
    kernel: int = 3
    seed: int = 0


class DenoiserNet:
    """Convolutional noise predictor eps(x_t, t, c).

    conv(x_t | c) + proj(t) -> relu -> residual conv block -> conv, plus a
    time-gated per-bin skip from x_t (at large t the answer is nearly x_t).
    Items in a batch are packed along time, separated by zero gap rows that
    are re-zeroed after every layer so no information crosses items.
    """

    def __init__(self, config: DenoiserConfig):
        self.config = c = config
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 4]))
        cin = c.n_mels + c.cond_dim

        def w(*shape, fan_in):
            return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

        self.params = {
            "w_in": w(c.kernel, cin, c.hidden, fan_in=c.kernel * cin),
            "b_in": Tensor(np.zeros(c.hidden), requires_grad=True),
            "w_t": w(TIME_EMBED_DIM, c.hidden, fan_in=TIME_EMBED_DIM),
            "w_mid": w(c.kernel, c.hidden, c.hidden, fan_in=c.kernel * c.hidden),
            "b_mid": Tensor(np.zeros(c.hidden), requires_grad=True),
            "w_t2": w(TIME_EMBED_DIM, c.hidden, fan_in=TIME_EMBED_DIM),
            "w_out": Tensor(np.zeros((c.kernel, c.hidden, c.n_mels)), requires_grad=True),
            "b_out": Tensor(np.zeros(c.n_mels), requires_grad=True),
            "w_skip": Tensor(np.zeros((TIME_EMBED_DIM, c.n_mels)), requires_grad=True),
            "null": Tensor(rng.normal(0.0, 0.1, size=c.cond_dim), requires_grad=True),
        }
        self.null_uses = 0

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _pack(self, x: np.ndarray, t: np.ndarray, cond: np.ndarray | None, use_null: np.ndarray):
        B, L, _ = x.shape
        stride = L + 1
        rows = B * stride
        mask = np.zeros((rows, 1))
        xs = np.zeros((rows, x.shape[2]))
        temb = np.zeros((rows, TIME_EMBED_DIM))
        emb = timestep_embedding(t)
        cond_rows = np.zeros((rows, self.config.cond_dim))
        null_rows = np.zeros((rows, 1))
        for b in range(B):
            sl = slice(b * stride, b * stride + L)
            mask[sl] = 1.0
            xs[sl] = x[b]
            temb[sl] = emb[b]
            if use_null[b] or cond is None:
                null_rows[sl] = 1.0
            else:
                cond_rows[sl] = cond[b]
        return xs, temb, cond_rows, null_rows, mask

    def forward(self, x, t, cond=None, use_null=None) -> Tensor:
        """x: (B, L, n_mels); t: (B,); cond: (B, L, cond_dim) or None -> packed eps Tensor."""
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        B, L, M = x.shape
        t = np.broadcast_to(np.asarray(t), (B,))
        use_null = np.zeros(B, dtype=bool) if use_null is None else np.asarray(use_null, dtype=bool)
        if cond is None:
            use_null = np.ones(B, dtype=bool)
        self.null_uses += int(use_null.sum())
        xs, temb, cond_rows, null_rows, mask = self._pack(x, t, cond, use_null)
        rows, H = xs.shape[0], self.config.hidden
        if self.config.cond_dim:
            null_part = nx.matmul(Tensor(null_rows), nx.reshape(p["null"], (1, -1)))
            c_in = nx.add(Tensor(cond_rows), null_part)
            h_in = nx.concat([Tensor(xs), c_in], axis=1)
        else:
            h_in = Tensor(xs)
        mask_h = Tensor(np.repeat(mask, H, axis=1))
        te = Tensor(temb)
        h = nx.conv1d(h_in, p["w_in"], p["b_in"])
        h = nx.mul(nx.relu(nx.add(h, nx.matmul(te, p["w_t"]))), mask_h)
        r = nx.conv1d(h, p["w_mid"], p["b_mid"])
        r = nx.mul(nx.relu(nx.add(r, nx.matmul(te, p["w_t2"]))), mask_h)
        h = nx.add(h, r)
        out = nx.conv1d(h, p["w_out"], p["b_out"])
        out = nx.add(out, nx.mul(Tensor(xs), nx.matmul(te, p["w_skip"])))
        return nx.mul(out, Tensor(np.repeat(mask, M, axis=1)))

    def unpack(self, packed: np.ndarray, B: int, L: int) -> np.ndarray:
        return packed.reshape(B, L + 1, -1)[:, :L]

    def predict_eps(self, x_t, t, cond=None) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        B, L, _ = x_t.shape
        return self.unpack(self.forward(x_t, t, cond).data, B, L)

    # checkpointing

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"{k}: checkpoint shape {v.shape} != model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


def _pack_target(noise: np.ndarray) -> np.ndarray:
    B, L, M = noise.shape
    out = np.zeros((B, L + 1, M))
    out[:, :L] = noise
    return out.reshape(B * (L + 1), M)


@dataclass
class TrainState:
    model: DenoiserNet
    schedule: NoiseSchedule
    optimizer: object
    rng: np.random.Generator
    history: list[float] = field(default_factory=list)


def train_step(state: TrainState, x0_batch, cond_batch, drop_prob: float = 0.1) -> float:
    """One optimisation step on a batch of equal-length standardised mel segments."""
    x0 = np.asarray(x0_batch, dtype=np.float64)
    if x0.ndim != 3 or len(x0) == 0:
        raise ValueError("x0_batch must be a non-empty (B, L, n_mels) array")
    B, L, M = x0.shape
    rng = state.rng
    t = rng.integers(1, state.schedule.T + 1, size=B)
    noise = rng.normal(size=x0.shape)
    abar = state.schedule.alpha_bar[t - 1][:, None, None]
    x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise
    drop = rng.random(B) < drop_prob
    pred = state.model.forward(x_t, t, cond_batch, use_null=drop)
    diff = nx.abs_(nx.sub(pred, Tensor(_pack_target(noise))))
    loss = nx.mul(nx.sum_(diff), 1.0 / (B * L * M))
    grads = nx.backward(loss)
    state.optimizer.step(grads)
    value = loss.item()
    state.history.append(value)
    return value


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, -GUIDANCE_CLIP, GUIDANCE_CLIP) / GUIDANCE_GRID) * GUIDANCE_GRID


def cfg_predict(model, x_t, t, cond, w: float) -> np.ndarray:
    """Guided noise estimate eps_u + w (eps_c - eps_u).

    Both predictions are snapped to a 2^-30 grid first; for guidance scales
    with few fractional bits every operation below is then exact, so w=0
    and w=1 reproduce the unconditional/conditional outputs bit for bit.
    """
    if w < 0:
        raise ValueError("guidance scale must be >= 0")
    eps_c = _quantize(model.predict_eps(x_t, t, cond))
    eps_u = _quantize(model.predict_eps(x_t, t, None))
    return eps_u + w * (eps_c - eps_u)


def sample(model, cond, schedule: NoiseSchedule, w: float = 1.5, seed: int = 0,
           shape: tuple[int, ...] | None = None, clamp: tuple[float, float] | None = None,
           variance: str = "beta") -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    ``cond`` is (B, L, cond_dim) (or None for unconditional models, with
    ``shape`` giving (B, L, n_mels)). At every step the x0 estimate implied
    by the guided noise prediction is clamped to ``clamp`` and plugged into
    the posterior mean. ``variance`` selects the step noise: "beta" uses
    beta_t, "posterior" uses the posterior variance of q(x_{t-1}|x_t, x0).
    """
    if variance not in ("beta", "posterior"):
        raise ValueError(f"unknown variance choice {variance!r}")
    if shape is None:
        cond_arr = np.asarray(cond)
        shape = cond_arr.shape[:2] + (model.config.n_mels,)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    for t in range(schedule.T, 0, -1):
        a = schedule.abar(t)
        eps = cfg_predict(model, x, np.full(shape[0], t), cond, w)
        x0_hat = (x - np.sqrt(1.0 - a) * eps) / np.sqrt(a)
        if clamp is not None:
            x0_hat = np.clip(x0_hat, clamp[0], clamp[1])
        mean, post_var = posterior_params(schedule, x, x0_hat, t)
        var = post_var if variance == "posterior" else (schedule.beta[t - 1] if t > 1 else 0.0)
        x = mean + np.sqrt(var) * rng.normal(size=shape) if t > 1 else mean
    return x


# --- high-level helpers ----------------------------------------------------------------


def build_condition(lip, nam, text_ids, durations, table: np.ndarray) -> np.ndarray:
    """Frame-level conditioning [lip x2 | nam | text] for one utterance."""
    text = length_regulate(table[np.asarray(text_ids)], durations)
    return Conditioner(np.asarray(lip), np.asarray(nam), text).frames()


def train_diffusion(mels: list[np.ndarray], conds: list[np.ndarray], steps: int = 1000, batch: int = 16,
                    crop: int = 50, lr: float = 2e-3, seed: int = 0, drop_prob: float = 0.1,
                    T: int = 50, hidden: int = 64, beta_start: float | None = None,
                    beta_end: float | None = None) -> tuple[DenoiserNet, MelScaler, TrainState]:
    """Train a conditional denoiser on random fixed-length crops of standardised mels."""
    if len(mels) != len(conds) or not mels:
        raise ValueError("need equally many (non-zero) mel targets and conditioning streams")
    for i, (m, c) in enumerate(zip(mels, conds)):
        if len(m) != len(c):
            raise ValueError(f"item {i}: {len(m)} mel frames vs {len(c)} conditioning frames")
    crop = min(crop, min(len(m) for m in mels))
    scaler = MelScaler.fit(mels)
    z = [scaler.transform(m) for m in mels]
    model = DenoiserNet(DenoiserConfig(n_mels=mels[0].shape[1], cond_dim=conds[0].shape[1],
                                       hidden=hidden, seed=seed))
    schedule = make_schedule(T, beta_start, beta_end)
    state = TrainState(model, schedule, nx.Adam(model.parameters(), lr=lr), np.random.default_rng(seed))
    pick = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    for _ in range(steps):
        idx = pick.integers(0, len(z), batch)
        starts = [pick.integers(0, len(z[i]) - crop + 1) for i in idx]
        xb = np.stack([z[i][s : s + crop] for i, s in zip(idx, starts)])
        cb = np.stack([conds[i][s : s + crop] for i, s in zip(idx, starts)])
        train_step(state, xb, cb, drop_prob)
    return model, scaler, state


def sample_mel(model: DenoiserNet, scaler: MelScaler, schedule: NoiseSchedule, cond: np.ndarray,
               w: float = 1.5, seed: int = 0) -> np.ndarray:
    """One full-length mel sample (in mel units) for a (T, cond_dim) conditioning stream."""
    z = sample(model, np.asarray(cond)[None], schedule, w=w, seed=seed, clamp=scaler.clamp)
    return scaler.inverse(z[0])


def save_diffusion(path, model: DenoiserNet, scaler: MelScaler, schedule: NoiseSchedule,
                   meta: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    tensors.update({"_scaler.mean": scaler.mean, "_scaler.std": scaler.std,
                    "_scaler.lo": scaler.lo, "_scaler.hi": scaler.hi, "_schedule.beta": schedule.beta})
    info = {"kind": "diffusion", "config": asdict(model.config)}
    info.update(meta or {})
    nx.save_checkpoint(path, tensors, info)


def load_diffusion(path) -> tuple[DenoiserNet, MelScaler, NoiseSchedule, dict]:
    tensors, meta = nx.load_checkpoint(path)
    if meta.get("kind") != "diffusion":
        raise ValueError(f"{path}: not a diffusion checkpoint (kind={meta.get('kind')!r})")
    model = DenoiserNet(DenoiserConfig(**meta["config"]))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("_")})
    scaler = MelScaler(tensors["_scaler.mean"], tensors["_scaler.std"], tensors["_scaler.lo"],
                       tensors["_scaler.hi"])
    return model, scaler, NoiseSchedule(tensors["_schedule.beta"]), meta
