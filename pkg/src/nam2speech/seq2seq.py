"""Non-autoregressive NAM-to-speech mapper built from FFT blocks.

An FFT block is two residual multi-head self-attention sub-layers followed
by a residual two-convolution feed-forward sub-layer, each post-normalised
with layer norm. The encoder feeds an auxiliary CTC head; the decoder
regresses frame-aligned target embeddings (MSE) and can also emit unit
logits for cross-entropy training.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .ctc import ctc_loss, ctc_loss_op, min_frames
from .dsp import AudioBuffer, MelSpectrogram, griffin_lim, mel_spectrogram
from .numerics import Tensor

log = logging.getLogger(__name__)


@dataclass
class FftBlockConfig:
    model_dim: int = 32
    heads: int = 2
    kernel: int = 3
    conv_hidden: int = 64

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")


@dataclass
class Seq2SeqConfig:
    input_dim: int = 16
    output_dim: int = 80
    vocab_size: int = 12  # CTC labels 1..V, blank 0
    n_units: int = 0  # 0 disables the unit head
    encoder_layers: int = 2
    decoder_layers: int = 2
    block: FftBlockConfig = field(default_factory=FftBlockConfig)
    seed: int = 0

    @classmethod
    def full_scale(cls, **kw) -> "Seq2SeqConfig":
        """Six FFT blocks per stack, 100 units."""
        kw.setdefault("n_units", 100)
        return cls(encoder_layers=6, decoder_layers=6, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Seq2SeqConfig":
        d = dict(d)
        d["block"] = FftBlockConfig(**d["block"])
        return cls(**d)


def positional_encoding(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def scaled_dot_attention(queries, keys, values, heads: int) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated.

    queries: (Tq, D); keys: (Tk, D); values: (Tk, Dv); D and Dv divisible by heads.
    """
    q, k, v = nx.as_tensor(queries), nx.as_tensor(keys), nx.as_tensor(values)
    if q.shape[1] != k.shape[1]:
        raise nx.DimensionError(f"attention: query/key dim mismatch {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise nx.DimensionError(f"attention: key/value length mismatch {k.shape} vs {v.shape}")
    if q.shape[1] % heads or v.shape[1] % heads:
        raise nx.DimensionError(f"attention: dims {q.shape[1]}/{v.shape[1]} not divisible by {heads} heads")
    dh, dv = q.shape[1] // heads, v.shape[1] // heads
    scale = 1.0 / np.sqrt(dh)
    outs = []
    for h in range(heads):
        qh = q[:, h * dh : (h + 1) * dh]
        kh = k[:, h * dh : (h + 1) * dh]
        vh = v[:, h * dv : (h + 1) * dv]
        weights = nx.softmax(nx.mul(nx.matmul(qh, nx.transpose(kh)), scale), axis=-1)
        outs.append(nx.matmul(weights, vh))
    return outs[0] if heads == 1 else nx.concat(outs, axis=1)


def attention_weights(queries, keys, heads: int) -> np.ndarray:
    """(heads, Tq, Tk) attention probabilities, for inspection."""
    q, k = np.asarray(queries), np.asarray(keys)
    dh = q.shape[1] // heads
    out = []
    for h in range(heads):
        s = q[:, h * dh : (h + 1) * dh] @ k[:, h * dh : (h + 1) * dh].T / np.sqrt(dh)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        out.append(s / s.sum(axis=1, keepdims=True))
    return np.stack(out)


class FftBlock:
    def __init__(self, config: FftBlockConfig, rng: np.random.Generator, prefix: str):
        self.config = c = config
        D, H, K = c.model_dim, c.conv_hidden, c.kernel

        def w(*shape, fan_in):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True)

        p = {}
        for a in ("att1", "att2"):
            for m in ("q", "k", "v", "o"):
                p[f"{a}.w{m}"] = w(D, D, fan_in=D)
                p[f"{a}.b{m}"] = zeros(D)
        for n in ("ln1", "ln2", "ln3"):
            p[f"{n}.g"] = ones(D)
            p[f"{n}.b"] = zeros(D)
        p["conv1.w"] = w(K, D, H, fan_in=K * D)
        p["conv1.b"] = zeros(H)
        p["conv2.w"] = w(K, H, D, fan_in=K * H)
        p["conv2.b"] = zeros(D)
        self.params = {f"{prefix}.{k}": v for k, v in p.items()}
        self._p = p

    def _mha(self, x: Tensor, name: str) -> Tensor:
        p = self._p
        q = nx.add_bias(nx.matmul(x, p[f"{name}.wq"]), p[f"{name}.bq"])
        k = nx.add_bias(nx.matmul(x, p[f"{name}.wk"]), p[f"{name}.bk"])
        v = nx.add_bias(nx.matmul(x, p[f"{name}.wv"]), p[f"{name}.bv"])
        a = scaled_dot_attention(q, k, v, self.config.heads)
        return nx.add_bias(nx.matmul(a, p[f"{name}.wo"]), p[f"{name}.bo"])

    def __call__(self, x: Tensor) -> Tensor:
        p = self._p
        x = nx.layer_norm(nx.add(x, self._mha(x, "att1")), p["ln1.g"], p["ln1.b"])
        x = nx.layer_norm(nx.add(x, self._mha(x, "att2")), p["ln2.g"], p["ln2.b"])
        h = nx.relu(nx.conv1d(x, p["conv1.w"], p["conv1.b"]))
        h = nx.conv1d(h, p["conv2.w"], p["conv2.b"])
        return nx.layer_norm(nx.add(x, h), p["ln3.g"], p["ln3.b"])


class Seq2SeqModel:
    def __init__(self, config: Seq2SeqConfig):
        self.config = c = config
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 5]))
        D = c.block.model_dim

        def w(*shape, fan_in):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "in.w": w(c.input_dim, D, fan_in=c.input_dim),
            "in.b": Tensor(np.zeros(D), requires_grad=True),
        }
        self.encoder = [FftBlock(c.block, rng, f"enc{i}") for i in range(c.encoder_layers)]
        self.decoder = [FftBlock(c.block, rng, f"dec{i}") for i in range(c.decoder_layers)]
        for blk in self.encoder + self.decoder:
            self.params.update(blk.params)
        self.params["ctc.w"] = w(D, c.vocab_size + 1, fan_in=D)
        self.params["ctc.b"] = Tensor(np.zeros(c.vocab_size + 1), requires_grad=True)
        self.params["out.w"] = w(D, c.output_dim, fan_in=D)
        self.params["out.b"] = Tensor(np.zeros(c.output_dim), requires_grad=True)
        if c.n_units:
            self.params["unit.w"] = w(D, c.n_units, fan_in=D)
            self.params["unit.b"] = Tensor(np.zeros(c.n_units), requires_grad=True)
        self.trained = False
        # optional per-dim target standardisation, applied outside the graph
        self.target_mean: np.ndarray | None = None
        self.target_std: np.ndarray | None = None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # forward pieces

    def encode(self, features) -> Tensor:
        x = nx.as_tensor(features)
        if x.data.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise nx.DimensionError(f"encode: expected (T, {self.config.input_dim}), got {x.shape}")
        D = self.config.block.model_dim
        h = nx.add_bias(nx.matmul(x, self.params["in.w"]), self.params["in.b"])
        h = nx.add(h, Tensor(positional_encoding(len(x), D)))
        for blk in self.encoder:
            h = blk(h)
        return h

    def decoder_hidden(self, latents) -> Tensor:
        h = nx.as_tensor(latents)
        D = self.config.block.model_dim
        if h.data.ndim != 2 or h.shape[1] != D:
            raise nx.DimensionError(f"decode: expected (T, {D}), got {h.shape}")
        h = nx.add(h, Tensor(positional_encoding(len(h), D)))
        for blk in self.decoder:
            h = blk(h)
        return h

    def decode(self, latents) -> Tensor:
        h = self.decoder_hidden(latents)
        return nx.add_bias(nx.matmul(h, self.params["out.w"]), self.params["out.b"])

    def ctc_log_probs(self, latents) -> Tensor:
        logits = nx.add_bias(nx.matmul(nx.as_tensor(latents), self.params["ctc.w"]), self.params["ctc.b"])
        return nx.log_softmax(logits, axis=-1)

    def predict_units(self, latents) -> Tensor:
        """(T, K) unit logits from the decoder stack."""
        if not self.config.n_units:
            raise ValueError("model has no unit head (n_units=0)")
        h = self.decoder_hidden(latents)
        return nx.add_bias(nx.matmul(h, self.params["unit.w"]), self.params["unit.b"])

    def infer(self, features) -> np.ndarray:
        """Encode and decode one utterance; returns de-standardised outputs."""
        out = self.decode(self.encode(np.asarray(features, dtype=np.float64))).data
        if self.target_mean is not None:
            out = out * self.target_std + self.target_mean
        return out

    # checkpoint helpers

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.params.items()}
        if self.target_mean is not None:
            state["_target.mean"] = self.target_mean
            state["_target.std"] = self.target_std
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k == "_target.mean":
                self.target_mean = np.array(v)
            elif k == "_target.std":
                self.target_std = np.array(v)
            else:
                if self.params[k].shape != v.shape:
                    raise ValueError(f"{k}: checkpoint shape {v.shape} != model {self.params[k].shape}")
                self.params[k].data = np.array(v, dtype=np.float64)


def unit_cross_entropy(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64)
    lp = nx.log_softmax(logits, axis=-1)
    picked = lp[np.arange(len(targets)), targets]
    return nx.neg(nx.mean(picked))


@dataclass
class TrainExample:
    features: np.ndarray
    targets: np.ndarray
    labels: list[int]
    units: np.ndarray | None = None


def example_loss(model: Seq2SeqModel, ex: TrainExample, lambda_ctc: float, lambda_unit: float = 0.0):
    """(total, mse, ctc-per-frame) for one utterance; targets already standardised.

    The CTC term is dropped (and reported as None) when the label sequence
    cannot fit in the available frames.
    """
    if len(ex.features) != len(ex.targets):
        raise ValueError(f"misaligned lengths: {len(ex.features)} input frames vs {len(ex.targets)} targets")
    latents = model.encode(ex.features)
    mse = nx.mse(model.decode(latents), Tensor(ex.targets))
    total = mse
    ctc_val = 0.0
    if lambda_ctc > 0 and min_frames(ex.labels) > len(ex.features):
        ctc_val = None
    elif lambda_ctc > 0:
        ctc = nx.mul(ctc_loss_op(model.ctc_log_probs(latents), ex.labels), 1.0 / len(ex.features))
        ctc_val = ctc.item()
        total = nx.add(total, nx.mul(ctc, lambda_ctc))
    if lambda_unit > 0 and ex.units is not None:
        ce = unit_cross_entropy(model.predict_units(latents), ex.units)
        total = nx.add(total, nx.mul(ce, lambda_unit))
    return total, mse.item(), ctc_val


def train(model: Seq2SeqModel, corpus: list[TrainExample], lambda_ctc: float = 1.0, epochs: int = 10,
          seed: int = 0, lr: float = 1e-3, batch_size: int = 16, optimizer: str = "adam",
          lambda_unit: float = 0.0, standardize: bool = True) -> list[dict]:
    """Minibatch training; returns one record per epoch (mean total/mse/ctc).

    Utterances with an infeasible CTC alignment train on MSE alone; each
    record counts them under ``ctc_skipped``.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    for i, ex in enumerate(corpus):
        if len(ex.features) != len(ex.targets):
            raise ValueError(f"example {i}: misaligned lengths {len(ex.features)} vs {len(ex.targets)}")
    if standardize:
        allt = np.concatenate([ex.targets for ex in corpus])
        model.target_mean = allt.mean(axis=0)
        model.target_std = np.maximum(allt.std(axis=0), 1e-3)
        corpus = [TrainExample(ex.features, (ex.targets - model.target_mean) / model.target_std,
                               ex.labels, ex.units) for ex in corpus]
    opt = nx.make_optimizer(optimizer, model.parameters(), lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        totals, mses, ctcs = [], [], []
        skipped = 0
        for start in range(0, len(order), batch_size):
            batch = [corpus[i] for i in order[start : start + batch_size]]
            losses = []
            for ex in batch:
                total, m, c = example_loss(model, ex, lambda_ctc, lambda_unit)
                losses.append(total)
                mses.append(m)
                if c is None:
                    skipped += 1
                else:
                    ctcs.append(c)
            loss = nx.mul(losses[0] if len(losses) == 1 else _sum(losses), 1.0 / len(losses))
            totals.append(loss.item())
            opt.step(nx.backward(loss))
        rec = {"epoch": epoch + 1, "loss": float(np.mean(totals)), "mse": float(np.mean(mses)),
               "ctc": float(np.mean(ctcs)) if ctcs else 0.0, "ctc_skipped": skipped}
        if skipped:
            log.warning("epoch %d: %d utterances with infeasible CTC alignment", epoch + 1, skipped)
        history.append(rec)
        log.debug("epoch %d loss %.4f mse %.4f ctc %.4f", epoch + 1, rec["loss"], rec["mse"], rec["ctc"])
    model.trained = True
    return history


def _sum(ts: list[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = nx.add(acc, t)
    return acc


def shuffled_control(model: Seq2SeqModel, seed: int = 0) -> Seq2SeqModel:
    """Copy of ``model`` with every parameter tensor's entries randomly permuted."""
    rng = np.random.default_rng(seed)
    ctrl = Seq2SeqModel(model.config)
    state = model.state_dict()
    for k, v in state.items():
        if not k.startswith("_"):
            state[k] = rng.permutation(v.reshape(-1)).reshape(v.shape)
    ctrl.load_state_dict(state)
    ctrl.trained = True
    return ctrl


def fit_probe_head(model: Seq2SeqModel, corpus: list[TrainExample], epochs: int = 100, lr: float = 1e-2,
                   seed: int = 0) -> tuple[Tensor, Tensor]:
    """Train a fresh CTC head on frozen encoder latents; returns (w, b)."""
    latents = [model.encode(ex.features).data for ex in corpus]
    c = model.config
    rng = np.random.default_rng(seed)
    D = c.block.model_dim
    w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, c.vocab_size + 1)), requires_grad=True)
    b = Tensor(np.zeros(c.vocab_size + 1), requires_grad=True)
    opt = nx.Adam([w, b], lr=lr)
    for _ in range(epochs):
        losses = [nx.mul(ctc_loss_op(nx.log_softmax(nx.add_bias(nx.matmul(Tensor(h), w), b)), ex.labels),
                         1.0 / len(h)) for h, ex in zip(latents, corpus)]
        opt.step(nx.backward(nx.mul(_sum(losses), 1.0 / len(losses))))
    return w, b


def ctc_nll(model: Seq2SeqModel, corpus: list[TrainExample], head: tuple[Tensor, Tensor] | None = None) -> float:
    """Mean per-frame CTC NLL using the model's own head or a probe head."""
    vals = []
    for ex in corpus:
        h = model.encode(ex.features)
        if head is None:
            lp = model.ctc_log_probs(h).data
        else:
            lp = nx.log_softmax(nx.add_bias(nx.matmul(h, head[0]), head[1])).data
        vals.append(ctc_loss(lp, ex.labels) / len(ex.features))
    return float(np.mean(vals))


def convert_features(model: Seq2SeqModel, features, gl_iterations: int = 60, seed: int = 0):
    """NAM feature frames -> (predicted log-mel, waveform)."""
    if not model.trained:
        raise RuntimeError("convert needs a trained model")
    mel = model.infer(features)
    return mel, griffin_lim(MelSpectrogram(mel), iterations=gl_iterations, seed=seed)


def convert(model: Seq2SeqModel, nam_audio: AudioBuffer, gl_iterations: int = 60, seed: int = 0) -> AudioBuffer:
    """NAM waveform -> log-mel -> encoder/decoder -> Griffin-Lim waveform.

    The model's input_dim must equal the mel band count.
    """
    if not model.trained:
        raise RuntimeError("convert needs a trained model")
    feats = mel_spectrogram(nam_audio, n_mels=model.config.input_dim).frames
    _, audio = convert_features(model, feats, gl_iterations, seed)
    n = len(nam_audio.samples)
    samples = audio.samples[:n] if len(audio.samples) >= n else np.pad(audio.samples, (0, n - len(audio.samples)))
    return AudioBuffer(samples, audio.sample_rate)


def save_model(path, model: Seq2SeqModel, meta: dict | None = None) -> None:
    info = {"kind": "seq2seq", "config": model.config.to_dict(), "trained": model.trained}
    info.update(meta or {})
    nx.save_checkpoint(path, model.state_dict(), info)


def load_model(path) -> tuple[Seq2SeqModel, dict]:
    state, meta = nx.load_checkpoint(path)
    if meta.get("kind") != "seq2seq":
        raise ValueError(f"{path}: not a seq2seq checkpoint (kind={meta.get('kind')!r})")
    model = Seq2SeqModel(Seq2SeqConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    model.trained = bool(meta.get("trained", False))
    return model, meta
