"""Seeded toy parallel corpora with planted phoneme durations.

Every random draw uses numpy's PCG64 seeded from ``SeedSequence([seed, ...])``:
stream ``[seed, 0]`` builds the phoneme inventory and ``[seed, 1, i]``
builds utterance ``i``, so utterances can be generated independently.

Channels per utterance (50 Hz unless noted):

* whisper: phoneme template per frame + N(0, sigma_w^2)
* NAM: whisper smoothed by a [1/4, 1/2, 1/4] time kernel + N(0, sigma_n^2)
* lip: 25 Hz; frame pairs of the clean template stream averaged + N(0, sigma_lip^2)
* mel: linear projection of the template stream to ``n_mels`` log-mel bins
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import Durations, PhonemeSeq
from .dsp import LOG_FLOOR, read_features, write_features

N_PHONEMES = 12
FEAT_DIM = 16
MIN_DISTANCE = 5.0
MEL_OFFSET = -4.0
MEL_SCALE = 0.25


@dataclass
class ToyInventory:
    templates: np.ndarray  # (P, D)
    mel_projection: np.ndarray  # (D, n_mels)
    mel_offset: float = MEL_OFFSET
    min_distance: float = MIN_DISTANCE

    @property
    def size(self) -> int:
        return self.templates.shape[0]

    @property
    def dim(self) -> int:
        return self.templates.shape[1]

    @property
    def n_mels(self) -> int:
        return self.mel_projection.shape[1]

    def mel_means(self) -> np.ndarray:
        """Planted per-phoneme log-mel vectors, shape (P, n_mels)."""
        return self.templates @ self.mel_projection + self.mel_offset


@dataclass
class ParallelUtterance:
    uid: str
    text: PhonemeSeq
    durations: Durations
    whisper_feats: np.ndarray
    nam_feats: np.ndarray
    lip_feats: np.ndarray
    seed: tuple[int, ...]

    @property
    def n_frames(self) -> int:
        return len(self.whisper_feats)

    def template_ids(self) -> np.ndarray:
        """Phoneme id of every 50 Hz frame."""
        return np.repeat(self.text.ids, self.durations.frames)

    def transcript(self) -> str:
        return ids_to_words(self.text.ids)


@dataclass
class Corpus:
    inventory: ToyInventory
    utterances: list[ParallelUtterance]
    params: dict

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]


def ids_to_words(ids) -> str:
    return " ".join(f"p{int(i)}" for i in ids)


def make_inventory(seed: int, n_phonemes: int = N_PHONEMES, dim: int = FEAT_DIM,
                   min_distance: float = MIN_DISTANCE, n_mels: int = 80) -> ToyInventory:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    for _ in range(1000):
        t = rng.normal(0.0, 2.0, size=(n_phonemes, dim))
        d = np.sqrt(((t[:, None] - t[None]) ** 2).sum(-1))
        if n_phonemes < 2 or d[np.triu_indices(n_phonemes, 1)].min() >= min_distance:
            break
    else:
        raise RuntimeError("could not draw templates with the requested separation")
    proj = rng.normal(0.0, MEL_SCALE, size=(dim, n_mels))
    return ToyInventory(t, proj, MEL_OFFSET, min_distance)


def _smooth(x: np.ndarray) -> np.ndarray:
    padded = np.concatenate([x[:1], x, x[-1:]])
    return 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]


def pair_average(x: np.ndarray) -> np.ndarray:
    """Average consecutive frame pairs (50 Hz -> 25 Hz); an odd tail stands alone."""
    n = len(x)
    half = -(-n // 2)
    out = np.empty((half,) + x.shape[1:])
    out[: n // 2] = 0.5 * (x[0 : n - n % 2 : 2] + x[1 : n - n % 2 : 2])
    if n % 2:
        out[-1] = x[-1]
    return out


def gen_utterance(inventory: ToyInventory, seed: int, index: int, min_len: int, max_len: int,
                  sigma_w: float, sigma_n: float, sigma_lip: float,
                  dur_min: int, dur_max: int) -> ParallelUtterance:
    key = (seed, 1, index)
    rng = np.random.default_rng(np.random.SeedSequence(list(key)))
    n = int(rng.integers(min_len, max_len + 1))
    ids = [int(rng.integers(inventory.size))]
    while len(ids) < n:
        # no immediate repeats: adjacent identical phones have no visible boundary
        nxt = int(rng.integers(inventory.size - 1))
        ids.append(nxt + (nxt >= ids[-1]))
    durs = rng.integers(dur_min, dur_max + 1, size=n)
    clean = np.repeat(inventory.templates[ids], durs, axis=0)
    whisper = clean + rng.normal(0.0, sigma_w, size=clean.shape)
    nam = _smooth(whisper) + rng.normal(0.0, sigma_n, size=clean.shape)
    lip_clean = pair_average(clean)
    lip = lip_clean + rng.normal(0.0, sigma_lip, size=lip_clean.shape)
    return ParallelUtterance(
        uid=f"utt{index:05d}",
        text=PhonemeSeq(ids, inventory.size),
        durations=Durations(durs, 50.0),
        whisper_feats=whisper,
        nam_feats=nam,
        lip_feats=lip,
        seed=key,
    )


def gen_corpus(seed: int = 7, n_utts: int = 50, min_len: int = 10, max_len: int = 16,
               sigma_w: float = 0.5, sigma_n: float = 1.5, sigma_lip: float | None = None,
               dur_min: int = 5, dur_max: int = 9, n_phonemes: int = N_PHONEMES,
               dim: int = FEAT_DIM, n_mels: int = 80) -> Corpus:
    if not sigma_n > sigma_w > 0:
        raise ValueError(f"need sigma_n > sigma_w > 0, got sigma_n={sigma_n}, sigma_w={sigma_w}")
    if min_len < 1 or max_len < min_len:
        raise ValueError(f"invalid phoneme-count range [{min_len}, {max_len}]")
    if dur_min < 1 or dur_max < dur_min:
        raise ValueError(f"invalid duration range [{dur_min}, {dur_max}]")
    if n_utts < 0:
        raise ValueError("n_utts must be >= 0")
    sigma_lip = sigma_n if sigma_lip is None else sigma_lip
    inv = make_inventory(seed, n_phonemes, dim, n_mels=n_mels)
    utts = [
        gen_utterance(inv, seed, i, min_len, max_len, sigma_w, sigma_n, sigma_lip, dur_min, dur_max)
        for i in range(n_utts)
    ]
    params = dict(seed=seed, n_utts=n_utts, min_len=min_len, max_len=max_len, sigma_w=sigma_w,
                  sigma_n=sigma_n, sigma_lip=sigma_lip, dur_min=dur_min, dur_max=dur_max,
                  n_phonemes=n_phonemes, dim=dim, n_mels=n_mels)
    return Corpus(inv, utts, params)


def mel_from_utterance(utt: ParallelUtterance, inventory: ToyInventory, noise: float = 0.1) -> np.ndarray:
    """Target log-mel frames: projected clean template stream + N(0, noise^2).

    Values are kept at or above log(1e-5) so they remain valid log-mel entries.
    """
    rng = np.random.default_rng(np.random.SeedSequence(list(utt.seed) + [2]))
    base = inventory.mel_means()[utt.template_ids()]
    mel = base + (rng.normal(0.0, noise, size=base.shape) if noise > 0 else 0.0)
    return np.maximum(mel, np.log(LOG_FLOOR))


def nearest_template_accuracy(feats: np.ndarray, frame_ids: np.ndarray, templates: np.ndarray) -> float:
    d = ((feats[:, None, :] - templates[None]) ** 2).sum(-1)
    return float(np.mean(d.argmin(axis=1) == frame_ids))


# --- manifest I/O -----------------------------------------------------------------


def write_corpus(corpus: Corpus, out_dir, mel_noise: float = 0.1) -> Path:
    """Write NAMF feature files plus ``manifest.jsonl`` and ``inventory.npz``."""
    out = Path(out_dir)
    feat_dir = out / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    np.savez(out / "inventory.npz", templates=corpus.inventory.templates,
             mel_projection=corpus.inventory.mel_projection,
             mel_offset=corpus.inventory.mel_offset)
    lines = []
    for utt in corpus:
        rec = {"id": utt.uid, "text": [int(i) for i in utt.text.ids],
               "durations": [int(d) for d in utt.durations.frames], "frame_rate": 50.0,
               "n_frames": utt.n_frames, "inventory_size": utt.text.inventory_size,
               "seed": list(utt.seed)}
        mel = mel_from_utterance(utt, corpus.inventory, mel_noise)
        for name, mat in (("whisper", utt.whisper_feats), ("nam", utt.nam_feats),
                          ("lip", utt.lip_feats), ("mel", mel)):
            rel = f"feats/{utt.uid}.{name}.namf"
            write_features(out / rel, mat, n_mels=mat.shape[1])
            rec[name] = rel
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines))
    (out / "corpus.json").write_text(json.dumps(corpus.params, sort_keys=True, indent=1))
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    recs = []
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            rec["_root"] = str(path.parent)
            recs.append(rec)
    return recs


def load_channel(rec: dict, name: str) -> np.ndarray:
    mat, _ = read_features(Path(rec["_root"]) / rec[name])
    return mat


def load_inventory(out_dir) -> ToyInventory:
    z = np.load(Path(out_dir) / "inventory.npz")
    return ToyInventory(z["templates"], z["mel_projection"], float(z["mel_offset"]))
