"""Command-line pipeline: synthetic data -> alignment -> diffusion -> seq2seq -> conversion -> WER.

Every command writes its outputs plus ``run-<command>.json`` recording the
config hash, seed, input file hashes and wall time. Exit codes: 0 success,
2 contract/config violation, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import align as al
from . import diffusion as df
from . import dsp
from . import eval as ev
from . import seq2seq as s2
from . import synthdata as sd
from . import units as un

log = logging.getLogger("nam2speech")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 2, 3


class ConfigError(ValueError):
    pass


class InputError(OSError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 7
    # synthetic corpus
    n_utts: int = 50
    min_len: int = 10
    max_len: int = 16
    sigma_w: float = 0.5
    sigma_n: float = 1.5
    mel_noise: float = 0.1
    holdout: int = 10
    render_audio: bool = True
    # framing
    sample_rate: int = dsp.SAMPLE_RATE
    hop: int = dsp.HOP
    window: int = dsp.WINDOW
    n_mels: int = dsp.N_MELS
    gl_iterations: int = 32
    # alignment
    align_channel: str = "whisper"
    align_iterations: int = 10
    # diffusion
    T: int = 50
    beta_start: float = 0.0  # 0 selects the step-count-scaled default
    beta_end: float = 0.0
    w: float = 1.5
    drop_prob: float = 0.1
    diff_steps: int = 1000
    diff_batch: int = 16
    diff_crop: int = 50
    diff_lr: float = 2e-3
    diff_hidden: int = 64
    text_dim: int = 16
    # seq2seq
    s2s_target: str = "simulated"
    lambda_ctc: float = 1.0
    lambda_unit: float = 0.0
    s2s_epochs: int = 60
    s2s_lr: float = 1e-3
    s2s_batch: int = 16
    s2s_optimizer: str = "adam"
    model_dim: int = 32
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    # units / recogniser
    K: int = 100
    kmeans_iterations: int = 50
    min_run: int = 2

    def hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        if self.holdout < 0 or self.holdout >= max(self.n_utts, 1):
            raise ConfigError(f"holdout={self.holdout} must lie in [0, n_utts)")
        if self.align_channel not in ("whisper", "nam"):
            raise ConfigError(f"align_channel must be whisper or nam, got {self.align_channel!r}")
        if self.s2s_target not in ("simulated", "clean"):
            raise ConfigError(f"s2s_target must be simulated or clean, got {self.s2s_target!r}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.w < 0:
            raise ConfigError("w must be >= 0")
        if not 0 <= self.drop_prob <= 1:
            raise ConfigError("drop_prob must lie in [0, 1]")


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        return type(default)(raw.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_assignments(lines, source: str) -> dict:
    known = {f.name: f.default for f in dataclasses.fields(PipelineConfig)}
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, val, known[key])
    return out


def load_config(path=None, overrides=(), seed=None) -> PipelineConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"--config: file not found: {p}")
        values.update(parse_assignments(p.read_text().splitlines(), str(p)))
    values.update(parse_assignments(list(overrides), "--set"))
    if seed is not None:
        values["seed"] = seed
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg


# --- provenance ----------------------------------------------------------------------


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_record(out_dir: Path, command: str, cfg: PipelineConfig, inputs: dict, outputs: dict,
                     t0: float, extra: dict | None = None) -> Path:
    rec = {
        "command": command,
        "config_hash": cfg.hash(),
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "inputs": {k: {"path": str(v), "sha256": file_hash(v)} for k, v in inputs.items()},
        "outputs": {k: {"path": str(v), "sha256": file_hash(v)} for k, v in outputs.items()},
        "wall_time_s": round(time.time() - t0, 3),
    }
    rec.update(extra or {})
    path = out_dir / f"run-{command}.json"
    path.write_text(json.dumps(rec, indent=1, sort_keys=True))
    return path


def _need(path, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    p = Path(path).resolve()
    if not p.exists():
        raise InputError(f"{flag}: not found: {p}")
    return p


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _split(recs: list[dict], cfg: PipelineConfig) -> tuple[list[dict], list[dict]]:
    n_test = min(cfg.holdout, len(recs) - 1) if len(recs) > 1 else 0
    return recs[: len(recs) - n_test], recs[len(recs) - n_test :]


def _alignments(path: Path) -> dict[str, al.Durations]:
    return {r["id"]: al.Durations(r["durations"], r["frame_rate"]) for r in _read_jsonl(path)}


def _mel_meta(cfg: PipelineConfig) -> dict:
    return dict(sample_rate=cfg.sample_rate, hop=cfg.hop, window=cfg.window)


# --- commands ------------------------------------------------------------------------


def cmd_gen_data(args, cfg: PipelineConfig, out: Path):
    n = cfg.n_utts if args.n is None else args.n
    corpus = sd.gen_corpus(cfg.seed, n, cfg.min_len, cfg.max_len, cfg.sigma_w, cfg.sigma_n, n_mels=cfg.n_mels)
    manifest = sd.write_corpus(corpus, out, cfg.mel_noise)
    if cfg.render_audio and n:
        # speech-side reference audio rendered from the target mels
        (out / "wav").mkdir(exist_ok=True)
        recs = sd.read_manifest(manifest)
        for rec in recs:
            mel = dsp.MelSpectrogram(sd.load_channel(rec, "mel"), **_mel_meta(cfg))
            audio = dsp.griffin_lim(mel, iterations=cfg.gl_iterations, seed=cfg.seed)
            dsp.save_wav(audio, out / "wav" / f"{rec['id']}.wav")
            rec["wav"] = f"wav/{rec['id']}.wav"
        _write_jsonl(manifest, [{k: v for k, v in r.items() if k != "_root"} for r in recs])
    return {}, {"manifest": manifest}, {"n_utts": n}


def cmd_extract_mel(args, cfg, out: Path):
    if args.wav is not None:
        wav = _need(args.wav, "--wav")
        audio = dsp.load_wav(wav, cfg.sample_rate)
        mel = dsp.mel_spectrogram(audio, cfg.n_mels, cfg.hop, cfg.window)
        dest = out / (wav.stem + ".mel.namf")
        dsp.write_features(dest, mel.frames, cfg.sample_rate, cfg.hop, cfg.window, cfg.n_mels)
        return {"wav": wav}, {"features": dest}, {"n_frames": mel.n_frames}
    manifest = _need(args.manifest, "--manifest")
    recs = sd.read_manifest(manifest)
    (out / "mel").mkdir(exist_ok=True)
    rows = []
    for rec in recs:
        if "wav" not in rec:
            raise ConfigError(f"utterance {rec['id']} has no rendered audio; run gen-data with render_audio=1")
        wav = Path(rec["_root"]) / rec["wav"]
        if not wav.is_file():
            raise InputError(f"missing audio file {wav}")
        mel = dsp.mel_spectrogram(dsp.load_wav(wav, cfg.sample_rate), cfg.n_mels, cfg.hop, cfg.window)
        rel = f"mel/{rec['id']}.mel.namf"
        dsp.write_features(out / rel, mel.frames, cfg.sample_rate, cfg.hop, cfg.window, cfg.n_mels)
        rows.append({"id": rec["id"], "features": rel, "n_frames": mel.n_frames})
    index = out / "mels.jsonl"
    _write_jsonl(index, rows)
    return {"manifest": manifest}, {"index": index}, {"n_utts": len(rows)}


def _align_corpus(recs, cfg):
    return [(sd.load_channel(r, cfg.align_channel), al.PhonemeSeq(r["text"], r["inventory_size"])) for r in recs]


def cmd_train_aligner(args, cfg, out: Path):
    from . import plotting

    manifest = _need(args.manifest, "--manifest")
    recs = sd.read_manifest(manifest)
    if not recs:
        raise ConfigError("manifest is empty")
    hmm = al.train_aligner(_align_corpus(recs, cfg), iterations=cfg.align_iterations, seed=cfg.seed)
    dest = out / "aligner.npz"
    hmm.save(dest)
    fig = plotting.loss_curves({"total log-likelihood": hmm.loglik_history}, out / "aligner_loglik.png",
                               ylabel="log-likelihood", log_y=False)
    return {"manifest": manifest}, {"aligner": dest, "figure": fig}, {"loglik": hmm.loglik_history}


def cmd_align(args, cfg, out: Path):
    from . import plotting

    manifest = _need(args.manifest, "--manifest")
    model = _need(args.aligner, "--aligner")
    hmm = al.MonophoneHMM.load(model)
    recs = sd.read_manifest(manifest)
    rows, hits, total = [], 0, 0
    for rec, (feats, seq) in zip(recs, _align_corpus(recs, cfg)):
        d = al.viterbi_align(hmm, feats, seq, rec.get("frame_rate", 50.0))
        if d.total != len(feats):
            raise al.AlignmentError(f"{rec['id']}: durations sum {d.total} != {len(feats)} frames")
        rows.append({"id": rec["id"], "phonemes": rec["text"], "durations": d.frames.tolist(),
                     "frame_rate": d.frame_rate})
        if "durations" in rec:
            hits += int(np.sum(np.abs(d.frames - np.asarray(rec["durations"])) <= 1))
            total += len(d)
    dest = out / "alignments.jsonl"
    _write_jsonl(dest, rows)
    outputs = {"alignments": dest}
    if recs:
        outputs["figure"] = plotting.alignment(sd.load_channel(recs[0], cfg.align_channel), recs[0]["durations"],
                                               rows[0]["durations"], out / "alignment_example.png")
    acc = hits / total if total else None
    return {"manifest": manifest, "aligner": model}, outputs, {"within_one_frame": acc}


def cmd_dtw(args, cfg, out: Path):
    if args.a is not None or args.b is not None:
        a, b = _need(args.a, "--a"), _need(args.b, "--b")
        res = al.dtw(dsp.read_features(a)[0], dsp.read_features(b)[0])
        dest = out / "dtw.json"
        dest.write_text(json.dumps({"cost": res.cost, "path": res.path}))
        return {"a": a, "b": b}, {"dtw": dest}, {"cost": res.cost}
    manifest = _need(args.manifest, "--manifest")
    ch_a, ch_b = args.channels.split(",")
    rows = []
    for rec in sd.read_manifest(manifest):
        res = al.dtw(sd.load_channel(rec, ch_a), sd.load_channel(rec, ch_b))
        diag = sum(1 for i, j in res.path if i == j) / len(res.path)
        rows.append({"id": rec["id"], "cost": res.cost, "path_len": len(res.path), "diagonal_fraction": diag})
    dest = out / "dtw.jsonl"
    _write_jsonl(dest, rows)
    return {"manifest": manifest}, {"dtw": dest}, {"pairs": len(rows)}


def _conditions(recs, durs, cfg):
    table = df.text_embedding_table(recs[0]["inventory_size"], cfg.text_dim, cfg.seed)
    conds = []
    for r in recs:
        if r["id"] not in durs:
            raise ConfigError(f"no alignment for utterance {r['id']}")
        conds.append(df.build_condition(sd.load_channel(r, "lip"), sd.load_channel(r, "nam"), r["text"],
                                        durs[r["id"]], table))
    return conds


def cmd_train_diffusion(args, cfg, out: Path):
    from . import plotting

    manifest, align_path = _need(args.manifest, "--manifest"), _need(args.alignments, "--alignments")
    train, _ = _split(sd.read_manifest(manifest), cfg)
    durs = _alignments(align_path)
    conds = _conditions(train, durs, cfg)
    mels = [sd.load_channel(r, "mel") for r in train]
    model, scaler, state = df.train_diffusion(
        mels, conds, steps=cfg.diff_steps, batch=cfg.diff_batch, crop=cfg.diff_crop, lr=cfg.diff_lr,
        seed=cfg.seed, drop_prob=cfg.drop_prob, T=cfg.T, hidden=cfg.diff_hidden,
        beta_start=cfg.beta_start or None, beta_end=cfg.beta_end or None)
    dest = out / "diffusion.ckpt"
    df.save_diffusion(dest, model, scaler, state.schedule, {"config_hash": cfg.hash()})
    h = np.asarray(state.history)
    k = max(1, len(h) // 100)
    smooth = h[: len(h) // k * k].reshape(-1, k).mean(axis=1) if len(h) else h
    fig = plotting.loss_curves({"L1 noise loss": smooth}, out / "diffusion_loss.png")
    return ({"manifest": manifest, "alignments": align_path}, {"checkpoint": dest, "figure": fig},
            {"final_loss": float(np.mean(h[-50:])) if len(h) else None})


def cmd_sample(args, cfg, out: Path):
    from . import plotting

    manifest, align_path = _need(args.manifest, "--manifest"), _need(args.alignments, "--alignments")
    ckpt = _need(args.diffusion, "--diffusion")
    model, scaler, schedule, _ = df.load_diffusion(ckpt)
    recs = sd.read_manifest(manifest)
    conds = _conditions(recs, _alignments(align_path), cfg)
    (out / "sim").mkdir(exist_ok=True)
    rows = []
    first = None
    for i, (rec, cond) in enumerate(zip(recs, conds)):
        mel = df.sample_mel(model, scaler, schedule, cond, w=cfg.w, seed=cfg.seed * 100003 + i)
        rel = f"sim/{rec['id']}.sim.namf"
        dsp.write_features(out / rel, mel, cfg.sample_rate, cfg.hop, cfg.window, cfg.n_mels)
        rows.append({"id": rec["id"], "features": rel, "n_frames": len(mel)})
        if first is None:
            first = (rec, mel)
    dest = out / "simulated.jsonl"
    _write_jsonl(dest, rows)
    outputs = {"index": dest}
    if first:
        rec, mel = first
        outputs["figure"] = plotting.mel_comparison({"target": sd.load_channel(rec, "mel"), "simulated": mel},
                                                    out / "simulated_example.png", title=rec["id"])
    return {"manifest": manifest, "alignments": align_path, "diffusion": ckpt}, outputs, {"n_utts": len(rows)}


def _index_features(path: Path) -> dict[str, np.ndarray]:
    return {r["id"]: dsp.read_features(path.parent / r["features"])[0] for r in _read_jsonl(path)}


def cmd_train_seq2seq(args, cfg, out: Path):
    from . import plotting

    manifest, align_path = _need(args.manifest, "--manifest"), _need(args.alignments, "--alignments")
    inputs = {"manifest": manifest, "alignments": align_path}
    train, _ = _split(sd.read_manifest(manifest), cfg)
    if cfg.s2s_target == "simulated":
        tgt_path = _need(args.targets, "--targets")
        inputs["targets"] = tgt_path
        sims = _index_features(tgt_path)
        targets = [sims[r["id"]] for r in train]
    else:
        targets = [sd.load_channel(r, "mel") for r in train]
    durs = _alignments(align_path)
    # recogniser: unit codebook over targets, units labelled by aligned phonemes
    allt = np.concatenate(targets)
    frame_ids = np.concatenate([np.repeat(r["text"], durs[r["id"]].frames) for r in train])
    book = un.kmeans_fit(allt, K=min(cfg.K, len(allt)), iterations=cfg.kmeans_iterations, seed=cfg.seed)
    unit_ids = [un.encode(book, t) for t in targets]
    rec = ev.UnitRecognizer.fit(book.centroids, allt, frame_ids, cfg.min_run)
    exs = [s2.TrainExample(sd.load_channel(r, "nam"), t, [int(i) + 1 for i in r["text"]], u)
           for r, t, u in zip(train, targets, unit_ids)]
    config = s2.Seq2SeqConfig(
        input_dim=exs[0].features.shape[1], output_dim=cfg.n_mels, vocab_size=train[0]["inventory_size"],
        n_units=book.K if cfg.lambda_unit > 0 else 0, encoder_layers=cfg.enc_layers,
        decoder_layers=cfg.dec_layers, block=s2.FftBlockConfig(cfg.model_dim, cfg.heads), seed=cfg.seed)
    model = s2.Seq2SeqModel(config)
    history = s2.train(model, exs, lambda_ctc=cfg.lambda_ctc, epochs=cfg.s2s_epochs, seed=cfg.seed,
                       lr=cfg.s2s_lr, batch_size=cfg.s2s_batch, optimizer=cfg.s2s_optimizer,
                       lambda_unit=cfg.lambda_unit)
    model_path = out / "seq2seq.ckpt"
    s2.save_model(model_path, model, {"config_hash": cfg.hash(), "history": history})
    rec_path = out / "recognizer.npz"
    np.savez(rec_path, centroids=rec.centroids, unit_labels=rec.unit_labels, min_run=rec.min_run)
    fig = plotting.loss_curves({k: [h[k] for h in history] for k in ("loss", "mse", "ctc") if history[0][k] or k != "ctc"},
                               out / "seq2seq_loss.png")
    return inputs, {"checkpoint": model_path, "recognizer": rec_path, "figure": fig}, {"history": history}


def cmd_convert(args, cfg, out: Path):
    ckpt = _need(args.model, "--model")
    model, _ = s2.load_model(ckpt)
    if args.wav is not None:
        wav = _need(args.wav, "--wav")
        audio = s2.convert(model, dsp.load_wav(wav, cfg.sample_rate), cfg.gl_iterations, cfg.seed)
        dest = out / (wav.stem + ".converted.wav")
        dsp.save_wav(audio, dest)
        return {"model": ckpt, "wav": wav}, {"wav": dest}, {}
    manifest = _need(args.manifest, "--manifest")
    recs = sd.read_manifest(manifest)
    if args.subset == "holdout":
        recs = _split(recs, cfg)[1]
    (out / "converted").mkdir(exist_ok=True)
    rows = []
    for r in recs:
        mel, audio = s2.convert_features(model, sd.load_channel(r, "nam"), cfg.gl_iterations, cfg.seed)
        rel = f"converted/{r['id']}.mel.namf"
        dsp.write_features(out / rel, mel, cfg.sample_rate, cfg.hop, cfg.window, cfg.n_mels)
        dsp.save_wav(audio, out / f"converted/{r['id']}.wav")
        rows.append({"id": r["id"], "features": rel, "wav": f"converted/{r['id']}.wav", "n_frames": len(mel)})
    dest = out / "converted.jsonl"
    _write_jsonl(dest, rows)
    return {"model": ckpt, "manifest": manifest}, {"index": dest}, {"n_utts": len(rows)}


def cmd_eval(args, cfg, out: Path):
    from . import plotting

    manifest, conv_path = _need(args.manifest, "--manifest"), _need(args.converted, "--converted")
    rec_path = _need(args.recognizer, "--recognizer")
    z = np.load(rec_path)
    recog = ev.UnitRecognizer(z["centroids"], z["unit_labels"], int(z["min_run"]))
    inputs = {"manifest": manifest, "converted": conv_path, "recognizer": rec_path}
    by_id = {r["id"]: r for r in sd.read_manifest(manifest)}
    conv = _index_features(conv_path)
    control = None
    if args.model is not None:
        ckpt = _need(args.model, "--model")
        inputs["model"] = ckpt
        control = s2.shuffled_control(s2.load_model(ckpt)[0], seed=cfg.seed)
    rows, pairs, ctrl_pairs = [], [], []
    for uid, mel in conv.items():
        if uid not in by_id:
            raise ConfigError(f"converted utterance {uid} not in manifest")
        ref = sd.ids_to_words(by_id[uid]["text"])
        hyp = recog.transcribe(mel)
        row = {"id": uid, "ref": ref, "hyp": hyp, "wer": ev.wer(ref, hyp), "cer": ev.cer(ref, hyp)}
        pairs.append((ref, hyp))
        if control is not None:
            chyp = recog.transcribe(control.infer(sd.load_channel(by_id[uid], "nam")))
            row.update(control_hyp=chyp, control_wer=ev.wer(ref, chyp))
            ctrl_pairs.append((ref, chyp))
        rows.append(row)
    report = ev.corpus_scores(pairs)
    if control is not None:
        report["control"] = ev.corpus_scores(ctrl_pairs)
    report_path = out / "wer_report.json"
    report_path.write_text(json.dumps(report, indent=1, sort_keys=True))
    tsv = out / "wer_per_utterance.tsv"
    fields = ["id", "wer", "cer", "ref", "hyp"] + (["control_wer", "control_hyp"] if control else [])
    with open(tsv, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields, delimiter="\t", extrasaction="ignore")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (f"{v:.2f}" if isinstance(v, float) else v) for k, v in row.items()})
    outputs = {"report": report_path, "table": tsv}
    if rows:
        series = {"converted": [r["wer"] for r in rows]}
        if control is not None:
            series["shuffled control"] = [r["control_wer"] for r in rows]
        outputs["wer_figure"] = plotting.error_rates([r["id"] for r in rows], series, out / "wer_per_utterance.png")
        uid = rows[0]["id"]
        outputs["mel_figure"] = plotting.mel_comparison(
            {"target": sd.load_channel(by_id[uid], "mel"), "converted": conv[uid]}, out / "converted_example.png",
            title=uid)
    return inputs, outputs, {"report": report}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "extract-mel": cmd_extract_mel,
    "train-aligner": cmd_train_aligner,
    "align": cmd_align,
    "dtw": cmd_dtw,
    "train-diffusion": cmd_train_diffusion,
    "sample": cmd_sample,
    "train-seq2seq": cmd_train_seq2seq,
    "convert": cmd_convert,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nam2speech", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--out-dir", required=True)
        if name == "gen-data":
            p.add_argument("--n", type=int, default=None, help="number of utterances")
        if name in ("extract-mel", "train-aligner", "align", "dtw", "train-diffusion", "sample",
                    "train-seq2seq", "convert", "eval"):
            p.add_argument("--manifest", default=None)
        if name in ("extract-mel", "convert"):
            p.add_argument("--wav", default=None)
        if name == "align":
            p.add_argument("--aligner", default=None)
        if name in ("train-diffusion", "sample", "train-seq2seq"):
            p.add_argument("--alignments", default=None)
        if name == "dtw":
            p.add_argument("--a", default=None)
            p.add_argument("--b", default=None)
            p.add_argument("--channels", default="whisper,nam")
        if name == "sample":
            p.add_argument("--diffusion", default=None)
        if name == "train-seq2seq":
            p.add_argument("--targets", default=None, help="simulated.jsonl from `sample`")
        if name in ("convert", "eval"):
            p.add_argument("--model", default=None)
        if name == "convert":
            p.add_argument("--subset", choices=("all", "holdout"), default="holdout")
        if name == "eval":
            p.add_argument("--converted", default=None)
            p.add_argument("--recognizer", default=None)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NAM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    t0 = time.time()
    try:
        cfg = load_config(args.config, args.set, args.seed)
        out = Path(args.out_dir).resolve()
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs, extra = COMMANDS[args.command](args, cfg, out)
        write_run_record(out, args.command, cfg, inputs, outputs, t0, extra)
    except (InputError, dsp.AudioFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    log.info("%s finished in %.1fs", args.command, time.time() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
