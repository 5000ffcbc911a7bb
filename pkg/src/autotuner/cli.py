"""Command-line entry point: ``autotuner synth|prepare|train|apply|eval``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .align import AlignError, Note, Score
from .audio import AudioError, read_wav, write_wav
from .dataset import (VALIDATION_PROGRESSIONS, TRAIN_PROGRESSIONS, CacheError, DatasetError,
                      SongExample, SongFeatures, apply_note_shifts, feature_cache_read,
                      feature_cache_write, make_song, prepare_song, segment_song)
from .model import (CGRU, CgruConfig, CheckpointError, LossPoint, ModelCheckpoint, ModelError,
                    TrainConfig, load_checkpoint, predict_song, save_checkpoint, train)
from .neuralnet import NonFiniteGradientError
from .spectral import CqtConfig, SpectralError
from .pitch import PitchError

log = logging.getLogger("autotuner")

CLI_ERRORS = (AudioError, AlignError, CacheError, CheckpointError, DatasetError, ModelError,
              NonFiniteGradientError, PitchError, SpectralError, OSError)


class CliError(RuntimeError):
    pass


# -------------------------------------------------------------------- helpers

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, manifest: dict) -> str:
    """Write ``manifest.json``; returns the SHA-256 of its bytes."""
    blob = json.dumps(manifest, indent=2, sort_keys=True).encode()
    (out_dir / "manifest.json").write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def _ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {p}: {exc.strerror}") from exc
    return p


def score_to_json(score: Score) -> dict:
    return {"notes": [{"midi": n.midi, "onset": n.onset, "duration": n.duration} for n in score.notes]}


def load_score(path) -> Score:
    """Parse ``{"notes": [{"midi", "onset", "duration"}, ...]}``."""
    try:
        doc = json.loads(Path(path).read_text())
        notes = tuple(Note(float(n["midi"]), float(n["onset"]), float(n["duration"])) for n in doc["notes"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: invalid score file ({exc})") from exc
    return Score(notes)


def _song_ids(corpus: Path) -> list[str]:
    return sorted(p.name[:-len(".json")] for p in corpus.glob("*.json") if p.name != "manifest.json")


def load_cached_songs(cache_dir) -> list[SongFeatures]:
    """Group ``<song>_v<k>.atf`` files into per-song training units."""
    cache_dir = Path(cache_dir)
    groups: dict[str, list[tuple[int, Path]]] = defaultdict(list)
    for p in sorted(cache_dir.glob("*.atf")):
        song, _, k = p.stem.rpartition("_v")
        if not song or not k.isdigit():
            raise CliError(f"unexpected cache file name {p.name}")
        groups[song].append((int(k), p))
    if not groups:
        raise CliError(f"no feature cache files in {cache_dir}")
    songs = []
    for song, files in sorted(groups.items()):
        records = [feature_cache_read(p) for _, p in sorted(files)]
        songs.append(SongFeatures.from_records(records, song))
    return songs


# ------------------------------------------------------------------- commands

def cmd_synth(out_dir, n_songs: int, seed: int = 0, split: str = "train",
              notes_min: int = 20, notes_max: int = 40) -> str:
    """Write ``<id>_vocal.wav``, ``<id>_acc.wav`` and ``<id>.json`` per song plus a manifest."""
    if n_songs < 1:
        raise CliError("n_songs must be at least 1")
    if not 1 <= notes_min <= notes_max:
        raise CliError("need 1 <= notes_min <= notes_max")
    progressions = {"train": TRAIN_PROGRESSIONS, "validation": VALIDATION_PROGRESSIONS}[split]
    out = _ensure_dir(out_dir)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_songs):
        song_seed = int(rng.integers(2**31))
        n_notes = int(rng.integers(notes_min, notes_max + 1))
        ex = make_song(song_seed, n_notes, progressions, segment=False)
        sid = f"{split}{i:03d}"
        files = {"vocal": out / f"{sid}_vocal.wav", "accompaniment": out / f"{sid}_acc.wav",
                 "score": out / f"{sid}.json"}
        write_wav(ex.vocal, files["vocal"])
        write_wav(ex.accompaniment, files["accompaniment"])
        files["score"].write_text(json.dumps(score_to_json(ex.score), indent=1))
        entries.append({"id": sid, "seed": song_seed, "n_notes": n_notes,
                        "sha256": {k: _sha256(v) for k, v in files.items()}})
        log.info("synthesized %s (%d notes)", sid, n_notes)
    return _write_manifest(out, {"command": "synth", "seed": seed, "split": split, "songs": entries})


def cmd_prepare(corpus_dir, out_dir, versions: int = 7, max_cents: float = 100.0, seed: int = 0) -> dict:
    """De-tune every corpus song and cache one feature file per variant.

    Returns ``{"written": [...], "skipped": [...]}``.
    """
    corpus = Path(corpus_dir)
    ids = _song_ids(corpus)
    if not ids:
        raise CliError(f"no songs found in {corpus}")
    if versions < 1:
        raise CliError("versions must be at least 1")
    out = _ensure_dir(out_dir)
    written, skipped, entries = [], [], []
    for i, sid in enumerate(ids):
        vocal = read_wav(corpus / f"{sid}_vocal.wav")
        acc = read_wav(corpus / f"{sid}_acc.wav")
        score = load_score(corpus / f"{sid}.json")
        segments = segment_song(vocal, score)
        if not segments:
            log.warning("skipping %s: alignment produced no segments", sid)
            skipped.append(sid)
            continue
        song_seed = seed * 100_003 + i
        records = prepare_song(SongExample(vocal, acc, score, segments), song_seed, versions, max_cents)
        hashes = []
        for k, rec in enumerate(records):
            path = out / f"{sid}_v{k}.atf"
            feature_cache_write(path, rec.features, rec.segments, rec.labels)
            written.append(path)
            hashes.append(_sha256(path))
        entries.append({"id": sid, "seed": song_seed, "n_segments": len(segments), "sha256": hashes})
        log.info("prepared %s: %d segments x %d variants", sid, len(segments), versions)
    _write_manifest(out, {"command": "prepare", "seed": seed, "versions": versions, "max_cents": max_cents,
                          "songs": entries, "skipped": skipped})
    return {"written": written, "skipped": skipped}


def cmd_train(cache_dir, checkpoint_out, profile: str = "tiny", epochs: int = 1, seed: int = 0,
              channels: int = 3, lr: float = 5e-5, loss_csv=None, val_cache=None) -> ModelCheckpoint:
    songs = load_cached_songs(cache_dir)
    val = load_cached_songs(val_cache) if val_cache else []
    if channels not in (2, 3):
        raise CliError("channels must be 2 or 3")
    model = CGRU(CgruConfig.from_profile(profile, channels), seed=seed)
    cfg = TrainConfig(lr=lr, epochs=epochs, seed=seed)
    result = train(songs, cfg, model, val_songs=val)
    ckpt = ModelCheckpoint(result.model, result.adam, result.epochs_done, seed)
    save_checkpoint(ckpt, checkpoint_out)
    loss_csv = Path(loss_csv) if loss_csv else Path(checkpoint_out).with_suffix(".loss.csv")
    write_loss_csv(loss_csv, result.curve)
    return ckpt


def write_loss_csv(path, curve: list[LossPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "songs_seen", "train_mse", "val_mse"])
        for p in curve:
            w.writerow([p.step, p.epoch, p.songs_seen, repr(p.train_mse), "" if math.isnan(p.val_mse) else repr(p.val_mse)])


def cmd_apply(checkpoint, vocal_path, acc_path, score_path, out_path, csv_path=None) -> list[dict]:
    """Predict per-note shifts and undo them with the phase vocoder."""
    ckpt = load_checkpoint(checkpoint)
    vocal, acc = read_wav(vocal_path), read_wav(acc_path)
    score = load_score(score_path)
    preds, segments = predict_song(ckpt, vocal, acc, score)
    applied = [-100.0 * float(p) for p in preds]
    hop = CqtConfig().hop_samples(vocal.sample_rate)
    corrected = apply_note_shifts(vocal, segments, applied, hop)
    write_wav(corrected, out_path)
    rows = [{"note": s.note_index, "start_frame": s.start_frame, "end_frame": s.end_frame,
             "predicted_cents": 100.0 * float(p), "applied_cents": a}
            for s, p, a in zip(segments, preds, applied)]
    csv_path = Path(csv_path) if csv_path else Path(out_path).with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_eval(checkpoint, cache_dir, report_path) -> dict:
    """Per-note error report over cached, labeled variants.

    Writes one CSV row per (song, variant, note) and returns the aggregate,
    also saved next to the report as ``<report>.summary.json``.
    """
    ckpt = load_checkpoint(checkpoint)
    model = ckpt.model
    songs = load_cached_songs(cache_dir)
    rows = []
    for song in songs:
        feats = song.features(channels=model.config.in_channels)
        h0 = np.zeros((feats.shape[0], model.config.gru_hidden))
        preds = model.forward_song(feats, song.segments, h0)
        for v in range(preds.shape[0]):
            for k, seg in enumerate(song.segments):
                label, pred = 100.0 * float(song.labels[v, k]), 100.0 * float(preds[v, k])
                rows.append({"song_id": song.song_id, "variant": v, "note": seg.note_index,
                             "label_cents": label, "predicted_cents": pred, "abs_error_cents": abs(pred - label)})
    summary = summarize(rows)
    with open(report_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    Path(str(report_path) + ".summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def summarize(rows) -> dict:
    err = np.array([(r["predicted_cents"] - r["label_cents"]) / 100.0 for r in rows])
    return {"n_notes": len(rows), "mse_semitone2": float(np.mean(err ** 2)),
            "mae_cents": float(np.mean(np.abs(err)) * 100.0)}


# ------------------------------------------------------------------------ CLI

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autotuner", description="Score-informed pitch correction for singing.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("out_dir")
    p.add_argument("-n", "--songs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "validation"), default="train")
    p.add_argument("--notes-min", type=int, default=20)
    p.add_argument("--notes-max", type=int, default=40)

    p = sub.add_parser("prepare", help="de-tune a corpus and cache input features")
    p.add_argument("corpus_dir")
    p.add_argument("out_dir")
    p.add_argument("--versions", type=int, default=7)
    p.add_argument("--max-cents", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on cached features")
    p.add_argument("cache_dir")
    p.add_argument("checkpoint")
    p.add_argument("--profile", choices=("tiny", "full"), default="tiny")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, choices=(2, 3), default=3)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--loss-csv", default=None, help="default: <checkpoint>.loss.csv")
    p.add_argument("--val-cache", default=None, help="cache directory scored after every epoch")

    p = sub.add_parser("apply", help="correct a vocal take")
    p.add_argument("checkpoint")
    p.add_argument("vocal")
    p.add_argument("accompaniment")
    p.add_argument("score")
    p.add_argument("out")
    p.add_argument("--csv", default=None, help="default: <out>.csv")

    p = sub.add_parser("eval", help="score a model on cached, labeled features")
    p.add_argument("checkpoint")
    p.add_argument("cache_dir")
    p.add_argument("report")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            digest = cmd_synth(args.out_dir, args.songs, args.seed, args.split, args.notes_min, args.notes_max)
            print(f"manifest sha256 {digest}")
        elif args.command == "prepare":
            res = cmd_prepare(args.corpus_dir, args.out_dir, args.versions, args.max_cents, args.seed)
            print(f"wrote {len(res['written'])} cache files; skipped {len(res['skipped'])} songs"
                  + (f": {', '.join(res['skipped'])}" if res["skipped"] else ""))
        elif args.command == "train":
            ck = cmd_train(args.cache_dir, args.checkpoint, args.profile, args.epochs, args.seed,
                           args.channels, args.lr, args.loss_csv, args.val_cache)
            print(f"saved {args.checkpoint} ({ck.model.n_parameters()} parameters, {ck.epoch} epochs)")
        elif args.command == "apply":
            rows = cmd_apply(args.checkpoint, args.vocal, args.accompaniment, args.score, args.out, args.csv)
            print(f"corrected {len(rows)} notes -> {args.out}")
        elif args.command == "eval":
            s = cmd_eval(args.checkpoint, args.cache_dir, args.report)
            print(f"notes {s['n_notes']} mse {s['mse_semitone2']:.4f} semitone^2 mae {s['mae_cents']:.1f} cents")
    except (CliError, *CLI_ERRORS) as exc:
        print(f"autotuner {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
