"""The convolutional-GRU shift regressor: wiring, training, prediction, checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import build_features, segment_song
from .neuralnet import (AdamState, NonFiniteGradientError, Parameter, Tensor, adam_step,
                        clip_grad_norm, conv2d, conv_output_shape, gru_sequence, he_init, linear,
                        mse_loss, relu)

log = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]


# (frequency, time) ordering for kernel/stride/padding
CONV_STACK = (
    ConvSpec(128, (5, 5), (1, 2), (2, 2)),
    ConvSpec(64, (5, 5), (1, 2), (2, 2)),
    ConvSpec(64, (3, 3), (2, 2), (1, 1)),
    ConvSpec(64, (3, 3), (1, 1), (1, 1)),
    ConvSpec(8, (48, 1), (1, 1), (24, 1)),
    ConvSpec(1, (1, 1), (1, 1), (0, 0)),
)


@dataclass(frozen=True)
class CgruConfig:
    convs: tuple[ConvSpec, ...] = CONV_STACK
    gru_hidden: int = 64
    in_channels: int = 3
    n_bins: int = 576
    profile: str = "full"

    @classmethod
    def full(cls, channels: int = 3) -> "CgruConfig":
        return cls(in_channels=channels)

    @classmethod
    def tiny(cls, channels: int = 3) -> "CgruConfig":
        """Reference layer geometry with filter counts divided by 8 and a 16-unit GRU."""
        convs = tuple(replace(c, filters=max(1, c.filters // 8)) for c in CONV_STACK)
        return cls(convs=convs, gru_hidden=16, in_channels=channels, profile="tiny")

    @classmethod
    def from_profile(cls, profile: str, channels: int = 3) -> "CgruConfig":
        if profile == "full":
            return cls.full(channels)
        if profile == "tiny":
            return cls.tiny(channels)
        raise ModelError(f"unknown profile {profile!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CgruConfig":
        convs = tuple(ConvSpec(c["filters"], tuple(c["kernel"]), tuple(c["stride"]), tuple(c["padding"]))
                      for c in d["convs"])
        return cls(convs=convs, gru_hidden=d["gru_hidden"], in_channels=d["in_channels"],
                   n_bins=d["n_bins"], profile=d["profile"])

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:32]

    def shape_trace(self, n_frames: int) -> list[tuple[int, int, int]]:
        """(channels, freq, time) after each conv layer for an input of ``n_frames`` frames."""
        h, w = self.n_bins, n_frames
        trace = []
        for c in self.convs:
            h, w = conv_output_shape(h, w, c.kernel, c.stride, c.padding)
            trace.append((c.filters, h, w))
        return trace

    @property
    def gru_input(self) -> int:
        last = self.shape_trace(64)[-1]
        return last[0] * last[1]

    @property
    def min_frames(self) -> int:
        t = 1
        while any(w < 1 for _, _, w in self.shape_trace(t)):
            t += 1
        return max(t, 8)


@dataclass
class TrainConfig:
    lr: float = 5e-5
    clip: float = 100.0
    epochs: int = 1
    seed: int = 0
    variants_per_note: int = 7
    hidden_init_sd: float = 1e-4
    reshuffle: bool = True
    eval_every: int = 500  # songs between validation passes

    def __post_init__(self):
        if self.lr <= 0 or self.clip <= 0 or self.epochs < 0 or self.variants_per_note < 1:
            raise ModelError(f"invalid training configuration {self}")


class CGRU:
    """Convolutional front end, one GRU layer and a scalar regression head."""

    def __init__(self, config: CgruConfig = CgruConfig(), seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        c_in = config.in_channels
        for i, c in enumerate(config.convs, start=1):
            kh, kw = c.kernel
            fan_in = c_in * kh * kw
            self._add(f"conv{i}.weight", he_init((c.filters, c_in, kh, kw), fan_in, rng))
            self._add(f"conv{i}.bias", np.zeros(c.filters))
            c_in = c.filters
        h, d = config.gru_hidden, config.gru_input
        bound = 1.0 / math.sqrt(h)
        self._add("gru.w_x", rng.uniform(-bound, bound, (3 * h, d)))
        self._add("gru.w_h", rng.uniform(-bound, bound, (3 * h, h)))
        self._add("gru.bias", rng.uniform(-bound, bound, 3 * h))
        self._add("fc.weight", rng.uniform(-bound, bound, (1, h)))
        self._add("fc.bias", rng.uniform(-bound, bound, 1))

    def _add(self, name, value):
        self.params[name] = Parameter(value, name)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def gru_inputs(self, features, trace: list | None = None) -> Tensor:
        """Conv stack output rearranged to N×T'×F' GRU input sequences."""
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        n, c, f, t = x.shape
        if c != self.config.in_channels or f != self.config.n_bins:
            raise ModelError(f"expected N×{self.config.in_channels}×{self.config.n_bins}×T input, got {x.shape}")
        if t < self.config.min_frames:
            raise ModelError(f"note of {t} frames is shorter than the {self.config.min_frames}-frame minimum")
        last = len(self.config.convs)
        for i, spec in enumerate(self.config.convs, start=1):
            x = conv2d(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], spec.stride, spec.padding)
            if i < last:
                x = relu(x)
            if trace is not None:
                trace.append((f"conv{i}", x.shape[1:]))
        n, c, f, t = x.shape
        seq = x.reshape(n, c * f, t).transpose(0, 2, 1)
        if trace is not None:
            trace.append(("gru", (t, c * f)))
        return seq

    def forward_note(self, features, h0, trace: list | None = None):
        """Predict one shift per batch row for a note.

        ``features`` is N×C×576×T (or C×576×T) and ``h0`` N×H (or H).
        Returns ``(pred, h_T)``: Tensors of shape (N,) and N×H.
        """
        squeeze = np.ndim(features.data if isinstance(features, Tensor) else features) == 3
        seq = self.gru_inputs(features, trace)
        h0 = h0 if isinstance(h0, Tensor) else Tensor(np.atleast_2d(h0))
        if h0.ndim == 1:
            h0 = h0.reshape(1, h0.shape[0])
        _, h_t = gru_sequence(seq, h0, self.params["gru.w_x"], self.params["gru.w_h"], self.params["gru.bias"])
        pred = linear(h_t, self.params["fc.weight"], self.params["fc.bias"])
        pred = pred.reshape(pred.shape[0])
        if trace is not None:
            trace.append(("fc", pred.shape))
        if squeeze:
            return pred[0], h_t[0]
        return pred, h_t

    def forward_song(self, features: np.ndarray, segments, h_init, return_state: bool = False):
        """Per-note predictions with the hidden state threaded from note to note.

        ``features`` is N×C×576×T for the whole song (or C×576×T).  With
        ``return_state`` the final hidden state is returned as well.
        """
        if not segments:
            raise ModelError("no segments to predict")
        feats = features if features.ndim == 4 else features[None]
        h = np.atleast_2d(np.asarray(h_init, dtype=np.float64))
        preds = []
        for seg in segments:
            p, h_t = self.forward_note(feats[..., seg.start_frame:seg.end_frame], h)
            preds.append(p.data.copy())
            h = h_t.data
        out = np.stack(preds, axis=-1)
        if features.ndim == 3:
            out, h = out[0], h[0]
        return (out, h) if return_state else out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if k not in state:
                raise ModelError(f"missing parameter {k}")
            if state[k].shape != p.data.shape:
                raise ModelError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)


# ------------------------------------------------------------------- training

@dataclass
class LossPoint:
    step: int
    epoch: int
    songs_seen: int
    train_mse: float
    val_mse: float = float("nan")


@dataclass
class TrainResult:
    model: CGRU
    adam: AdamState
    curve: list[LossPoint] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epochs_done: int = 0


def evaluate(model: CGRU, songs, channels=None) -> float:
    """MSE over every note and variant of ``songs`` with zero initial state."""
    se, count = 0.0, 0
    for song in songs:
        feats = song.features(channels=channels or model.config.in_channels)
        h0 = np.zeros((feats.shape[0], model.config.gru_hidden))
        preds = model.forward_song(feats, song.segments, h0)
        se += float(np.sum((preds - song.labels) ** 2))
        count += preds.size
    return se / max(count, 1)


def train(songs, cfg: TrainConfig, model: CGRU | None = None, val_songs=(),
          adam: AdamState | None = None, on_point=None, should_stop=None) -> TrainResult:
    """Train on prepared songs, one optimizer step per note.

    Each step batches the variants of one note; the first note of a song
    starts from a small random state and later notes continue from the
    previous note's final state.  After the first epoch the cached variants
    are recombined per note (see ``SongFeatures.shuffled``).  ``should_stop``
    is called with the partial result after every epoch; returning True ends
    training early.
    """
    if not songs:
        raise ModelError("empty training set")
    model = model or CGRU(seed=cfg.seed)
    adam = adam or AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.parameters()
    channels = model.config.in_channels
    result = TrainResult(model, adam)
    songs_seen = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(songs))
        running, n_notes = 0.0, 0
        for si in order:
            song = songs[si]
            if epoch > 0 and cfg.reshuffle:
                song = song.shuffled(rng)
            feats = song.features(channels=channels)
            n_var = feats.shape[0]
            h = rng.normal(0.0, cfg.hidden_init_sd, size=(n_var, model.config.gru_hidden))
            for k, seg in enumerate(song.segments):
                model.zero_grad()
                x = feats[..., seg.start_frame:seg.end_frame]
                pred, h_t = model.forward_note(x, h)
                loss = mse_loss(pred, song.labels[:, k])
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteGradientError(
                        f"non-finite loss at epoch {epoch}, song {si}, note {k}")
                loss.backward()
                clip_grad_norm(params, cfg.clip)
                adam_step(params, adam)
                h = h_t.data
                running += value
                n_notes += 1
            songs_seen += 1
            if val_songs and songs_seen % cfg.eval_every == 0:
                pt = LossPoint(adam.step, epoch, songs_seen, running / n_notes, evaluate(model, val_songs))
                result.curve.append(pt)
                if on_point:
                    on_point(pt)
        epoch_loss = running / max(n_notes, 1)
        result.epoch_losses.append(epoch_loss)
        val = evaluate(model, val_songs) if val_songs else float("nan")
        pt = LossPoint(adam.step, epoch, songs_seen, epoch_loss, val)
        result.curve.append(pt)
        result.epochs_done = epoch + 1
        log.info("epoch %d train_mse %.4f val_mse %.4f", epoch, epoch_loss, val)
        if on_point:
            on_point(pt)
        if should_stop is not None and should_stop(result):
            break
    return result


# ----------------------------------------------------------------- prediction

def predict_song(checkpoint: "ModelCheckpoint", vocal, accompaniment, score):
    """Per-note shift estimates (semitones) for a performance, with the segments they belong to.

    The vocal is segmented against ``score`` and the first note starts from a
    zero hidden state.
    """
    model = checkpoint.model
    feats = build_features(vocal, accompaniment).data[:model.config.in_channels]
    segments = [s for s in segment_song(vocal, score) if s.end_frame <= feats.shape[2]]
    if not segments:
        raise ModelError("alignment produced no note segments")
    preds = model.forward_song(feats, segments, np.zeros(model.config.gru_hidden))
    return preds, segments


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"ATCK"
CKPT_VERSION = 1


@dataclass
class ModelCheckpoint:
    model: CGRU
    adam: AdamState
    epoch: int = 0
    seed: int = 0

    @property
    def config(self) -> CgruConfig:
        return self.model.config


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    cfg = ckpt.model.config
    meta = {
        "config": cfg.to_dict(), "epoch": ckpt.epoch, "seed": ckpt.seed,
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps, "step": ckpt.adam.step},
    }
    tensors = [(k, p.data) for k, p in ckpt.model.params.items()]
    tensors += [(f"adam.m/{k}", v) for k, v in ckpt.adam.m.items()]
    tensors += [(f"adam.v/{k}", v) for k, v in ckpt.adam.v.items()]
    meta_b = json.dumps(meta, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<H", CKPT_VERSION) + cfg.hash().encode("ascii")
    body += struct.pack("<I", len(meta_b)) + meta_b + struct.pack("<I", len(tensors))
    body += b"".join(_pack_tensor(k, v) for k, v in tensors)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.what}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect_config: CgruConfig | None = None) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, crc = raw[:-4], raw[-4:]
    r = _Reader(body, str(path))
    r.take(4)
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if struct.unpack("<I", crc)[0] != zlib.crc32(body):
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    stored_hash = r.take(32).decode("ascii")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len))
    cfg = CgruConfig.from_dict(meta["config"])
    if cfg.hash() != stored_hash:
        raise CheckpointError(f"{path}: config hash does not match stored configuration")
    if expect_config is not None and expect_config.hash() != stored_hash:
        raise CheckpointError(f"{path}: checkpoint config differs from the requested model config")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    model = CGRU(cfg, seed=meta["seed"])
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    a = meta["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
    adam.m = {k[len("adam.m/"):]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    adam.v = {k[len("adam.v/"):]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    return ModelCheckpoint(model, adam, meta["epoch"], meta["seed"])
