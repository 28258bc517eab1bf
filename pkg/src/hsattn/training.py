"""Optimisation: NLL loss, Adam, the step-decay schedule, upsampling, checkpoints.

One iteration is one minibatch step. Minibatches are drawn without
replacement from a per-epoch permutation of the (possibly upsampled)
training list; the permutation is reshuffled every epoch and the stream
runs across epoch boundaries, so every batch has ``batch_size`` entries
even for corpora smaller than one batch.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from hsattn import autodiff as ad
from hsattn.audio import FeatureConfig
from hsattn.autodiff import Tensor
from hsattn.corpus import LABELS, CorpusManifest, load_features
from hsattn.errors import ConfigError, DimensionError, IngestionError, InputError, ParseError
from hsattn.models import HeartSoundClassifier, ModelConfig

CHECKPOINT_MAGIC = b"HSSM"
CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
NORM_MEAN, NORM_STD = "input_norm.mean", "input_norm.std"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr0: float = 1e-4
    decay_factor: float = 0.9
    decay_every: int = 100
    total_iterations: int = 3000
    upsample: bool = False
    seed: int = 0
    standardize: bool = True
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints

    def __post_init__(self):
        for name in ("batch_size", "decay_every", "total_iterations"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- loss, schedule, optimiser --------------------------------------------------------

def nll_loss(log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true classes."""
    labels = np.asarray(labels)
    n, k = log_probs.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.dtype.kind not in "iu" or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise InputError(f"labels must be integers in [0, {k - 1}], got {labels.tolist()}")
    return -log_probs[np.arange(n), labels].mean()


def lr_schedule(iteration: int, config: TrainConfig | None = None) -> float:
    """``lr0 * decay_factor ** floor(iteration / decay_every)``; the first decay lands on iteration 100."""
    config = config or TrainConfig()
    if iteration < 1:
        raise InputError(f"iterations count from 1, got {iteration}")
    return config.lr0 * config.decay_factor ** (iteration // config.decay_every)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads, state: AdamState, lr: float,
              betas=ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """One bias-corrected Adam update, in place. ``None`` gradients count as zero."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = list(params)
        self.betas, self.eps = betas, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr, self.betas, self.eps)


# -- data preparation -------------------------------------------------------------

def _label_of(record):
    return record.label if hasattr(record, "label") else record[1]


def upsample(records: Sequence, seed: int = 0, labels: Sequence = LABELS, key: Callable = _label_of) -> list:
    """Balance classes by duplicating minority records, sampled with replacement.

    The originals come first, in order, followed by the duplicates of each
    minority class in ``labels`` order.
    """
    records = list(records)
    groups = {lab: [i for i, r in enumerate(records) if key(r) == lab] for lab in labels}
    empty = [lab for lab, idx in groups.items() if not idx]
    if empty:
        raise InputError(f"cannot upsample: no records for class(es) {empty}")
    stray = {key(r) for r in records} - set(labels)
    if stray:
        raise InputError(f"unknown labels {sorted(map(str, stray))}")
    target = max(len(idx) for idx in groups.values())
    rng = np.random.default_rng(seed)
    out = list(records)
    for lab in labels:
        idx = groups[lab]
        extra = rng.choice(len(idx), size=target - len(idx), replace=True)
        out.extend(records[idx[j]] for j in extra)
    return out


@dataclass
class Standardizer:
    """Per-mel-bin z-normalisation with statistics fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, batch: np.ndarray) -> Standardizer:
        flat = np.asarray(batch, dtype=np.float64).reshape(-1, batch.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std[std < 1e-8] = 1.0  # constant bins pass through centred
        # rounded to what the f32 checkpoint stores, so reloading changes nothing
        return cls(mean.astype(np.float32).astype(np.float64), std.astype(np.float32).astype(np.float64))

    @classmethod
    def identity(cls, bins: int) -> Standardizer:
        return cls(np.zeros(bins), np.ones(bins))

    def __call__(self, x) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.std).astype(np.float32)


class BatchStream:
    """Endless stream of index batches from reshuffled epoch permutations."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._queue = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._queue) < self.batch_size:
            self._queue = np.concatenate([self._queue, self.rng.permutation(self.n)])
        batch, self._queue = self._queue[: self.batch_size], self._queue[self.batch_size:]
        return batch


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    iteration: int
    norm: Standardizer
    train_config: dict = field(default_factory=dict)
    feature_config: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: HeartSoundClassifier, iteration: int, norm: Standardizer, **meta) -> ModelCheckpoint:
        tensors = {k: np.array(v, dtype=np.float32) for k, v in model.state_dict().items()}
        return cls(model.config, tensors, iteration, norm, **meta)

    def build_model(self) -> HeartSoundClassifier:
        model = HeartSoundClassifier(self.model_config, np.float32)
        model.load_state_dict(self.tensors)
        return model

    def predict(self, spectrograms, batch_size: int = 16) -> np.ndarray:
        """Class log-probabilities, ``N×K``, for raw (unstandardised) spectrograms."""
        model = self.build_model()
        x = np.asarray(spectrograms)
        single = x.ndim == 2
        x = self.norm(x[None] if single else x)
        out = []
        with ad.no_grad():
            for start in range(0, len(x), batch_size):
                out.append(model.forward(x[start:start + batch_size]).data)
        probs = np.concatenate(out) if out else np.zeros((0, self.model_config.num_classes), np.float32)
        return probs[0] if single else probs

    def _metadata(self) -> bytes:
        meta = {
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config,
            "feature_config": self.feature_config,
            "iteration": self.iteration,
            "labels": list(LABELS),
        }
        return json.dumps(meta, sort_keys=True).encode("utf-8")

    def to_bytes(self) -> bytes:
        table = dict(self.tensors)
        table[NORM_MEAN] = self.norm.mean
        table[NORM_STD] = self.norm.std
        meta = self._metadata()
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", self.version, len(meta)), meta, struct.pack("<I", len(table))]
        for name, arr in table.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            key = name.encode("utf-8")
            parts.append(struct.pack("<I", len(key)) + key)
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "checkpoint") -> ModelCheckpoint:
        if buf[:4] != CHECKPOINT_MAGIC:
            raise ParseError(f"{source}: missing HSSM magic")
        pos = 4

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(buf):
                raise ParseError(f"{source}: truncated at byte {pos}")
            vals = struct.unpack_from(fmt, buf, pos)
            pos += size
            return vals

        version, meta_len = take("<II")
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{source}: unsupported checkpoint version {version}")
        meta = json.loads(bytes(take(f"<{meta_len}s")[0]).decode("utf-8"))
        (count,) = take("<I")
        table = {}
        for _ in range(count):
            (klen,) = take("<I")
            name = take(f"<{klen}s")[0].decode("utf-8")
            (rank,) = take("<I")
            dims = take(f"<{rank}I")
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise ParseError(f"{source}: tensor {name!r} truncated")
            table[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
        if pos != len(buf):
            raise ParseError(f"{source}: {len(buf) - pos} trailing bytes")
        try:
            norm = Standardizer(table.pop(NORM_MEAN).astype(np.float64), table.pop(NORM_STD).astype(np.float64))
        except KeyError as exc:
            raise ParseError(f"{source}: no input normalisation stored") from exc
        return cls(
            ModelConfig.from_dict(meta["model_config"]),
            table,
            int(meta["iteration"]),
            norm,
            meta.get("train_config", {}),
            meta.get("feature_config", {}),
            version,
        )

    @classmethod
    def load(cls, path) -> ModelCheckpoint:
        path = Path(path)
        try:
            buf = path.read_bytes()
        except OSError as exc:
            raise IngestionError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
        return cls.from_bytes(buf, str(path))


# -- training loop --------------------------------------------------------------------

@dataclass
class TraceRow:
    iteration: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    trace: list[TraceRow]
    model: HeartSoundClassifier


def write_loss_trace(path, trace: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "lr", "loss"])
        for row in trace:
            w.writerow([row.iteration, repr(row.lr), repr(row.loss)])


def load_split(manifest: CorpusManifest, split: str, features=None, feature_config: FeatureConfig | None = None):
    records = manifest.split(split)
    if not records:
        raise InputError(f"manifest has no {split!r} records")
    x = np.stack([load_features(r, features, feature_config) for r in records])
    y = np.array([r.label_id for r in records], dtype=np.int64)
    return records, x, y


def train(
    config: TrainConfig,
    model_config: ModelConfig,
    manifest: CorpusManifest,
    features=None,
    feature_config: FeatureConfig | None = None,
    *,
    stop: Callable[[int, HeartSoundClassifier, Standardizer], bool] | None = None,
    on_checkpoint: Callable[[ModelCheckpoint], None] | None = None,
) -> TrainResult:
    """Train on the manifest's ``train`` split.

    ``features`` is an LMEL cache directory; without one, spectrograms are
    computed from the audio. ``stop(iteration, model, norm)`` may end training
    early by returning true.
    """
    _, x, y = load_split(manifest, "train", features, feature_config)
    if x.shape[1:] != (model_config.input_frames, model_config.mel_bins):
        raise DimensionError(
            f"features are {x.shape[1]}×{x.shape[2]} but the model expects "
            f"{model_config.input_frames}×{model_config.mel_bins}"
        )
    norm = Standardizer.fit(x) if config.standardize else Standardizer.identity(x.shape[2])
    x = norm(x)
    order = np.arange(len(y))
    if config.upsample:
        order = np.array(upsample(list(order), seed=config.seed, labels=range(model_config.num_classes), key=lambda i: y[i]))

    model = HeartSoundClassifier(model_config, np.float32)
    opt = Adam(model.parameters())
    stream = BatchStream(len(order), config.batch_size, np.random.default_rng([config.seed, 1]))
    meta = dict(train_config=config.to_dict(), feature_config=(feature_config or FeatureConfig()).to_dict())
    trace = []
    it = 0
    for it in range(1, config.total_iterations + 1):
        idx = order[stream.next()]
        lr = lr_schedule(it, config)
        loss = nll_loss(model.forward(x[idx], train=True), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        trace.append(TraceRow(it, lr, float(loss.data)))
        if on_checkpoint and config.checkpoint_every and it % config.checkpoint_every == 0:
            on_checkpoint(ModelCheckpoint.from_model(model, it, norm, **meta))
        if stop is not None and stop(it, model, norm):
            break
    return TrainResult(ModelCheckpoint.from_model(model, it, norm, **meta), trace, model)
