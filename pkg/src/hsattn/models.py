"""The CNN, LSTM-RNN and GRU-RNN classifiers and their pooling heads.

Every model is ``trunk → head → log_softmax``. The head is one of

* ``flatten`` (CNN) / ``last_time_stamp`` (RNN): affine map of the flattened
  feature map, or of the final hidden state;
* ``maxpool``: global max over positions per channel, then affine;
* ``attention_softmax`` / ``attention_sigmoid``: global attention pooling.

Attention pooling runs two 1×1 convolutions with one output channel per class
over the trunk output. The top branch gives a classification map ``C``, the
bottom branch is rectified (softmax over positions, or elementwise sigmoid)
and then divided by its sum over positions, separately for each class
channel. The logit of class ``k`` is ``sum_positions C_k * A_k``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from hsattn import autodiff as ad
from hsattn.autodiff import Tensor
from hsattn.errors import ConfigError, ContractError, DimensionError
from hsattn.layers import CnnTrunk, Module, RecurrentStack, uniform_init, zeros_param

TOPOLOGIES = ("cnn", "lstm", "gru")
HEADS = ("flatten", "last_time_stamp", "maxpool", "attention_softmax", "attention_sigmoid")
ATTENTION_HEADS = ("attention_softmax", "attention_sigmoid")
ATTENTION_EPS = 1e-12

HEAD_ALIASES = {
    "attn-softmax": "attention_softmax",
    "attn-sigmoid": "attention_sigmoid",
    "attention-softmax": "attention_softmax",
    "attention-sigmoid": "attention_sigmoid",
    "last-time-stamp": "last_time_stamp",
    "max-pooling": "maxpool",
    "flattening": "flatten",
}


def canonical_head(head: str) -> str:
    return HEAD_ALIASES.get(head, head)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; enough to rebuild a model from a checkpoint.

    For recurrent topologies ``flatten`` is accepted as a synonym of
    ``last_time_stamp``.
    """

    topology: str = "cnn"
    head: str = "attention_sigmoid"
    num_classes: int = 3
    seed: int = 0
    conv_channels: tuple[int, ...] = (64, 128, 256, 256)
    hidden_sizes: tuple[int, ...] = (256, 1024, 256)
    input_frames: int = 936
    mel_bins: int = 64

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}; expected one of {TOPOLOGIES}")
        head = canonical_head(self.head)
        if head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if self.is_recurrent and head == "flatten":
            head = "last_time_stamp"
        if not self.is_recurrent and head == "last_time_stamp":
            raise ConfigError("head 'last_time_stamp' needs a recurrent topology (lstm or gru)")
        object.__setattr__(self, "head", head)
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "hidden_sizes", tuple(int(c) for c in self.hidden_sizes))
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if not self.conv_channels or not self.hidden_sizes:
            raise ConfigError("conv_channels and hidden_sizes must be non-empty")

    @property
    def is_recurrent(self) -> bool:
        return self.topology in ("lstm", "gru")

    @property
    def has_attention(self) -> bool:
        return self.head in ATTENTION_HEADS

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- heads --------------------------------------------------------------------

class AttentionHead(Module):
    def __init__(self, in_channels: int, num_classes: int, rectifier: str, spatial: bool, rng, dtype):
        if rectifier not in ("softmax", "sigmoid"):
            raise ConfigError(f"unknown rectifier {rectifier!r}")
        self.rectifier = rectifier
        self.spatial = spatial
        kshape = (num_classes, in_channels, 1, 1) if spatial else (num_classes, in_channels, 1)
        self.top_w = uniform_init(rng, kshape, in_channels, dtype)
        self.top_b = zeros_param(num_classes, dtype)
        self.bottom_w = uniform_init(rng, kshape, in_channels, dtype)
        self.bottom_b = zeros_param(num_classes, dtype)

    def _branches(self, h: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``C`` and the normalized attention ``A``, both N×K×positions."""
        if self.spatial:
            n = h.shape[0]
            cls = ad.conv2d(h, self.top_w, self.top_b)
            raw = ad.conv2d(h, self.bottom_w, self.bottom_b)
            k = cls.shape[1]
            cls, raw = cls.reshape(n, k, -1), raw.reshape(n, k, -1)
        else:
            seq = h.transpose(0, 2, 1)  # N×Q×T
            cls = ad.conv1d(seq, self.top_w, self.top_b)
            raw = ad.conv1d(seq, self.bottom_w, self.bottom_b)
        rect = ad.softmax(raw, axis=-1) if self.rectifier == "softmax" else ad.sigmoid(raw)
        total = ad.clamp_min(rect.sum(axis=-1, keepdims=True), ATTENTION_EPS)
        return cls, rect / total

    def __call__(self, h: Tensor) -> Tensor:
        cls, att = self._branches(h)
        return (cls * att).sum(axis=-1)

    def attention(self, h: Tensor) -> Tensor:
        _, att = self._branches(h)
        if self.spatial:
            return att.reshape(att.shape[:2] + h.shape[2:])
        return att


class LinearHead(Module):
    """Affine classifier over a pooled or flattened representation."""

    def __init__(self, mode: str, in_features: int, num_classes: int, rng, dtype):
        self.mode = mode
        self.weight = uniform_init(rng, (num_classes, in_features), in_features, dtype)
        self.bias = zeros_param(num_classes, dtype)

    def pool(self, h: Tensor, spatial: bool) -> Tensor:
        n = h.shape[0]
        if self.mode == "flatten":
            return h.reshape(n, -1)
        if self.mode == "last_time_stamp":
            return h[:, -1, :]
        if spatial:
            return ad.tmax(h.reshape(n, h.shape[1], -1), axis=-1)
        return ad.tmax(h, axis=1)

    def __call__(self, h: Tensor, spatial: bool) -> Tensor:
        return ad.linear(self.pool(h, spatial), self.weight, self.bias)


def cnn_attention_head(h_M, head: AttentionHead) -> Tensor:
    """Attention logits for a CNN feature map ``C'×P'×Q'`` (or batched)."""
    h_M = ad.as_tensor(h_M)
    single = h_M.ndim == 3
    out = head(h_M.reshape(1, *h_M.shape) if single else h_M)
    return out.reshape(out.shape[1:]) if single else out


def rnn_attention_head(h, head: AttentionHead) -> Tensor:
    """Attention logits for a hidden sequence ``T×Q''`` (or batched)."""
    h = ad.as_tensor(h)
    single = h.ndim == 2
    out = head(h.reshape(1, *h.shape) if single else h)
    return out.reshape(out.shape[1:]) if single else out


# -- full classifier ---------------------------------------------------------------

class HeartSoundClassifier(Module):
    """Trunk plus pooling head, producing class log-probabilities."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        k = config.num_classes
        if config.is_recurrent:
            self.trunk = RecurrentStack(config.topology, config.mel_bins, config.hidden_sizes, rng, dtype)
            channels = self.trunk.output_size
            extent = config.input_frames * channels
        else:
            self.trunk = CnnTrunk(config.conv_channels, 1, rng, dtype)
            channels = self.trunk.out_channels
            p, q = self.trunk.output_hw(config.input_frames, config.mel_bins)
            extent = channels * p * q
        if config.has_attention:
            rectifier = config.head.split("_")[1]
            self.head = AttentionHead(channels, k, rectifier, not config.is_recurrent, rng, dtype)
        else:
            width = extent if config.head == "flatten" else channels
            self.head = LinearHead(config.head, width, k, rng, dtype)

    def _prepare(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.dtype != self.dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3:
            raise DimensionError(f"expected a T×M spectrogram or N×T×M batch, got shape {x.shape}")
        cfg = self.config
        if x.shape[2] != cfg.mel_bins:
            raise DimensionError(f"model expects {cfg.mel_bins} mel bins, input has {x.shape[2]}")
        if cfg.head == "flatten" and x.shape[1] != cfg.input_frames:
            raise DimensionError(f"flatten head expects {cfg.input_frames} frames, input has {x.shape[1]}")
        return x

    def features(self, x, train: bool = False) -> Tensor:
        x = self._prepare(x)
        if self.config.is_recurrent:
            return self.trunk(x)
        return self.trunk(x.reshape(x.shape[0], 1, x.shape[1], x.shape[2]), train)

    def logits(self, x, train: bool = False) -> Tensor:
        h = self.features(x, train)
        if isinstance(self.head, AttentionHead):
            return self.head(h)
        return self.head(h, spatial=not self.config.is_recurrent)

    def forward(self, x, train: bool = False) -> Tensor:
        """Log-probabilities, ``N×K`` for batched input or ``K`` for one spectrogram."""
        single = ad.as_tensor(x).ndim == 2
        out = ad.log_softmax(self.logits(x, train), axis=-1)
        return out.reshape(out.shape[1:]) if single else out

    __call__ = forward

    def attention(self, x) -> np.ndarray:
        if not isinstance(self.head, AttentionHead):
            raise ContractError(f"head {self.config.head!r} has no attention map")
        single = ad.as_tensor(x).ndim == 2
        with ad.no_grad():
            att = self.head.attention(self.features(x, train=False)).data
        return att[0] if single else att

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr


def export_attention(model: HeartSoundClassifier, spectrogram) -> np.ndarray:
    """Normalized attention per class: ``K×P'×Q'`` for a CNN, ``K×T`` for an RNN."""
    values = getattr(spectrogram, "values", spectrogram)
    return model.attention(values)
