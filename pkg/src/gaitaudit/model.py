"""Four-branch 1D-CNN with sensor-level softmax attention and a 2-layer head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

SENSORS = ("HE", "LB", "LF", "RF")


@dataclass
class ModelConfig:
    n_sensors: int = 4
    n_channels: int = 9
    conv_filters: list[int] = field(default_factory=lambda: [32, 64, 128])
    kernel_size: int = 15
    padding: int = 7
    pool_k: int = 2
    feature_dim: int = 128
    classifier_hidden: int = 64
    dropout_p: float = 0.5
    # "shared": one feature_dim -> 1 scorer applied to every sensor vector
    # "concat": one (n_sensors*feature_dim) -> n_sensors map
    attn_mode: str = "shared"
    normalize_input: bool = True

    def __post_init__(self):
        self.conv_filters = list(self.conv_filters)
        if self.feature_dim != self.conv_filters[-1]:
            raise ValueError("feature_dim must equal the last conv filter count")
        if self.attn_mode not in ("shared", "concat"):
            raise ValueError(f"unknown attn_mode {self.attn_mode!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def min_length(self) -> int:
        # smallest T that survives every conv+pool stage with >= 1 sample
        t = 1
        for _ in self.conv_filters:
            t = t * self.pool_k
            t = t - 2 * self.padding + self.kernel_size - 1
        return max(t, 1)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AttentionRecord:
    trial_id: str
    e: np.ndarray
    alpha: np.ndarray
    logit: float


class MultiStreamModel:
    """Parameter container; names follow ``branch{i}.conv{j}.w`` etc."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError("state dict keys do not match model parameters")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)

    def copy(self) -> "MultiStreamModel":
        m = MultiStreamModel(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})
        return m


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for s in range(cfg.n_sensors):
        c_in = cfg.n_channels
        for j, c_out in enumerate(cfg.conv_filters):
            shapes[f"branch{s}.conv{j}.w"] = (c_out, c_in, cfg.kernel_size)
            shapes[f"branch{s}.conv{j}.b"] = (c_out,)
            c_in = c_out
    if cfg.attn_mode == "shared":
        shapes["attn.w"] = (1, cfg.feature_dim)
        shapes["attn.b"] = (1,)
    else:
        shapes["attn.w"] = (cfg.n_sensors, cfg.n_sensors * cfg.feature_dim)
        shapes["attn.b"] = (cfg.n_sensors,)
    shapes["clf.0.w"] = (cfg.classifier_hidden, cfg.feature_dim)
    shapes["clf.0.b"] = (cfg.classifier_hidden,)
    shapes["clf.1.w"] = (1, cfg.classifier_hidden)
    shapes["clf.1.b"] = (1,)
    return shapes


def init_model(cfg: ModelConfig, seed: int) -> MultiStreamModel:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return MultiStreamModel(cfg, params)


def normalize_trial(x: np.ndarray) -> np.ndarray:
    """Z-score each (sensor, channel) row over time; flat rows become zero."""
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (x - mu) / sd


def branch_forward(model: MultiStreamModel, sensor_index: int, x) -> Tensor:
    """One sensor's CNN: (C, T) or (N, C, T) -> (F,) or (N, F)."""
    cfg = model.cfg
    x = nd.as_tensor(x)
    if x.shape[-1] < cfg.min_length:
        raise nd.InputTooShortError(f"trial length {x.shape[-1]} < minimum {cfg.min_length}")
    h = x
    for j in range(len(cfg.conv_filters)):
        h = nd.conv1d(h, model[f"branch{sensor_index}.conv{j}.w"], model[f"branch{sensor_index}.conv{j}.b"], cfg.padding)
        h = nd.relu(h)
        h = nd.maxpool1d(h, cfg.pool_k)
    return nd.adaptive_avg_pool_to_1(h)


def forward_batch(
    model: MultiStreamModel,
    x,
    training: bool = False,
    rng: np.random.Generator | None = None,
    attn_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Run a batch (N, S, C, T) through the network.

    Input is taken as-is (normalisation happens in :func:`prepare`). Returns
    (logits (N,), alpha (N, S), e (N, S)).
    """
    cfg = model.cfg
    x = nd.as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] != cfg.n_sensors or x.shape[2] != cfg.n_channels:
        raise nd.DimensionError(
            f"expected (N, {cfg.n_sensors}, {cfg.n_channels}, T) input, got {x.shape}"
        )
    n = x.shape[0]
    if x.requires_grad:
        xs = [_select_sensor(x, s) for s in range(cfg.n_sensors)]
    else:
        xs = [Tensor(x.data[:, s]) for s in range(cfg.n_sensors)]
    v = nd.stack([branch_forward(model, s, xs[s]) for s in range(cfg.n_sensors)], axis=1)  # (N, S, F)
    if cfg.attn_mode == "shared":
        e = nd.reshape(nd.linear(v, model["attn.w"], model["attn.b"]), (n, cfg.n_sensors))
    else:
        e = nd.linear(nd.reshape(v, (n, cfg.n_sensors * cfg.feature_dim)), model["attn.w"], model["attn.b"])
    mask = None if attn_mask is None else np.broadcast_to(np.asarray(attn_mask, dtype=bool), e.shape)
    alpha = nd.softmax(e, mask=mask)
    c = nd.weighted_sum(alpha, v)
    h = nd.relu(nd.linear(c, model["clf.0.w"], model["clf.0.b"]))
    h = nd.dropout(h, cfg.dropout_p, training, rng)
    logits = nd.reshape(nd.linear(h, model["clf.1.w"], model["clf.1.b"]), (n,))
    return logits, alpha, e


def _select_sensor(x: Tensor, s: int) -> Tensor:
    def bw(g):
        d = np.zeros_like(x.data)
        d[:, s] = g
        x._accumulate(d)

    return nd._make(x.data[:, s], (x,), "select", bw)


def prepare(model_cfg: ModelConfig, signals: np.ndarray) -> np.ndarray:
    """Stack/normalise raw signals (N, S, C, T) per the model config."""
    x = np.asarray(signals, dtype=np.float64)
    return normalize_trial(x) if model_cfg.normalize_input else x


def forward(model: MultiStreamModel, trial, training: bool = False, rng=None) -> AttentionRecord:
    """Single-trial forward pass returning the attention record."""
    x = prepare(model.cfg, trial.signal[None])
    with nd.no_grad():
        logits, alpha, e = forward_batch(model, x, training, rng)
    return AttentionRecord(trial.trial_id, e.data[0].copy(), alpha.data[0].copy(), float(logits.data[0]))


def predict(model: MultiStreamModel, trials, batch_size: int = 32) -> list[AttentionRecord]:
    """Evaluation-mode forward over a list of trials (no dropout, no graph)."""
    out = []
    for i in range(0, len(trials), batch_size):
        chunk = trials[i:i + batch_size]
        x = prepare(model.cfg, np.stack([t.signal for t in chunk]))
        with nd.no_grad():
            logits, alpha, e = forward_batch(model, x, training=False)
        for j, t in enumerate(chunk):
            out.append(AttentionRecord(t.trial_id, e.data[j].copy(), alpha.data[j].copy(), float(logits.data[j])))
    return out


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"GAITCKPT1\n"


def save_checkpoint(model: MultiStreamModel, path, meta: dict | None = None) -> None:
    """Binary container: magic, u64 header length, JSON header, raw <f8 arrays."""
    names = list(model.params)
    header = {
        "config": asdict(model.cfg),
        "dtype": "<f8",
        "tensors": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for k in names:
            f.write(np.ascontiguousarray(model.params[k].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MultiStreamModel, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    cfg = ModelConfig.from_dict(header["config"])
    params = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        params[spec["name"]] = Tensor(arr, requires_grad=True)
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    expected = param_shapes(cfg)
    if {k: v.shape for k, v in params.items()} != expected:
        raise ValueError(f"{path}: tensors do not match config")
    return MultiStreamModel(cfg, params), header.get("meta", {})
