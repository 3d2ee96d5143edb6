"""MIL bag classifiers built on :mod:`deepbcr.gradcore`.

``deep_bcr``
    Instances are projected to ``d_h`` dims, correlated against ``2K``
    learned prototype vectors (``K`` per risk class), and the correlation
    profile drives a tanh attention MLP. Attention-pooled embedding feeds a
    logistic head.

``gated_attention``
    Gated attention pooling (tanh branch times sigmoid gate) over the same
    projection and head; the comparison baseline.

The scalar output bias of the attention MLP is omitted in both models: the
softmax over instances is invariant to it, so it would never receive a
gradient.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .errors import EmptyBag, ShapeMismatch

MODEL_KINDS = ("deep_bcr", "gated_attention")


@dataclass(frozen=True)
class Hyper:
    d_h: int = 512
    n_prototypes: int = 4  # per risk class
    h_a: int = 128
    dropout: float = 0.25

    def __post_init__(self):
        if min(self.d_h, self.n_prototypes, self.h_a) < 1:
            raise ValueError(f"hyperparameters must be >= 1: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class MilParams:
    kind: str
    feature_dim: int
    hyper: Hyper
    tensors: dict[str, gc.Tensor] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.tensors.items()}

    def load_arrays(self, arrays):
        for k, t in self.tensors.items():
            if arrays[k].shape != t.value.shape:
                raise ShapeMismatch(f"{k}: stored {arrays[k].shape} vs model {t.value.shape}")
            t.value = np.array(arrays[k], dtype=np.float64)

    def meta(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim, "hyper": asdict(self.hyper)}


@dataclass
class BagPrediction:
    probability: float
    attention: np.ndarray
    similarities: np.ndarray | None = None


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def _glorot(rng, fan_in, fan_out):
    a = glorot_bound(fan_in, fan_out)
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(kind: str, feature_dim: int, hyper: Hyper = Hyper(), seed: int = 0) -> MilParams:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")
    rng = np.random.default_rng(seed)
    d, dh, ha = feature_dim, hyper.d_h, hyper.h_a
    arrays = {
        "proj_w": _glorot(rng, d, dh),
        "proj_b": np.zeros((1, dh)),
    }
    if kind == "deep_bcr":
        k2 = 2 * hyper.n_prototypes
        arrays["prototypes"] = rng.normal(0.0, 1.0 / math.sqrt(dh), size=(k2, dh))
        arrays["attn_w1"] = _glorot(rng, k2, ha)
        arrays["attn_b1"] = np.zeros((1, ha))
    else:
        arrays["gate_u"] = _glorot(rng, dh, ha)
        arrays["gate_ub"] = np.zeros((1, ha))
        arrays["gate_v"] = _glorot(rng, dh, ha)
        arrays["gate_vb"] = np.zeros((1, ha))
    arrays["attn_w2"] = _glorot(rng, ha, 1)
    arrays["head_w"] = _glorot(rng, dh, 1)
    arrays["head_b"] = np.zeros((1, 1))
    tensors = {k: gc.parameter(v, name=k) for k, v in arrays.items()}
    return MilParams(kind, feature_dim, hyper, tensors)


def params_from_arrays(meta: dict, arrays: dict[str, np.ndarray]) -> MilParams:
    params = init_params(meta["kind"], int(meta["feature_dim"]), Hyper(**meta["hyper"]), seed=0)
    params.load_arrays(arrays)
    return params


def _check_input(x, params: MilParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyBag(f"bag must be a non-empty N x D matrix, got shape {x.shape}")
    if x.shape[1] != params.feature_dim:
        raise ShapeMismatch(f"bag has D={x.shape[1]}, model expects {params.feature_dim}")
    return x


def forward_graph(params: MilParams, x, train: bool = False, rng=None):
    """Build the recorded computation for one bag.

    Returns ``(probability, attention, similarities)`` tensors; attention has
    shape ``(1, N)``; similarities is ``None`` for the gated baseline.
    """
    x = _check_input(x, params)
    p = params.tensors
    h = gc.relu(gc.add(gc.matmul(x, p["proj_w"]), p["proj_b"]))
    h = gc.dropout(h, params.hyper.dropout, rng, train)
    sims = None
    if params.kind == "deep_bcr":
        sims = gc.scale(gc.matmul(h, gc.transpose(p["prototypes"])), 1.0 / math.sqrt(params.hyper.d_h))
        hidden = gc.tanh(gc.add(gc.matmul(sims, p["attn_w1"]), p["attn_b1"]))
    else:
        branch = gc.tanh(gc.add(gc.matmul(h, p["gate_u"]), p["gate_ub"]))
        gate = gc.sigmoid(gc.add(gc.matmul(h, p["gate_v"]), p["gate_vb"]))
        hidden = gc.mul(branch, gate)
    scores = gc.matmul(hidden, p["attn_w2"])  # (N, 1)
    attention = gc.row_softmax(gc.transpose(scores))  # (1, N)
    z = gc.matmul(attention, h)  # (1, d_h)
    prob = gc.sigmoid(gc.add(gc.matmul(z, p["head_w"]), p["head_b"]))
    return prob, attention, sims


def _prediction(params, x, train, rng) -> BagPrediction:
    prob, attention, sims = forward_graph(params, x, train, rng)
    return BagPrediction(
        probability=prob.item(),
        attention=attention.value[0].copy(),
        similarities=None if sims is None else sims.value.copy(),
    )


def deep_bcr_forward(features, params: MilParams, train: bool = False, rng=None) -> BagPrediction:
    if params.kind != "deep_bcr":
        raise ValueError(f"expected deep_bcr parameters, got {params.kind}")
    return _prediction(params, features, train, rng)


def gated_attention_forward(features, params: MilParams, train: bool = False, rng=None) -> BagPrediction:
    if params.kind != "gated_attention":
        raise ValueError(f"expected gated_attention parameters, got {params.kind}")
    return _prediction(params, features, train, rng)


def predict(params: MilParams, features) -> BagPrediction:
    """Eval-mode prediction for either model kind."""
    return _prediction(params, features, False, None)
