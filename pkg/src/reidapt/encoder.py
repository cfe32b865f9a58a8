"""A small feed-forward encoder with hand-derived gradients.

One hidden layer (d_in -> h -> d, tanh by default) stands in for a deep
backbone, plus a linear softmax classifier whose width tracks the current
number of pseudo-classes. Adam with decoupled weight decay drives updates;
all compute is float64 so finite-difference checks are tight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import read_features, write_features

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 5e-4

ENCODER_PARAMS = ("w1", "b1", "w2", "b2")
CLASSIFIER_PARAMS = ("wc", "bc")


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class EncoderState:
    w1: np.ndarray                 # (d_in, h)
    b1: np.ndarray                 # (h,)
    w2: np.ndarray                 # (h, d)
    b2: np.ndarray                 # (d,)
    wc: np.ndarray | None = None   # (L, d) classifier, rebuilt per epoch
    bc: np.ndarray | None = None   # (L,)
    activation: str = "tanh"
    adam: dict = field(default_factory=dict)
    step: int = 0

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.w2.shape[1]

    @property
    def num_classes(self) -> int:
        return 0 if self.wc is None else self.wc.shape[0]

    def params(self) -> dict:
        out = {name: getattr(self, name) for name in ENCODER_PARAMS}
        if self.wc is not None:
            out["wc"], out["bc"] = self.wc, self.bc
        return out


def init_encoder(d_in: int, hidden: int, feat_dim: int, rng,
                 activation: str = "tanh") -> EncoderState:
    if activation not in ("tanh", "identity"):
        raise ValueError(f"unknown activation {activation!r}")
    return EncoderState(
        w1=rng.standard_normal((d_in, hidden)) / np.sqrt(d_in),
        b1=np.zeros(hidden),
        w2=rng.standard_normal((hidden, feat_dim)) / np.sqrt(hidden),
        b2=np.zeros(feat_dim),
        activation=activation,
    )


def init_classifier(state: EncoderState, num_classes: int, rng,
                    scale: float = 0.01):
    """(Re)build the classifier head; its Adam slots reset, encoder untouched."""
    state.wc = scale * rng.standard_normal((num_classes, state.feat_dim))
    state.bc = np.zeros(num_classes)
    for name in CLASSIFIER_PARAMS:
        state.adam.pop(name, None)


def forward(state: EncoderState, x: np.ndarray):
    """Encode a batch; returns (features, cache) with the cache feeding backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != state.d_in:
        raise ValueError(f"expected (B, {state.d_in}) input, got {x.shape}")
    z1 = x @ state.w1 + state.b1
    a1 = np.tanh(z1) if state.activation == "tanh" else z1
    feats = a1 @ state.w2 + state.b2
    return feats, (x, a1)


def backward(state: EncoderState, cache, grad_feats: np.ndarray):
    """Exact gradients of the encoder parameters and the batch inputs."""
    x, a1 = cache
    grad_feats = np.asarray(grad_feats, dtype=np.float64)
    if grad_feats.shape != (len(x), state.feat_dim):
        raise ValueError("gradient shape does not match the forward cache")
    g_w2 = a1.T @ grad_feats
    g_b2 = grad_feats.sum(axis=0)
    g_a1 = grad_feats @ state.w2.T
    g_z1 = g_a1 * (1.0 - a1 * a1) if state.activation == "tanh" else g_a1
    grads = {
        "w1": x.T @ g_z1,
        "b1": g_z1.sum(axis=0),
        "w2": g_w2,
        "b2": g_b2,
    }
    return grads, g_z1 @ state.w1.T


def classifier_forward(state: EncoderState, feats: np.ndarray) -> np.ndarray:
    """Class probabilities via max-shifted softmax; rows sum to one."""
    if state.wc is None:
        raise ValueError("classifier not initialized")
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[1] != state.feat_dim:
        raise ValueError("feature width does not match the classifier")
    logits = feats @ state.wc.T + state.bc
    logits = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    return expd / expd.sum(axis=1, keepdims=True)


def classifier_backward(state: EncoderState, feats: np.ndarray,
                        grad_logits: np.ndarray):
    """Gradients of the classifier and its feature input given dL/dlogits."""
    grads = {
        "wc": grad_logits.T @ feats,
        "bc": grad_logits.sum(axis=0),
    }
    return grads, grad_logits @ state.wc


def adam_step(state: EncoderState, grads: dict, lr: float,
              weight_decay: float = WEIGHT_DECAY):
    """One Adam update with decoupled weight decay on every listed parameter."""
    for name, g in grads.items():
        param = getattr(state, name)
        slot = state.adam.get(name)
        if slot is None or slot.m.shape != param.shape:
            slot = AdamSlot(np.zeros_like(param), np.zeros_like(param))
            state.adam[name] = slot
        slot.t += 1
        slot.m = ADAM_BETA1 * slot.m + (1.0 - ADAM_BETA1) * g
        slot.v = ADAM_BETA2 * slot.v + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = slot.m / (1.0 - ADAM_BETA1 ** slot.t)
        v_hat = slot.v / (1.0 - ADAM_BETA2 ** slot.t)
        update = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if weight_decay:
            update = update + lr * weight_decay * param
        setattr(state, name, param - update)
    state.step += 1


@dataclass(frozen=True)
class LrSchedule:
    """Warmup then step decay; the warmup ramps from base_lr/10 to base_lr."""

    base_lr: float
    warmup_epochs: int = 0
    decay_epochs: tuple = ()
    decay_factor: float = 10.0

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError("base_lr must be nonnegative")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError("decay epochs must be strictly increasing")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.warmup_epochs and epoch < schedule.warmup_epochs:
        frac = epoch / schedule.warmup_epochs
        return schedule.base_lr * (0.1 + 0.9 * frac)
    drops = sum(1 for e in schedule.decay_epochs if epoch >= e)
    return schedule.base_lr / schedule.decay_factor ** drops


def pretrain_schedule(base_lr: float = 3.5e-4) -> LrSchedule:
    """Source pretraining profile: 10-epoch linear warmup, /10 at 40 and 70."""
    return LrSchedule(base_lr, warmup_epochs=10, decay_epochs=(40, 70))


def adapt_schedule(base_lr: float = 3.5e-4, decay_epoch: int = 20) -> LrSchedule:
    """Adaptation profile: constant then /10 at the decay epoch."""
    return LrSchedule(base_lr, warmup_epochs=0, decay_epochs=(decay_epoch,))


def save_checkpoint(prefix, state: EncoderState):
    """Flattened float32 parameters plus a JSON sidecar of shapes and step."""
    prefix = str(prefix)
    params = state.params()
    order = [name for name in (*ENCODER_PARAMS, *CLASSIFIER_PARAMS) if name in params]
    flat = np.concatenate([params[name].ravel() for name in order])
    write_features(prefix + ".drft", flat[None, :])
    sidecar = {
        "order": order,
        "shapes": {name: list(params[name].shape) for name in order},
        "activation": state.activation,
        "step": state.step,
    }
    with open(prefix + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=0, sort_keys=True)


def load_checkpoint(prefix) -> EncoderState:
    prefix = str(prefix)
    with open(prefix + ".json") as fh:
        sidecar = json.load(fh)
    flat = read_features(prefix + ".drft")[0]
    fields = {}
    offset = 0
    for name in sidecar["order"]:
        shape = tuple(sidecar["shapes"][name])
        size = int(np.prod(shape))
        fields[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    if offset != len(flat):
        raise ValueError("checkpoint payload does not match its sidecar shapes")
    state = EncoderState(
        w1=fields["w1"], b1=fields["b1"], w2=fields["w2"], b2=fields["b2"],
        wc=fields.get("wc"), bc=fields.get("bc"),
        activation=sidecar["activation"], step=int(sidecar["step"]),
    )
    return state
