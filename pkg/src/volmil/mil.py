"""Gated-attention multiple-instance network, hand-derived gradients, and the
training loop.

Forward path per bag of J instance features h_j:

    z_j   = GeLU(W_enc h_j + b_enc)                  adapter, 256 wide
    e_j   = w . (tanh(V z_j) * sigm(U z_j))          gated attention, 64 wide
    a     = softmax(e)
    z_vol = sum_j a_j z_j
    p     = sigm(W_cls z_vol + b_cls)

Gradients are derived by hand (no autograd) and computed in float64
throughout; dropout masks are drawn once per forward pass and shared with the
backward pass. The same backward machinery also yields d p / d h_j for
attribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import AdapterParams, gelu, gelu_grad
from .store import Checkpoint, FeatureBag

HIDDEN = 256
ATTENTION_HIDDEN = 64

PARAM_NAMES = ("W_enc", "b_enc", "V", "U", "w_att", "W_cls", "b_cls")


@dataclass
class MILModel:
    W_enc: np.ndarray    # (256, K)
    b_enc: np.ndarray    # (256,)
    V: np.ndarray        # (64, 256) tanh branch
    U: np.ndarray        # (64, 256) sigmoid branch
    w_att: np.ndarray    # (1, 64) attention head
    W_cls: np.ndarray    # (1, 256)
    b_cls: np.ndarray    # (1,)

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        k = self.W_enc.shape[1]
        expected = {
            "W_enc": (HIDDEN, k), "b_enc": (HIDDEN,),
            "V": (ATTENTION_HIDDEN, HIDDEN), "U": (ATTENTION_HIDDEN, HIDDEN),
            "w_att": (1, ATTENTION_HIDDEN), "W_cls": (1, HIDDEN), "b_cls": (1,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains non-finite values")

    @property
    def K(self) -> int:
        return self.W_enc.shape[1]

    def adapter(self) -> AdapterParams:
        return AdapterParams(W_enc=self.W_enc, b_enc=self.b_enc)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "MILModel":
        return MILModel(**{k: v.copy() for k, v in self.params().items()})


def init_model(k: int, seed: int) -> MILModel:
    """Scaled-Gaussian initialization, std 1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x11717,)))

    def w(rows, cols):
        return rng.standard_normal((rows, cols)) / math.sqrt(cols)

    return MILModel(
        W_enc=w(HIDDEN, k), b_enc=np.zeros(HIDDEN),
        V=w(ATTENTION_HIDDEN, HIDDEN), U=w(ATTENTION_HIDDEN, HIDDEN),
        w_att=w(1, ATTENTION_HIDDEN), W_cls=w(1, HIDDEN), b_cls=np.zeros(1),
    )


@dataclass
class TrainConfig:
    epochs: int = 50
    lr0: float = 2e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    grad_accum: int = 10
    patch_sample_rate: float = 0.5
    dropout: float = 0.5
    attention_dropout: bool = True   # also drop after the gated product
    augment_rotations: bool = False  # patch-level, applies when encoding from volumes
    augment_jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.patch_sample_rate <= 1:
            raise ValueError("patch_sample_rate must be in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class Prediction:
    sample_id: str
    p: float
    logit: float
    attention: np.ndarray   # (J,), sums to 1

    def __post_init__(self):
        if abs(float(self.attention.sum()) - 1.0) > 1e-9:
            raise ValueError("attention weights must sum to 1")


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    # split by sign so the exponential never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> float:
    return float(_sigmoid_arr(np.asarray([x], dtype=np.float64))[0])


def _softplus(x: float) -> float:
    # log(1 + e^x) without overflow
    return x + math.log1p(math.exp(-x)) if x > 0 else math.log1p(math.exp(x))


def attention_scores(Z: np.ndarray, V: np.ndarray, U: np.ndarray,
                     w_att: np.ndarray) -> np.ndarray:
    """Softmax over instances of w . (tanh(V z) * sigm(U z))."""
    Z = np.asarray(Z, dtype=np.float64)
    logits = (np.tanh(Z @ V.T) * _sigmoid_arr(Z @ U.T)) @ w_att.ravel()
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite attention logits")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


@dataclass
class DropoutState:
    """Inverted-dropout masks for one forward pass, reused in backward."""
    z_mask: np.ndarray | None
    g_mask: np.ndarray | None

    @staticmethod
    def draw(rng: np.random.Generator, j: int, rate: float,
             attention_dropout: bool) -> "DropoutState":
        if rate <= 0:
            return DropoutState(None, None)
        keep = 1.0 - rate
        z = (rng.random((j, HIDDEN)) < keep) / keep
        g = ((rng.random((j, ATTENTION_HIDDEN)) < keep) / keep
             if attention_dropout else None)
        return DropoutState(z_mask=z, g_mask=g)


class _ForwardCache:
    __slots__ = ("H", "A1", "Z", "T", "S", "G", "a", "z_vol", "logit", "p", "drop")


def _forward(H: np.ndarray, m: MILModel,
             drop: DropoutState | None = None) -> _ForwardCache:
    c = _ForwardCache()
    c.H = np.asarray(H, dtype=np.float64)
    c.drop = drop
    c.A1 = c.H @ m.W_enc.T + m.b_enc
    c.Z = gelu(c.A1)
    if drop is not None and drop.z_mask is not None:
        c.Z = c.Z * drop.z_mask
    c.T = np.tanh(c.Z @ m.V.T)
    c.S = _sigmoid_arr(c.Z @ m.U.T)
    c.G = c.T * c.S
    if drop is not None and drop.g_mask is not None:
        c.G = c.G * drop.g_mask
    logits = c.G @ m.w_att.ravel()
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite attention logits")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    c.a = e / e.sum()
    c.z_vol = c.a @ c.Z
    c.logit = float(m.W_cls.ravel() @ c.z_vol + m.b_cls[0])
    c.p = float(_sigmoid_arr(np.array([c.logit]))[0])
    return c


def _backward(c: _ForwardCache, m: MILModel, dlogit: float,
              want_input_grad: bool = False):
    """Hand-derived gradients of (dlogit * logit-path) for all parameters and
    optionally the bag features. dlogit = p - y gives BCE gradients;
    dlogit = p (1 - p) gives gradients of the probability itself."""
    grads: dict[str, np.ndarray] = {}
    grads["W_cls"] = (dlogit * c.z_vol)[None, :]
    grads["b_cls"] = np.array([dlogit])
    dz_vol = dlogit * m.W_cls.ravel()

    dZ = np.outer(c.a, dz_vol)
    da = c.Z @ dz_vol
    de = c.a * (da - float(c.a @ da))        # softmax backward

    dG = np.outer(de, m.w_att.ravel())
    grads["w_att"] = (de @ c.G)[None, :]
    if c.drop is not None and c.drop.g_mask is not None:
        dG = dG * c.drop.g_mask

    dT = dG * c.S
    dS = dG * c.T
    d_pre_t = dT * (1.0 - c.T * c.T)
    d_pre_s = dS * c.S * (1.0 - c.S)
    grads["V"] = d_pre_t.T @ c.Z
    grads["U"] = d_pre_s.T @ c.Z
    dZ = dZ + d_pre_t @ m.V + d_pre_s @ m.U

    if c.drop is not None and c.drop.z_mask is not None:
        dZ = dZ * c.drop.z_mask
    dA1 = dZ * gelu_grad(c.A1)
    grads["W_enc"] = dA1.T @ c.H
    grads["b_enc"] = dA1.sum(axis=0)

    if want_input_grad:
        return grads, dA1 @ m.W_enc
    return grads


def bag_forward(H: np.ndarray, m: MILModel,
                dropout_state: DropoutState | None = None,
                sample_id: str = "") -> Prediction:
    c = _forward(H, m, dropout_state)
    return Prediction(sample_id=sample_id, p=c.p, logit=c.logit, attention=c.a)


def predict(m: MILModel, bag: FeatureBag) -> Prediction:
    """Deterministic evaluation-mode forward pass over a stored bag."""
    H = bag.features.astype(np.float64)
    if H.shape[1] != m.K:
        raise ValueError(f"bag K={H.shape[1]} does not match model K={m.K}")
    return bag_forward(H, m, sample_id=bag.sample_id)


def probability_input_gradient(m: MILModel, H: np.ndarray):
    """(p, d p / d H) in evaluation mode; the attribution building block."""
    c = _forward(H, m)
    _, dH = _backward(c, m, dlogit=c.p * (1.0 - c.p), want_input_grad=True)
    return c.p, dH


def _bce_from_logit(logit: float, y: int) -> float:
    # softplus form: -y*log p - (1-y)*log(1-p) = softplus(logit) - y*logit
    return _softplus(logit) - y * logit


def loss_and_gradients(bags, labels, m: MILModel,
                       dropout_states=None):
    """Mean BCE over a batch of bags plus gradients for every parameter."""
    n = len(bags)
    if n != len(labels):
        raise ValueError("bags and labels length mismatch")
    total_loss = 0.0
    acc = {name: np.zeros_like(getattr(m, name)) for name in PARAM_NAMES}
    for i, (H, y) in enumerate(zip(bags, labels)):
        if y not in (0, 1):
            raise ValueError("labels must be 0 or 1")
        drop = None if dropout_states is None else dropout_states[i]
        c = _forward(H, m, drop)
        total_loss += _bce_from_logit(c.logit, y)
        grads = _backward(c, m, dlogit=(c.p - y) / n)
        for name in PARAM_NAMES:
            acc[name] += grads[name]
    return total_loss / n, acc


def cosine_lr(t: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr0 toward lr_min over the epoch count."""
    raw = cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * t / cfg.epochs))
    return max(cfg.lr_min, raw)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def zeros(model: MILModel) -> "AdamWState":
        return AdamWState(
            m={k: np.zeros_like(v) for k, v in model.params().items()},
            v={k: np.zeros_like(v) for k, v in model.params().items()},
        )


def adamw_step(model: MILModel, grads: dict[str, np.ndarray],
               state: AdamWState, lr_t: float, cfg: TrainConfig) -> None:
    """Decoupled update: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name in PARAM_NAMES:
        g = grads[name]
        theta = getattr(model, name)
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        theta -= lr_t * (m_hat / (np.sqrt(v_hat) + cfg.eps)
                         + cfg.weight_decay * theta)


def subsample_instances(bag: FeatureBag, rate: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Indices of a stratified instance subsample: the rate applies within
    each depth-origin group (per plane / per cuboid slab), so no region of the
    volume is dropped wholesale."""
    groups = bag.depth_groups()
    chosen: list[np.ndarray] = []
    for depth in np.unique(groups):
        idx = np.nonzero(groups == depth)[0]
        n_keep = max(1, int(round(rate * len(idx))))
        pick = rng.permutation(len(idx))[:n_keep]
        chosen.append(idx[np.sort(pick)])
    return np.concatenate(chosen)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)


def train(bags: list[FeatureBag], labels: list[int], cfg: TrainConfig,
          model: MILModel | None = None):
    """Full training loop: per-sample instance subsampling, dropout, gradient
    accumulation, AdamW with cosine decay. Returns (model, log)."""
    if len(bags) < 2:
        raise ValueError("need at least 2 training samples")
    labels = [int(y) for y in labels]
    if len(set(labels)) < 2:
        raise ValueError("training cohort must contain both labels")
    k = bags[0].features.shape[1]
    for b in bags:
        if b.features.shape[1] != k:
            raise ValueError("all bags must share one feature dimension")

    # Standardize features over the training cohort so every dimension is
    # unit-scale for the optimizer. The shift and scale are affine, so they
    # fold exactly into (W_enc, b_enc) afterwards: the returned model operates
    # on raw features and no scaler travels with it.
    stacked = np.vstack([b.features.astype(np.float64) for b in bags])
    mu = stacked.mean(axis=0)
    sd = stacked.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)

    if model is None:
        model = init_model(k, cfg.seed)
    else:
        # incoming model is raw-space; move it to standardized space
        model = model.copy()
        model.b_enc = model.b_enc + model.W_enc @ mu
        model.W_enc = model.W_enc * sd[None, :]
    state = AdamWState.zeros(model)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0x7124A,)))
    log = TrainLog()

    features = [(b.features.astype(np.float64) - mu) / sd for b in bags]
    order = np.arange(len(bags))

    for epoch in range(cfg.epochs):
        lr_t = cosine_lr(epoch, cfg)
        rng.shuffle(order)
        epoch_loss = 0.0
        acc = {name: np.zeros_like(getattr(model, name)) for name in PARAM_NAMES}
        n_acc = 0
        for sample_index in order:
            bag = bags[sample_index]
            keep = subsample_instances(bag, cfg.patch_sample_rate, rng)
            H = features[sample_index][keep]
            drop = DropoutState.draw(rng, len(keep), cfg.dropout,
                                     cfg.attention_dropout)
            c = _forward(H, model, drop)
            epoch_loss += _bce_from_logit(c.logit, labels[sample_index])
            grads = _backward(c, model, dlogit=c.p - labels[sample_index])
            for name in PARAM_NAMES:
                acc[name] += grads[name]
            n_acc += 1
            if n_acc == cfg.grad_accum:
                for name in PARAM_NAMES:
                    acc[name] /= n_acc
                adamw_step(model, acc, state, lr_t, cfg)
                acc = {name: np.zeros_like(getattr(model, name))
                       for name in PARAM_NAMES}
                n_acc = 0
        if n_acc:
            # flush the leftover partial window at epoch end
            for name in PARAM_NAMES:
                acc[name] /= n_acc
            adamw_step(model, acc, state, lr_t, cfg)
        log.epochs.append({"epoch": epoch, "loss": epoch_loss / len(bags),
                           "lr": lr_t})

    # fold the standardization back so the model consumes raw features:
    # W'((h - mu)/sd) + b'  ==  (W'/sd) h + (b' - W' (mu/sd))
    model.b_enc = model.b_enc - model.W_enc @ (mu / sd)
    model.W_enc = model.W_enc / sd[None, :]
    return model, log, state


# ---------------------------------------------------------------------------
# Checkpoint bridge

def model_to_checkpoint(model: MILModel, state: AdamWState,
                        config_hash: bytes, seed: int) -> Checkpoint:
    return Checkpoint(
        params={k: v.copy() for k, v in model.params().items()},
        opt_m={k: v.copy() for k, v in state.m.items()},
        opt_v={k: v.copy() for k, v in state.v.items()},
        step=state.step, config_hash=config_hash, seed=seed,
    )


def model_from_checkpoint(ck: Checkpoint):
    missing = set(PARAM_NAMES) - set(ck.params)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    model = MILModel(**{name: ck.params[name] for name in PARAM_NAMES})
    state = AdamWState(
        m={k: np.asarray(v, dtype=np.float64) for k, v in ck.opt_m.items()},
        v={k: np.asarray(v, dtype=np.float64) for k, v in ck.opt_v.items()},
        step=ck.step,
    )
    return model, state
