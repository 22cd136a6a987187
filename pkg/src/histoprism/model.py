"""HistoPrism: cancer-conditioned cross-attention, transformer encoder, MLP head.

Parameters live in a flat ordered ``dict[str, np.ndarray]`` (see
:func:`param_shapes` for the naming scheme). Every stage function accepts a
mapping of name -> array-or-Var, so the same code runs on constants for
inference and on tape leaves for training.

Concrete choices where the architecture description is silent:

* cross-attention output is added back onto the patch features (residual);
  ``ModelConfig.cross_residual=False`` removes it;
* encoder layers are post-norm with a GELU feed-forward of width
  ``4 * d_hidden`` and 1/sqrt(d_k) attention scaling;
* the regression head is ``fc2(gelu(fc1(h)))`` with hidden width ``d_hidden``;
* the loss averages over patches *and* genes;
* no dropout.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Var

log = logging.getLogger(__name__)

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    d_img: int
    d_gene: int
    d_onco: int
    d_hidden: int = 256
    n_cross_layers: int = 1
    n_cross_heads: int = 4
    n_enc_layers: int = 2
    n_enc_heads: int = 8
    use_positional_encoding: bool = False
    use_cross_attention: bool = True
    cross_residual: bool = True
    ffn_mult: int = 4

    def __post_init__(self):
        for name in ("d_img", "d_gene", "d_onco", "d_hidden", "n_cross_layers",
                     "n_cross_heads", "n_enc_layers", "n_enc_heads", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_hidden % self.n_enc_heads:
            raise ValueError("d_hidden must be divisible by n_enc_heads")
        if self.d_img % self.n_cross_heads:
            raise ValueError("d_img must be divisible by n_cross_heads")
        if self.use_positional_encoding and self.d_hidden % 4:
            raise ValueError("2-D positional encoding needs d_hidden divisible by 4")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    max_epochs: int = 1000
    patience: int = 30
    grad_clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("learning_rate", "max_epochs", "patience", "grad_clip_norm", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.seed < 0:
            raise ValueError("weight_decay and seed must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))


@dataclass
class SlideSample:
    patch_features: np.ndarray
    cancer_onehot: np.ndarray
    expression: np.ndarray | None = None
    coords: np.ndarray | None = None
    cancer_label: str = ""
    slide_id: str = ""

    def __post_init__(self):
        self.patch_features = np.asarray(self.patch_features, dtype=np.float64)
        self.cancer_onehot = np.asarray(self.cancer_onehot, dtype=np.float64).reshape(-1)
        if self.patch_features.ndim != 2 or self.patch_features.shape[0] < 1:
            raise ValueError(f"{self.slide_id}: patch_features must be N x d_img with N >= 1")
        check_onehot(self.cancer_onehot)
        n = self.n_patches
        if self.expression is not None:
            self.expression = np.asarray(self.expression, dtype=np.float64)
            if self.expression.ndim != 2 or self.expression.shape[0] != n:
                raise ValueError(f"{self.slide_id}: expression must have {n} rows")
            if not np.all(np.isfinite(self.expression)) or np.any(self.expression < 0):
                raise ValueError(f"{self.slide_id}: expression must be finite and non-negative")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float64)
            if self.coords.shape != (n, 2):
                raise ValueError(f"{self.slide_id}: coords must be {n} x 2")

    @property
    def n_patches(self) -> int:
        return self.patch_features.shape[0]


def check_onehot(c: np.ndarray) -> None:
    c = np.asarray(c).reshape(-1)
    if not np.all((c == 0) | (c == 1)) or c.sum() != 1:
        raise ValueError(f"not a one-hot vector: {c.tolist()}")


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Ordered name -> shape map; the order is the checkpoint order."""
    di, dh, ff = config.d_img, config.d_hidden, config.d_hidden * config.ffn_mult
    shapes: dict[str, tuple[int, int]] = {}

    def linear(prefix, d_in, d_out):
        shapes[f"{prefix}.weight"] = (d_in, d_out)
        shapes[f"{prefix}.bias"] = (1, d_out)

    if config.use_cross_attention:
        shapes["cancer_embed.weight"] = (config.d_onco, di)
        for l in range(config.n_cross_layers):
            for p in "qkvo":
                linear(f"cross.{l}.{p}", di, di)
    linear("hidden_proj", di, dh)
    for l in range(config.n_enc_layers):
        for p in "qkvo":
            linear(f"enc.{l}.attn.{p}", dh, dh)
        shapes[f"enc.{l}.ln1.gain"] = (1, dh)
        shapes[f"enc.{l}.ln1.bias"] = (1, dh)
        linear(f"enc.{l}.ffn1", dh, ff)
        linear(f"enc.{l}.ffn2", ff, dh)
        shapes[f"enc.{l}.ln2.gain"] = (1, dh)
        shapes[f"enc.{l}.ln2.bias"] = (1, dh)
    linear("head.fc1", dh, dh)
    linear("head.fc2", dh, config.d_gene)
    return shapes


def init_params(config: ModelConfig, seed: int) -> Params:
    """Uniform fan-in init (variance 1/fan_in); zero biases, unit LN gains."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            bound = math.sqrt(3.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def n_parameters(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


# ---------------------------------------------------------------------------
# stages


def _linear(x, P, prefix: str) -> Var:
    return T.add(T.matmul(x, P[f"{prefix}.weight"]), P[f"{prefix}.bias"])


def _attention(q: Var, k: Var, v: Var, w_out, n_heads: int) -> Var:
    """Multi-head attention from pre-projected q/k/v; returns sum_h head_h @ W_o[h]."""
    d = q.shape[1]
    dk = d // n_heads
    inv = 1.0 / math.sqrt(dk)
    acc = None
    for h in range(n_heads):
        cols = slice(h * dk, (h + 1) * dk)
        scores = T.scale(T.matmul(T.slice_(q, cols=cols), T.transpose(T.slice_(k, cols=cols))), inv)
        head = T.matmul(T.softmax_rows(scores), T.slice_(v, cols=cols))
        part = T.matmul(head, T.slice_(w_out, rows=cols))
        acc = part if acc is None else T.add(acc, part)
    return acc


def embed_cancer(c, params) -> Var:
    """Dense cancer embedding ``c @ W``; a one-hot ``c`` selects a row of W."""
    c = np.asarray(c.value if isinstance(c, Var) else c, dtype=np.float64).reshape(1, -1)
    check_onehot(c)
    return T.matmul(c, params["cancer_embed.weight"])


def cross_attend(x, c_emb, params, config: ModelConfig, layer: int = 0) -> Var:
    """Patches query a single context token built from the cancer embedding."""
    if not config.use_cross_attention:
        raise ValueError("cross-attention is disabled in this config")
    x = T.as_var(x)
    pre = f"cross.{layer}"
    q = _linear(x, params, f"{pre}.q")
    k = _linear(c_emb, params, f"{pre}.k")
    v = _linear(c_emb, params, f"{pre}.v")
    out = T.add(_attention(q, k, v, params[f"{pre}.o.weight"], config.n_cross_heads),
                params[f"{pre}.o.bias"])
    return T.add(x, out) if config.cross_residual else out


def positional_encoding_2d(coords: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal encoding; first half of the columns encodes coord 0, second half coord 1."""
    coords = np.asarray(coords, dtype=np.float64)
    half = d // 2
    freqs = 1.0 / 10000.0 ** (np.arange(0, half, 2) / half)
    pe = np.empty((coords.shape[0], d))
    for axis in range(2):
        ang = coords[:, axis : axis + 1] * freqs[None, :]
        block = pe[:, axis * half : (axis + 1) * half]
        block[:, 0::2] = np.sin(ang)
        block[:, 1::2] = np.cos(ang)
    return pe


def encoder_layer(h: Var, params, config: ModelConfig, layer: int) -> Var:
    pre = f"enc.{layer}"
    q = _linear(h, params, f"{pre}.attn.q")
    k = _linear(h, params, f"{pre}.attn.k")
    v = _linear(h, params, f"{pre}.attn.v")
    attn = T.add(_attention(q, k, v, params[f"{pre}.attn.o.weight"], config.n_enc_heads),
                 params[f"{pre}.attn.o.bias"])
    h = T.layer_norm(T.add(h, attn), params[f"{pre}.ln1.gain"], params[f"{pre}.ln1.bias"])
    ff = _linear(T.gelu(_linear(h, params, f"{pre}.ffn1")), params, f"{pre}.ffn2")
    return T.layer_norm(T.add(h, ff), params[f"{pre}.ln2.gain"], params[f"{pre}.ln2.bias"])


def encode(x_cond, params, config: ModelConfig, coords=None) -> Var:
    """Project to d_hidden, optionally add 2-D PE, run the encoder stack."""
    h = _linear(T.as_var(x_cond), params, "hidden_proj")
    if config.use_positional_encoding:
        if coords is None:
            raise ValueError("positional encoding is enabled but no coords were given")
        h = T.add(h, positional_encoding_2d(coords, config.d_hidden))
    for l in range(config.n_enc_layers):
        h = encoder_layer(h, params, config, l)
    return h


def regress(h, params) -> Var:
    """Row-wise MLP head."""
    return _linear(T.gelu(_linear(T.as_var(h), params, "head.fc1")), params, "head.fc2")


def forward_var(sample: SlideSample, params, config: ModelConfig) -> Var:
    x = T.as_var(sample.patch_features)
    if x.shape[1] != config.d_img:
        raise T.ShapeError(f"patch features have {x.shape[1]} columns, config expects {config.d_img}")
    if config.use_cross_attention:
        if sample.cancer_onehot.size != config.d_onco:
            raise T.ShapeError(f"one-hot has length {sample.cancer_onehot.size}, expected {config.d_onco}")
        c_emb = embed_cancer(sample.cancer_onehot, params)
        for l in range(config.n_cross_layers):
            x = cross_attend(x, c_emb, params, config, l)
    h = encode(x, params, config, sample.coords)
    return regress(h, params)


def forward(sample: SlideSample, params: Mapping[str, np.ndarray], config: ModelConfig) -> np.ndarray:
    """Predicted expression, N x d_gene."""
    return forward_var(sample, params, config).value


def mse_loss(pred, truth) -> Var:
    pred, truth = T.as_var(pred), T.as_var(truth)
    if pred.shape != truth.shape:
        raise T.ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {truth.shape}")
    return T.mean(T.square(T.sub(pred, truth)))


def loss_and_grads(sample: SlideSample, params: Params, config: ModelConfig) -> tuple[float, Params]:
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    loss = mse_loss(forward_var(sample, leaves, config), sample.expression)
    return float(loss.value[0, 0]), tape.gradient(loss, leaves)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rejected: int = 0


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}


def optimizer_step(params: Params, grads: Mapping[str, np.ndarray], state: AdamWState,
                   tc: TrainConfig) -> bool:
    """One AdamW update, in place. Returns False (and leaves params untouched)
    when any gradient entry is non-finite."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.rejected += 1
        log.warning("non-finite gradient at step %d; update rejected", state.step + 1)
        return False
    state.step += 1
    t = state.step
    b1, b2, lr = tc.beta1, tc.beta2, tc.learning_rate
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        p *= 1.0 - lr * tc.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)
    return True


@dataclass
class TrainingTrace:
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""
    rejected_steps: int = 0

    @property
    def epochs(self) -> int:
        return len(self.val_mse)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainingTrace":
        return cls(**dict(d))


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, trace: TrainingTrace):
        super().__init__(msg)
        self.trace = trace


def dataset_mse(samples: Sequence[SlideSample], params, config: ModelConfig) -> float:
    """Squared error pooled over every entry of every slide."""
    sse = 0.0
    n = 0
    for s in samples:
        d = forward(s, params, config) - s.expression
        sse += float(np.sum(d * d))
        n += d.size
    return sse / n


def train(train_set: Sequence[SlideSample], val_set: Sequence[SlideSample], config: ModelConfig,
          tc: TrainConfig, init: Params | None = None) -> tuple[Params, TrainingTrace]:
    """One slide per step, early stopping on pooled validation MSE.

    The output bias starts at the per-gene mean of the training expression so
    that the head does not spend its first epochs climbing to the data offset.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    for s in (*train_set, *val_set):
        if s.expression is None:
            raise ValueError(f"slide {s.slide_id!r} has no expression")

    init_seq, shuffle_seq = np.random.SeedSequence(tc.seed).spawn(2)
    if init is None:
        params = init_params(config, int(init_seq.generate_state(1)[0]))
        stacked = np.concatenate([s.expression for s in train_set], axis=0)
        params["head.fc2.bias"] = stacked.mean(axis=0, keepdims=True)
    else:
        params = {k: np.array(v, copy=True) for k, v in init.items()}
    rng = np.random.Generator(np.random.PCG64(shuffle_seq))
    state = AdamWState()
    trace = TrainingTrace()
    best = math.inf
    best_params = copy.deepcopy(params)
    since = 0

    for epoch in range(tc.max_epochs):
        losses, norms = [], []
        for i in rng.permutation(len(train_set)):
            loss, grads = loss_and_grads(train_set[i], params, config)
            if not math.isfinite(loss):
                trace.stop_reason = "diverged"
                raise TrainingDiverged(f"non-finite training loss in epoch {epoch}", trace)
            norms.append(global_grad_norm(grads))
            optimizer_step(params, clip_gradients(grads, tc.grad_clip_norm), state, tc)
            losses.append(loss)
        val = dataset_mse(val_set, params, config)
        trace.train_loss.append(float(np.mean(losses)))
        trace.grad_norm.append(float(np.mean(norms)))
        trace.val_mse.append(val)
        trace.rejected_steps = state.rejected
        if not math.isfinite(val):
            trace.stop_reason = "diverged"
            raise TrainingDiverged(f"non-finite validation MSE in epoch {epoch}", trace)
        if val < best:
            best, since = val, 0
            best_params = copy.deepcopy(params)
            trace.best_epoch = epoch
        else:
            since += 1
            if since >= tc.patience:
                trace.stop_reason = "early_stopping"
                break
        log.debug("epoch %d train %.5f val %.5f", epoch, trace.train_loss[-1], val)
    else:
        trace.stop_reason = "max_epochs"
    return best_params, trace
