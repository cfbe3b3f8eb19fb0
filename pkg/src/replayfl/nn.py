"""Dense numerical core for the compact transformer classifier head.

The head maps a frozen-encoder feature vector to class logits:

    project d_in -> d_model, run L post-norm transformer encoder layers
    over the projection treated as a one-token sequence, then apply a
    linear classifier (one weight row per class).

With a single token the attention softmax is over one position and is
identically 1, so attention reduces to the value/output projections plus
the residual; the query/key parameters exist but receive zero gradient.

Everything here works on float64 numpy arrays, is deterministic, and is
purely functional: no routine mutates its inputs, so parameter trees can
be shared freely between threads and rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterator

import numpy as np
from scipy.special import erf

from .errors import ConfigError, LabelError, NumericsError, ShapeError

LN_EPS = 1e-5

_TOP_FIELDS = ("proj_w", "proj_b", "cls_w", "cls_b")
_LAYER_FIELDS = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "w_up", "b_up", "w_down", "b_down",
    "ln1_g", "ln1_b", "ln2_g", "ln2_b",
)


@dataclass
class EncoderLayerParams:
    """One post-norm encoder layer: attention, feed-forward, two layer norms."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    w_up: np.ndarray
    b_up: np.ndarray
    w_down: np.ndarray
    b_down: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class HeadParams:
    """All trainable parameters of the classifier head.

    ``cls_w`` has one row per registered class and is the only tensor whose
    shape may grow over the lifetime of a federation (class expansion
    appends rows; nothing ever removes one).
    """

    proj_w: np.ndarray            # (d_in, d_model)
    proj_b: np.ndarray            # (d_model,)
    layers: list[EncoderLayerParams]
    cls_w: np.ndarray             # (n_classes, d_model)
    cls_b: np.ndarray             # (n_classes,)

    @property
    def d_in(self) -> int:
        return self.proj_w.shape[0]

    @property
    def d_model(self) -> int:
        return self.proj_w.shape[1]

    @property
    def d_ff(self) -> int:
        return self.layers[0].w_up.shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_classes(self) -> int:
        return self.cls_w.shape[0]


# Gradients (and optimizer moments) mirror the parameter tree one-to-one,
# so they reuse the same container type.
GradientSet = HeadParams


@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam accumulators plus hyperparameters."""

    m: HeadParams
    v: HeadParams
    step: int
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


# ---------------------------------------------------------------------------
# Parameter-tree utilities
# ---------------------------------------------------------------------------

def named_arrays(params: HeadParams) -> Iterator[tuple[str, np.ndarray]]:
    """Yield every tensor in a stable, documented order."""
    yield "proj_w", params.proj_w
    yield "proj_b", params.proj_b
    for i, layer in enumerate(params.layers):
        for name in _LAYER_FIELDS:
            yield f"layers.{i}.{name}", getattr(layer, name)
    yield "cls_w", params.cls_w
    yield "cls_b", params.cls_b


def map_arrays(fn: Callable[..., np.ndarray], *trees: HeadParams) -> HeadParams:
    """Build a new parameter tree by applying ``fn`` across aligned tensors.

    ``fn`` is invoked in named_arrays order, so stateful functions (such as
    a vector cursor) see tensors in the same sequence to_vector emits them.
    """
    first = trees[0]
    proj_w = fn(*(t.proj_w for t in trees))
    proj_b = fn(*(t.proj_b for t in trees))
    layers = []
    for i in range(len(first.layers)):
        kwargs = {
            name: fn(*(getattr(t.layers[i], name) for t in trees))
            for name in _LAYER_FIELDS
        }
        layers.append(EncoderLayerParams(**kwargs))
    return HeadParams(
        proj_w=proj_w,
        proj_b=proj_b,
        layers=layers,
        cls_w=fn(*(t.cls_w for t in trees)),
        cls_b=fn(*(t.cls_b for t in trees)),
    )


def clone(params: HeadParams) -> HeadParams:
    return map_arrays(np.copy, params)


def zeros_like(params: HeadParams) -> HeadParams:
    return map_arrays(np.zeros_like, params)


def param_count(params: HeadParams) -> int:
    return sum(a.size for _, a in named_arrays(params))


def head_param_count(d_in: int, d_model: int, d_ff: int,
                     n_layers: int, n_classes: int) -> int:
    """Closed-form parameter count for the configured dimensions."""
    proj = d_in * d_model + d_model
    attn = 4 * (d_model * d_model + d_model)
    ffn = d_model * d_ff + d_ff + d_ff * d_model + d_model
    norms = 4 * d_model
    cls = n_classes * d_model + n_classes
    return proj + n_layers * (attn + ffn + norms) + cls


def to_vector(params: HeadParams) -> np.ndarray:
    """Flatten the tree into one float64 vector (order of named_arrays)."""
    return np.concatenate([a.ravel() for _, a in named_arrays(params)])


def from_vector(template: HeadParams, vec: np.ndarray) -> HeadParams:
    """Inverse of to_vector; shapes are taken from ``template``."""
    if vec.size != param_count(template):
        raise ShapeError(
            f"vector of size {vec.size} cannot fill a parameter tree of "
            f"size {param_count(template)}"
        )
    offset = 0

    def take(a: np.ndarray) -> np.ndarray:
        nonlocal offset
        out = vec[offset:offset + a.size].reshape(a.shape).copy()
        offset += a.size
        return out

    return map_arrays(take, template)


def congruent(a: HeadParams, b: HeadParams) -> bool:
    """True when both trees have identical tensor shapes throughout."""
    if len(a.layers) != len(b.layers):
        return False
    return all(x.shape == y.shape
               for (_, x), (_, y) in zip(named_arrays(a), named_arrays(b)))


def init_head_params(d_in: int, d_model: int, d_ff: int, n_layers: int,
                     n_classes: int, rng: np.random.Generator) -> HeadParams:
    """Xavier-uniform weights, zero biases, identity layer norms."""
    if min(d_in, d_model, d_ff, n_layers, n_classes) < 1:
        raise ConfigError(
            f"head dimensions must be positive, got d_in={d_in} "
            f"d_model={d_model} d_ff={d_ff} n_layers={n_layers} "
            f"n_classes={n_classes}"
        )

    def xavier(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    layers = []
    for _ in range(n_layers):
        layers.append(EncoderLayerParams(
            wq=xavier(d_model, d_model), bq=np.zeros(d_model),
            wk=xavier(d_model, d_model), bk=np.zeros(d_model),
            wv=xavier(d_model, d_model), bv=np.zeros(d_model),
            wo=xavier(d_model, d_model), bo=np.zeros(d_model),
            w_up=xavier(d_model, d_ff), b_up=np.zeros(d_ff),
            w_down=xavier(d_ff, d_model), b_down=np.zeros(d_model),
            ln1_g=np.ones(d_model), ln1_b=np.zeros(d_model),
            ln2_g=np.ones(d_model), ln2_b=np.zeros(d_model),
        ))
    # Classifier stored row-major (class, feature); fan_in is d_model.
    cls_limit = np.sqrt(6.0 / (d_model + n_classes))
    return HeadParams(
        proj_w=xavier(d_in, d_model),
        proj_b=np.zeros(d_model),
        layers=layers,
        cls_w=rng.uniform(-cls_limit, cls_limit, size=(n_classes, d_model)),
        cls_b=np.zeros(n_classes),
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy: np.ndarray, g: np.ndarray, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _forward(params: HeadParams, batch: np.ndarray):
    """Forward pass returning (logits, encoded, cache) with float64 math."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ShapeError(
            f"batch shape {np.asarray(batch).shape} incompatible with input "
            f"projection {params.proj_w.shape}"
        )
    z = x @ params.proj_w + params.proj_b
    layer_caches = []
    for layer in params.layers:
        # Single-token attention: the softmax over one position is 1, so the
        # attended value is the value projection itself and q/k drop out.
        attn_v = z @ layer.wv + layer.bv
        attn_o = attn_v @ layer.wo + layer.bo
        r1 = z + attn_o
        h, ln1_cache = _layernorm(r1, layer.ln1_g, layer.ln1_b)
        u_pre = h @ layer.w_up + layer.b_up
        u = _gelu(u_pre)
        f = u @ layer.w_down + layer.b_down
        r2 = h + f
        z_out, ln2_cache = _layernorm(r2, layer.ln2_g, layer.ln2_b)
        layer_caches.append((z, attn_v, ln1_cache, h, u_pre, u, ln2_cache))
        z = z_out
    logits = z @ params.cls_w.T + params.cls_b
    return logits, z, (x, layer_caches, z)


def head_forward(params: HeadParams, batch: np.ndarray):
    """Compute class logits and the pre-classifier encoding for a batch.

    Returns ``(logits, encoded)`` with shapes (B, n_classes) and
    (B, d_model). Raises ShapeError on a column-count mismatch and
    NumericsError if the result is not finite.
    """
    logits, encoded, _ = _forward(params, batch)
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(encoded))):
        raise NumericsError("head_forward produced non-finite values")
    return logits, encoded


def head_forward_cached(params: HeadParams, batch: np.ndarray):
    """Like head_forward but also returns the activation cache that lets
    head_backward skip its own forward recomputation."""
    logits, encoded, cache = _forward(params, batch)
    if not np.all(np.isfinite(logits)):
        raise NumericsError("head_forward produced non-finite values")
    return logits, encoded, cache


def head_backward(params: HeadParams, batch: np.ndarray,
                  dlogits: np.ndarray, cache=None) -> GradientSet:
    """Exact analytic gradients of every parameter given upstream dlogits.

    ``cache`` is the third element returned by the internal forward; when
    omitted the forward pass is recomputed. The query/key projections keep
    zero gradients because the one-token softmax is constant.
    """
    if cache is None:
        _, _, cache = _forward(params, batch)
    x, layer_caches, z_final = cache
    dlogits = np.asarray(dlogits, dtype=np.float64)

    if dlogits.shape != (x.shape[0], params.n_classes):
        raise ShapeError(
            f"dlogits shape {dlogits.shape} incompatible with batch "
            f"{x.shape} and classifier {params.cls_w.shape}"
        )

    d_cls_w = dlogits.T @ z_final
    d_cls_b = dlogits.sum(axis=0)
    dz = dlogits @ params.cls_w

    grad_layers = []
    for layer, lc in zip(reversed(params.layers), reversed(layer_caches)):
        z_in, attn_v, ln1_cache, h, u_pre, u, ln2_cache = lc
        dr2, dg2, db2 = _layernorm_backward(dz, layer.ln2_g, ln2_cache)
        df = dr2
        dh = dr2.copy()
        d_wdown = u.T @ df
        d_bdown = df.sum(axis=0)
        du = df @ layer.w_down.T
        du_pre = du * _gelu_grad(u_pre)
        d_wup = h.T @ du_pre
        d_bup = du_pre.sum(axis=0)
        dh += du_pre @ layer.w_up.T
        dr1, dg1, db1 = _layernorm_backward(dh, layer.ln1_g, ln1_cache)
        d_attn_o = dr1
        dz_in = dr1.copy()
        d_wo = attn_v.T @ d_attn_o
        d_bo = d_attn_o.sum(axis=0)
        d_attn_v = d_attn_o @ layer.wo.T
        d_wv = z_in.T @ d_attn_v
        d_bv = d_attn_v.sum(axis=0)
        dz_in += d_attn_v @ layer.wv.T
        grad_layers.append(EncoderLayerParams(
            wq=np.zeros_like(layer.wq), bq=np.zeros_like(layer.bq),
            wk=np.zeros_like(layer.wk), bk=np.zeros_like(layer.bk),
            wv=d_wv, bv=d_bv, wo=d_wo, bo=d_bo,
            w_up=d_wup, b_up=d_bup, w_down=d_wdown, b_down=d_bdown,
            ln1_g=dg1, ln1_b=db1, ln2_g=dg2, ln2_b=db2,
        ))
        dz = dz_in
    grad_layers.reverse()

    d_proj_w = x.T @ dz
    d_proj_b = dz.sum(axis=0)
    return HeadParams(proj_w=d_proj_w, proj_b=d_proj_b, layers=grad_layers,
                      cls_w=d_cls_w, cls_b=d_cls_b)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically stabilized."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood and its exact gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise LabelError(
            f"label {int(labels[bad[0]])} at row {int(bad[0])} is outside "
            f"the {c}-class range"
        )
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def kd_kl(teacher_logits: np.ndarray, student_logits: np.ndarray,
          temperature: float):
    """Mean KL(teacher || student) over temperature-softened distributions.

    Gradient flows to the student only; the teacher is treated as a
    constant. Raises ConfigError for a non-positive temperature.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError(
            f"teacher logits {t.shape} and student logits {s.shape} differ"
        )
    n = t.shape[0]
    log_pt = log_softmax(t / temperature)
    log_ps = log_softmax(s / temperature)
    pt = np.exp(log_pt)
    loss = float((pt * (log_pt - log_ps)).sum(axis=1).mean())
    dstudent = (np.exp(log_ps) - pt) / (temperature * n)
    return loss, dstudent


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def init_adamw_state(params: HeadParams, lr: float, weight_decay: float,
                     beta1: float = 0.9, beta2: float = 0.999,
                     eps: float = 1e-8) -> AdamWState:
    return AdamWState(m=zeros_like(params), v=zeros_like(params), step=0,
                      lr=lr, weight_decay=weight_decay,
                      beta1=beta1, beta2=beta2, eps=eps)


def adamw_step(params: HeadParams, grads: GradientSet,
               state: AdamWState) -> tuple[HeadParams, AdamWState]:
    """One decoupled-weight-decay Adam update with bias correction.

    Returns fresh (params, state); the inputs are left untouched.
    """
    if not (congruent(params, grads) and congruent(params, state.m)):
        raise ShapeError("params, grads and optimizer state are not congruent")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr, wd, eps = state.lr, state.weight_decay, state.eps

    new_p, new_m, new_v = {}, {}, {}

    def update(key, p, g, m, v):
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * (g * g)
        step_dir = (m2 / c1) / (np.sqrt(v2 / c2) + eps)
        new_p[key] = p - lr * (step_dir + wd * p)
        new_m[key] = m2
        new_v[key] = v2

    for (name, p), (_, g), (_, m), (_, v) in zip(
            named_arrays(params), named_arrays(grads),
            named_arrays(state.m), named_arrays(state.v)):
        update(name, p, g, m, v)

    def rebuild(table):
        # Reassemble a HeadParams tree from the flat name->array table.
        layers = []
        for i in range(len(params.layers)):
            layers.append(EncoderLayerParams(**{
                f: table[f"layers.{i}.{f}"] for f in _LAYER_FIELDS
            }))
        return HeadParams(proj_w=table["proj_w"], proj_b=table["proj_b"],
                          layers=layers, cls_w=table["cls_w"],
                          cls_b=table["cls_b"])

    return rebuild(new_p), replace(state, m=rebuild(new_m), v=rebuild(new_v),
                                   step=t)
