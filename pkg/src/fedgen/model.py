"""Tiny character-level transformer with LoRA hooks and manual backprop.

Pre-LN decoder blocks, learned positional embeddings, tanh-GELU MLP, no
dropout. Linear weights are stored ``(out, in)`` and applied as ``x @ W.T``.

Gradients are computed by hand from cached activations. ``loss_and_grads``
takes the set of backbone weights to differentiate; everything else is only
propagated through, never materialized. Adapter training asks for no backbone
weights at all.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Collection, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import CheckpointError, DomainError, ShapeError
from .lora import LoraAdapter, LoraPair

IGNORE_INDEX = -1
_GELU_C = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("vocab_size", "dim", "n_layers", "n_heads", "context_len", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.n_heads:
            raise ShapeError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")


def backbone_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every backbone parameter, without allocating any."""
    d, f, v = config.dim, config.dim * config.mlp_ratio, config.vocab_size
    shapes = {"tok_emb": (v, d), "pos_emb": (config.context_len, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes.update({
            f"{p}.ln1.g": (d,), f"{p}.ln1.b": (d,),
            f"{p}.attn.wq": (d, d), f"{p}.attn.wk": (d, d),
            f"{p}.attn.wv": (d, d), f"{p}.attn.wo": (d, d),
            f"{p}.ln2.g": (d,), f"{p}.ln2.b": (d,),
            f"{p}.mlp.w1": (f, d), f"{p}.mlp.b1": (f,),
            f"{p}.mlp.w2": (d, f), f"{p}.mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head": (v, d)})
    return shapes


def linear_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """The weights an adapter may target: every linear map except embeddings."""
    return {k: s for k, s in backbone_shapes(config).items()
            if len(s) == 2 and not k.endswith("_emb")}


def total_params(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in backbone_shapes(config).values())


def attention_targets(config: ModelConfig, projections: Iterable[str] = ("wq", "wv")) -> tuple[str, ...]:
    """Expand short projection names (``wq``, ``w1``, ...) to per-layer weight ids."""
    out = []
    for i in range(config.n_layers):
        for proj in projections:
            if proj in ("wq", "wk", "wv", "wo"):
                out.append(f"layers.{i}.attn.{proj}")
            elif proj in ("w1", "w2"):
                out.append(f"layers.{i}.mlp.{proj}")
            elif proj == "head":
                if i == config.n_layers - 1:
                    out.append("head")
            else:
                out.append(proj)
    return tuple(out)


def weights_checksum(weights: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(weights):
        w = np.ascontiguousarray(weights[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(w.shape).encode("ascii"))
        h.update(w.tobytes())
    return h.hexdigest()


@dataclass
class Backbone:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    frozen_checksum: str = ""

    def __post_init__(self):
        expected = backbone_shapes(self.config)
        if set(expected) != set(self.weights):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise ShapeError(f"backbone weights mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            w = np.asarray(self.weights[name], dtype=np.float64)
            if w.shape != shape:
                raise ShapeError(f"weight {name!r} has shape {w.shape}, expected {shape}")
            w = w.copy()
            w.setflags(write=False)
            self.weights[name] = w
        if not self.frozen_checksum:
            self.frozen_checksum = self.checksum()

    def checksum(self) -> str:
        return weights_checksum(self.weights)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return backbone_shapes(self.config)

    def linear_shapes(self) -> dict[str, tuple[int, int]]:
        return linear_shapes(self.config)

    def param_count(self) -> int:
        return total_params(self.config)

    def with_weights(self, updates: Mapping[str, np.ndarray]) -> "Backbone":
        """New backbone with some weights replaced; this one is unchanged."""
        return Backbone(self.config, {**self.weights, **updates})


def init_backbone(config: ModelConfig, rng: np.random.Generator) -> Backbone:
    weights = {}
    resid_std = 0.02 / math.sqrt(2 * config.n_layers)
    for name, shape in backbone_shapes(config).items():
        if name.endswith(".g"):
            weights[name] = np.ones(shape)
        elif len(shape) == 1:
            weights[name] = np.zeros(shape)
        elif name.endswith(("attn.wo", "mlp.w2")):
            weights[name] = rng.normal(0.0, resid_std, size=shape)
        else:
            weights[name] = rng.normal(0.0, 0.02, size=shape)
    return Backbone(config, weights)


# -- batches ---------------------------------------------------------------


@dataclass
class TrainBatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape != self.targets.shape:
            raise ShapeError(f"inputs {self.inputs.shape} and targets {self.targets.shape} must match 2-D")


def windows(sequence: Sequence[int], context_len: int) -> list[np.ndarray]:
    """Cut a token sequence into training windows of at most ``context_len + 1`` tokens.

    Consecutive windows overlap by one token so every position is predicted
    exactly once.
    """
    seq = np.asarray(sequence, dtype=np.int64)
    return [seq[s:s + context_len + 1] for s in range(0, max(len(seq) - 1, 0), context_len)]


def to_samples(sequences: Iterable[Sequence[int]], context_len: int) -> list[np.ndarray]:
    return [w for seq in sequences for w in windows(seq, context_len)]


def make_batch(samples: Sequence[np.ndarray]) -> TrainBatch:
    """Right-pad samples to a common length; padded targets are ignored."""
    width = max(len(s) for s in samples) - 1
    inputs = np.zeros((len(samples), width), dtype=np.int64)
    targets = np.full((len(samples), width), IGNORE_INDEX, dtype=np.int64)
    for i, s in enumerate(samples):
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
    return TrainBatch(inputs, targets)


def iter_batches(samples: Sequence[np.ndarray], batch_size: int,
                 rng: np.random.Generator | None = None) -> Iterator[TrainBatch]:
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield make_batch([samples[i] for i in order[start:start + batch_size]])


# -- forward / backward ----------------------------------------------------


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + _LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, (dy * xhat).reshape(-1, g.shape[0]).sum(0), dy.reshape(-1, g.shape[0]).sum(0)


def _gelu(h):
    """tanh-approximated GELU; returns the activation and the tanh term."""
    # In-place arithmetic: these are the largest activations in the model.
    t = h * h
    t *= 0.044715
    t += 1.0
    t *= h
    t *= _GELU_C
    np.tanh(t, out=t)
    act = t + 1.0
    act *= h
    act *= 0.5
    return act, t


def _gelu_grad(h, t):
    """d gelu / dh = 0.5 (1 + t) + 0.5 h (1 - t^2) c (1 + 3 k h^2)."""
    g = h * h
    g *= 3 * 0.044715
    g += 1.0
    g *= 0.5 * _GELU_C
    g *= h
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    g *= sech2
    sech2[...] = t
    sech2 += 1.0
    sech2 *= 0.5
    g += sech2
    return g


class _Pass:
    """Forward state shared with the matching backward pass."""

    def __init__(self, weights, config, adapter):
        self.w = weights
        self.cfg = config
        self.adapter = adapter
        self.factor = adapter.config.factor if adapter is not None else 0.0
        self.cache = {}

    def pair(self, name) -> LoraPair | None:
        if self.adapter is None:
            return None
        return self.adapter.pairs.get(name)

    def linear(self, x2, name):
        y = x2 @ self.w[name].T
        pair = self.pair(name)
        z = None
        if pair is not None:
            z = x2 @ pair.down.T
            y += self.factor * (z @ pair.up.T)
        self.cache[name] = (x2, z)
        return y

    def linear_back(self, dy, name, wgrads, agrads, want):
        x2, z = self.cache[name]
        if name in want:
            wgrads[name] = dy.T @ x2
        dx = dy @ self.w[name]
        pair = self.pair(name)
        if pair is not None:
            dyu = dy @ pair.up
            dx += self.factor * (dyu @ pair.down)
            if agrads is not None:
                agrads[name] = LoraPair(self.factor * (dyu.T @ x2), self.factor * (dy.T @ z))
        return dx


def _check_ids(ids: np.ndarray, config: ModelConfig, allow_ignore: bool = False) -> None:
    lo = IGNORE_INDEX if allow_ignore else 0
    if ids.size and (ids.min() < lo or ids.max() >= config.vocab_size):
        raise DomainError(f"token ids must lie in [0, {config.vocab_size}), "
                          f"got range [{ids.min()}, {ids.max()}]")


def _forward(weights, config: ModelConfig, adapter, ids: np.ndarray):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeError(f"token ids must be (batch, time), got {ids.shape}")
    _check_ids(ids, config)
    B, T = ids.shape
    if T > config.context_len:
        raise ShapeError(f"sequence length {T} exceeds context length {config.context_len}")
    D, H = config.dim, config.n_heads
    hd = D // H
    N = B * T
    run = _Pass(weights, config, adapter)
    c = run.cache
    x = weights["tok_emb"][ids] + weights["pos_emb"][:T]
    mask = np.triu(np.ones((T, T), dtype=bool), 1)
    scale = 1.0 / math.sqrt(hd)
    for i in range(config.n_layers):
        p = f"layers.{i}"
        a, c[f"{p}.ln1"] = _layer_norm(x, weights[f"{p}.ln1.g"], weights[f"{p}.ln1.b"])
        a2 = a.reshape(N, D)
        q, k, v = (run.linear(a2, f"{p}.attn.{n}").reshape(B, T, H, hd).transpose(0, 2, 1, 3)
                   for n in ("wq", "wk", "wv"))
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s[..., mask] = -np.inf
        s -= s.max(-1, keepdims=True)
        probs = np.exp(s)
        probs /= probs.sum(-1, keepdims=True)
        y = (probs @ v).transpose(0, 2, 1, 3).reshape(N, D)
        c[f"{p}.attn"] = (q, k, v, probs)
        x = x + run.linear(y, f"{p}.attn.wo").reshape(B, T, D)
        h_in, c[f"{p}.ln2"] = _layer_norm(x, weights[f"{p}.ln2.g"], weights[f"{p}.ln2.b"])
        h = run.linear(h_in.reshape(N, D), f"{p}.mlp.w1") + weights[f"{p}.mlp.b1"]
        act, t = _gelu(h)
        c[f"{p}.mlp"] = (h, t)
        m = run.linear(act, f"{p}.mlp.w2") + weights[f"{p}.mlp.b2"]
        x = x + m.reshape(B, T, D)
    xf, c["ln_f"] = _layer_norm(x, weights["ln_f.g"], weights["ln_f.b"])
    logits = run.linear(xf.reshape(N, D), "head").reshape(B, T, config.vocab_size)
    c["ids"] = ids
    return logits, run


def _backward(run: _Pass, dlogits: np.ndarray, want: Collection[str], want_adapter: bool):
    cfg, w, c = run.cfg, run.w, run.cache
    B, T, V = dlogits.shape
    D, H = cfg.dim, cfg.n_heads
    hd = D // H
    N = B * T
    wg: dict[str, np.ndarray] = {}
    ag: dict[str, LoraPair] | None = {} if want_adapter else None
    scale = 1.0 / math.sqrt(hd)

    dxf = run.linear_back(dlogits.reshape(N, V), "head", wg, ag, want)
    dx, dg, db = _layer_norm_back(dxf.reshape(B, T, D), w["ln_f.g"], c["ln_f"])
    if "ln_f.g" in want:
        wg["ln_f.g"] = dg
    if "ln_f.b" in want:
        wg["ln_f.b"] = db
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}"
        dm = dx.reshape(N, D)
        if f"{p}.mlp.b2" in want:
            wg[f"{p}.mlp.b2"] = dm.sum(0)
        h, t = c[f"{p}.mlp"]
        dh = run.linear_back(dm, f"{p}.mlp.w2", wg, ag, want) * _gelu_grad(h, t)
        if f"{p}.mlp.b1" in want:
            wg[f"{p}.mlp.b1"] = dh.sum(0)
        dh_in = run.linear_back(dh, f"{p}.mlp.w1", wg, ag, want)
        dres, dg, db = _layer_norm_back(dh_in.reshape(B, T, D), w[f"{p}.ln2.g"], c[f"{p}.ln2"])
        if f"{p}.ln2.g" in want:
            wg[f"{p}.ln2.g"], wg[f"{p}.ln2.b"] = dg, db
        dx = dx + dres

        q, k, v, probs = c[f"{p}.attn"]
        dy = run.linear_back(dx.reshape(N, D), f"{p}.attn.wo", wg, ag, want)
        dy = dy.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        dprobs = dy @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dy
        ds = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        da = sum(run.linear_back(g.transpose(0, 2, 1, 3).reshape(N, D), f"{p}.attn.{n}", wg, ag, want)
                 for g, n in ((dq, "wq"), (dk, "wk"), (dv, "wv")))
        dres, dg, db = _layer_norm_back(da.reshape(B, T, D), w[f"{p}.ln1.g"], c[f"{p}.ln1"])
        if f"{p}.ln1.g" in want:
            wg[f"{p}.ln1.g"], wg[f"{p}.ln1.b"] = dg, db
        dx = dx + dres
    if "tok_emb" in want:
        g = np.zeros_like(w["tok_emb"])
        np.add.at(g, c["ids"].reshape(-1), dx.reshape(N, D))
        wg["tok_emb"] = g
    if "pos_emb" in want:
        g = np.zeros_like(w["pos_emb"])
        g[:T] = dx.sum(0)
        wg["pos_emb"] = g
    return wg, ag


def forward(backbone: Backbone, adapter: LoraAdapter | None, batch) -> tuple[np.ndarray, _Pass]:
    """Logits of shape ``(batch, time, vocab)`` plus the activation cache."""
    ids = batch.inputs if isinstance(batch, TrainBatch) else batch
    return _forward(backbone.weights, backbone.config, adapter, ids)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax(np.asarray(logits, dtype=np.float64))


def _nll_terms(logits: np.ndarray, targets: np.ndarray):
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    flat = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    valid = t != IGNORE_INDEX
    z = flat - flat.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1))
    nll = lse - z[np.arange(len(t)), np.where(valid, t, 0)]
    return nll, valid


def loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean token-level negative log-likelihood, ignoring padded targets."""
    nll, valid = _nll_terms(logits, targets)
    if not valid.any():
        raise DomainError("batch has no target tokens")
    return float(nll[valid].mean())


def _loss_grad(logits: np.ndarray, targets: np.ndarray):
    nll, valid = _nll_terms(logits, targets)
    n = int(valid.sum())
    if n == 0:
        raise DomainError("batch has no target tokens")
    V = logits.shape[-1]
    d = _softmax(logits).reshape(-1, V)
    t = targets.reshape(-1)
    d[np.arange(len(t))[valid], t[valid]] -= 1.0
    d[~valid] = 0.0
    d /= n
    return float(nll[valid].mean()), d.reshape(logits.shape)


def loss_and_grads(backbone: Backbone, adapter: LoraAdapter | None, batch: TrainBatch,
                   weights: Collection[str] = (), adapter_grads: bool = True):
    """Mean loss, gradients for the named backbone weights, adapter gradients.

    Backbone weights not listed in ``weights`` never get a gradient array.
    Returns ``(loss, weight_grads, adapter_grads_or_None)``.
    """
    _check_ids(batch.targets, backbone.config, allow_ignore=True)
    logits, run = forward(backbone, adapter, batch)
    value, dlogits = _loss_grad(logits, batch.targets)
    want = frozenset(weights)
    unknown = want - set(backbone.weights)
    if unknown:
        raise ShapeError(f"unknown weights requested: {sorted(unknown)}")
    wg, ag = _backward(run, dlogits, want, adapter_grads and adapter is not None)
    agrads = LoraAdapter(adapter.config, ag) if ag is not None else None
    return value, wg, agrads


def backward_adapter(backbone: Backbone, adapter: LoraAdapter, batch: TrainBatch) -> LoraAdapter:
    """Gradient of the mean batch loss with respect to every adapter factor."""
    _, _, grads = loss_and_grads(backbone, adapter, batch, weights=(), adapter_grads=True)
    return grads


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: AdamWState, params, grads):
    """One AdamW update with decoupled weight decay.

    ``params``/``grads`` are either flat ``name -> array`` mappings or
    congruent :class:`LoraAdapter` objects; the same kind is returned. The
    state's moments and step counter are updated in place.
    """
    as_adapter = isinstance(params, LoraAdapter)
    p = params.to_dict() if as_adapter else params
    g = grads.to_dict() if isinstance(grads, LoraAdapter) else grads
    if p.keys() != g.keys():
        raise ShapeError(f"parameter and gradient keys differ: {sorted(set(p) ^ set(g))}")
    for k in p:
        if p[k].shape != g[k].shape:
            raise ShapeError(f"gradient for {k!r} has shape {g[k].shape}, parameter {p[k].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    out = {}
    for k in p:
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g[k] if m is None else b1 * m + (1 - b1) * g[k]
        v = (1 - b2) * g[k] * g[k] if v is None else b2 * v + (1 - b2) * g[k] * g[k]
        state.m[k], state.v[k] = m, v
        decayed = p[k] * (1.0 - state.lr * state.weight_decay)
        out[k] = decayed - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return LoraAdapter.from_dict(params.config, out) if as_adapter else out


# -- evaluation ------------------------------------------------------------


def sequence_nll(backbone: Backbone, adapter: LoraAdapter | None, sequences: Iterable[Sequence[int]],
                 batch_size: int = 64) -> tuple[float, int]:
    """Total negative log-likelihood and token count over ``sequences``."""
    samples = to_samples(sequences, backbone.config.context_len)
    total, count = 0.0, 0
    for batch in iter_batches(samples, batch_size):
        logits, _ = forward(backbone, adapter, batch)
        nll, valid = _nll_terms(logits, batch.targets)
        total += float(nll[valid].sum())
        count += int(valid.sum())
    return total, count


def perplexity(backbone: Backbone, adapter: LoraAdapter | None, sequences: Iterable[Sequence[int]],
               batch_size: int = 64) -> float:
    """``exp`` of the mean token negative log-likelihood over all sequences."""
    total, count = sequence_nll(backbone, adapter, sequences, batch_size)
    if count == 0:
        raise DomainError("perplexity needs at least one target token")
    return math.exp(total / count)


def generate(backbone: Backbone, adapter: LoraAdapter | None, prompt: Sequence[int], length: int,
             temperature: float = 1.0, rng: np.random.Generator | None = None) -> list[int]:
    """Autoregressive sampling; ``temperature == 0`` decodes greedily."""
    if temperature < 0:
        raise DomainError(f"temperature must be >= 0, got {temperature}")
    tokens = [int(t) for t in prompt]
    if not tokens:
        raise DomainError("prompt must contain at least one token")
    _check_ids(np.asarray(tokens), backbone.config)
    if temperature > 0 and rng is None:
        raise ValueError("sampling with temperature > 0 needs an rng")
    ctx = backbone.config.context_len
    for _ in range(length):
        logits, _ = forward(backbone, adapter, np.asarray([tokens[-ctx:]]))
        last = logits[0, -1]
        if temperature == 0:
            nxt = int(np.argmax(last))
        else:
            probs = _softmax(last / temperature)
            nxt = int(rng.choice(len(probs), p=probs))
        tokens.append(nxt)
    return tokens


# -- pretraining -----------------------------------------------------------


def pretrain_backbone(sequences: Sequence[Sequence[int]], config: ModelConfig, steps: int,
                      rng: np.random.Generator, lr: float = 3e-3, batch_size: int = 32,
                      weight_decay: float = 0.0) -> tuple[Backbone, list[float]]:
    """Full-parameter pretraining from random init, then freeze.

    Returns the frozen backbone and the per-step training loss trace.
    """
    samples = to_samples(sequences, config.context_len)
    if not samples:
        raise DomainError("pretraining corpus is empty")
    backbone = init_backbone(config, rng)
    if steps == 0:
        return backbone, []
    names = sorted(backbone.weights)
    params = {k: backbone.weights[k].copy() for k in names}
    state = AdamWState(lr=lr, weight_decay=weight_decay)
    trace = []
    done = 0
    while done < steps:
        for batch in iter_batches(samples, batch_size, rng):
            current = Backbone(config, params, frozen_checksum="-")
            value, grads, _ = loss_and_grads(current, None, batch, weights=names, adapter_grads=False)
            params = adamw_step(state, params, grads)
            trace.append(value)
            done += 1
            if done == steps:
                break
    return Backbone(config, params), trace


# -- checkpoints -----------------------------------------------------------

_CKPT_MAGIC = b"FGBB"
_CKPT_VERSION = 1


def save_backbone(backbone: Backbone, path, meta: Mapping | None = None) -> Path:
    """Write a shape-prefixed float64 checkpoint with the checksum in its header."""
    names = sorted(backbone.weights)
    header = {
        "format": "fedgen-backbone",
        "version": _CKPT_VERSION,
        "config": asdict(backbone.config),
        "checksum": backbone.checksum(),
        "tensors": [{"name": n, "shape": list(backbone.weights[n].shape)} for n in names],
        "meta": dict(meta or {}),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(backbone.weights[n], dtype="<f8").tobytes() for n in names)
    path = Path(path)
    path.write_bytes(_CKPT_MAGIC + struct.pack("<I", len(head)) + head + payload)
    return path


def load_backbone(path) -> tuple[Backbone, dict]:
    """Read a checkpoint, verify its checksum; returns ``(backbone, meta)``."""
    blob = Path(path).read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a backbone checkpoint")
    (head_len,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + head_len].decode("utf-8"))
    if header.get("version") != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = 8 + head_len
    weights = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = math.prod(shape) * 8
        chunk = blob[offset:offset + n]
        if len(chunk) != n:
            raise CheckpointError(f"{path}: payload truncated at {t['name']!r}")
        weights[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += n
    backbone = Backbone(ModelConfig(**header["config"]), weights)
    if backbone.checksum() != header["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    return backbone, header["meta"]
