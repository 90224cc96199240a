"""The recurrent sequence block in dense and spiking variants.

Per token, the block projects the residual stream into gate / state /
readout pieces, runs a short causal conv and a per-head decaying state
update, then projects back. The spiking variant quantizes the inputs of
both projections with a neuron from :mod:`spikessm.neurons`; a smooth
compensation branch (mirrored projection fed by ``d_max * tanh(x)``)
can run alongside during training so a distillation loss has a fully
differentiable route.

Two forward paths implement identical math: a batched path on the
gradient tape for training and evaluation, and a stepwise plain-numpy
path carrying explicit recurrent state for generation. Their agreement
is a tested invariant. Parameters are immutable during forward, so
concurrent forwards over independent sequences are safe; training
updates are single-threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as tn
from .neurons import LIF, NeuronConfig, expand_spike_train, neuron_forward, quantize
from .spike_kernel import FireStats, OpCounter, fire_stats_from_ints, spike_linear_event, spike_linear_int
from .tensor import (
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    active_graph,
    causal_conv1d,
    causal_conv1d_step,
    embedding,
    matmul,
    narrow,
    reshape,
    rmsnorm,
    softmax,
    sum_,
    transpose2d,
)

RMS_EPS = 1e-6

DENSE = "dense"
SPIKING = "spiking"

SITE_U = "u_t"
SITE_Y = "y_t"
SITES = (SITE_U, SITE_Y)

# hook signature: (layer index, site, activations) -> activations
Hook = Callable[[int, str, np.ndarray], np.ndarray]


def default_sgc_layers(n_layers: int) -> frozenset[int]:
    """First, middle and last layer."""
    return frozenset({0, n_layers // 2, n_layers - 1})


@dataclass(frozen=True)
class Mamba2Config:
    d_model: int
    n_state: int
    n_heads: int
    d_head: int
    n_layers: int
    vocab: int
    conv_width: int = 4
    mode: str = DENSE
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    sgc_layers: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.n_heads * self.d_head != 2 * self.d_model:
            raise ContractError(
                f"n_heads*d_head must equal 2*d_model "
                f"({self.n_heads}*{self.d_head} != 2*{self.d_model})"
            )
        if self.mode not in (DENSE, SPIKING):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.conv_width != tn.CONV_WIDTH:
            raise ContractError(f"conv_width must be {tn.CONV_WIDTH}")
        if not frozenset(self.sgc_layers) <= frozenset(range(self.n_layers)):
            raise ContractError("sgc_layers must be a subset of layer indices")
        object.__setattr__(self, "sgc_layers", frozenset(self.sgc_layers))

    @property
    def d_inner(self) -> int:
        return self.n_heads * self.d_head

    @property
    def d_proj(self) -> int:
        # gate + conv input + B + C + dt
        return 2 * self.d_inner + 2 * self.n_state + self.n_heads

    @property
    def micro_steps(self) -> int:
        return 1 if self.neuron.kind == LIF else self.neuron.d_max


def toy_config(mode: str = DENSE, neuron: NeuronConfig | None = None,
               sgc: bool = False) -> Mamba2Config:
    """Desk-scale preset used by the training experiments."""
    n_layers = 2
    return Mamba2Config(
        d_model=64,
        n_state=16,
        n_heads=2,
        d_head=64,
        n_layers=n_layers,
        vocab=259,
        mode=mode,
        neuron=neuron or NeuronConfig(),
        sgc_layers=default_sgc_layers(n_layers) if sgc else frozenset(),
    )


@dataclass
class BlockParams:
    w_in: Tensor       # (d_model, d_proj)
    w_out: Tensor      # (d_inner, d_model)
    conv_x: Tensor     # (d_inner, w)
    conv_b: Tensor     # (n_state, w)
    conv_c: Tensor     # (n_state, w)
    a_log: Tensor      # (n_heads,)
    d_skip: Tensor     # (n_heads, d_head)
    dt_bias: Tensor    # (n_heads,)
    norm_w: Tensor     # (d_inner,)
    w_sgc_in: Tensor | None = None
    w_sgc_out: Tensor | None = None

    def named(self) -> list[tuple[str, Tensor]]:
        out = [
            ("w_in", self.w_in), ("w_out", self.w_out),
            ("conv_x", self.conv_x), ("conv_b", self.conv_b), ("conv_c", self.conv_c),
            ("a_log", self.a_log), ("d_skip", self.d_skip),
            ("dt_bias", self.dt_bias), ("norm_w", self.norm_w),
        ]
        if self.w_sgc_in is not None:
            out.append(("w_sgc_in", self.w_sgc_in))
        if self.w_sgc_out is not None:
            out.append(("w_sgc_out", self.w_sgc_out))
        return out


@dataclass
class BlockState:
    h: np.ndarray           # (..., n_heads, n_state, d_head)
    conv_state: np.ndarray  # (..., w-1, d_inner + 2*n_state)


def init_block_state(cfg: Mamba2Config, batch_shape: tuple[int, ...] = ()) -> BlockState:
    dt = tn.default_dtype()
    return BlockState(
        h=np.zeros(batch_shape + (cfg.n_heads, cfg.n_state, cfg.d_head), dtype=dt),
        conv_state=np.zeros(
            batch_shape + (cfg.conv_width - 1, cfg.d_inner + 2 * cfg.n_state), dtype=dt
        ),
    )


def init_block_params(cfg: Mamba2Config, rng: np.random.Generator,
                      layer_idx: int) -> BlockParams:
    """Fresh block parameters.

    Projections are scaled normal with gain 1/sqrt(fan_in); the state
    decay rates are log-spaced so heads cover fast and slow memory; the
    step bias puts the initial softplus step in roughly [0.001, 0.1].
    """
    H, P, N, D = cfg.n_heads, cfg.d_head, cfg.n_state, cfg.d_model
    w = cfg.conv_width

    def proj(fan_in, fan_out):
        return tn.parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))

    a_real = np.exp(np.linspace(math.log(1.0), math.log(8.0), H))
    dt_init = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), H))

    params = BlockParams(
        w_in=proj(D, cfg.d_proj),
        w_out=proj(cfg.d_inner, D),
        conv_x=tn.parameter(rng.normal(0.0, 1.0 / math.sqrt(w), (cfg.d_inner, w))),
        conv_b=tn.parameter(rng.normal(0.0, 1.0 / math.sqrt(w), (N, w))),
        conv_c=tn.parameter(rng.normal(0.0, 1.0 / math.sqrt(w), (N, w))),
        a_log=tn.parameter(np.log(a_real)),
        d_skip=tn.parameter(np.ones((H, P))),
        dt_bias=tn.parameter(np.log(np.expm1(dt_init))),
        norm_w=tn.parameter(np.ones(cfg.d_inner)),
    )
    if layer_idx in cfg.sgc_layers:
        attach_sgc(params)
    return params


def attach_sgc(params: BlockParams) -> None:
    """Create the compensation projections, initialized equal to the mirrored ones."""
    params.w_sgc_in = tn.parameter(params.w_in.data.copy())
    params.w_sgc_out = tn.parameter(params.w_out.data.copy())


# ---------------------------------------------------------------------------
# compensation path and its alignment loss

def sgc_forward(x: Tensor, w_sgc: Tensor, d_max: int) -> Tensor:
    """Smooth range-preserving mimic of a spiking projection: (d_max*tanh(x)) @ W'."""
    return matmul(tn.tanh(x) * float(d_max), w_sgc)


def hidden_align_loss(y_spiking: Tensor, y_sgc: Tensor) -> Tensor:
    """Half the mean squared distance between channel softmaxes of the two paths."""
    if y_spiking.shape != y_sgc.shape:
        raise DimensionError(
            f"alignment shapes disagree: {y_spiking.shape} vs {y_sgc.shape}"
        )
    rows = int(np.prod(y_spiking.shape[:-1]))
    diff = softmax(y_spiking, axis=-1) - softmax(y_sgc, axis=-1)
    return sum_(diff * diff) * (0.5 / rows)


# ---------------------------------------------------------------------------
# activation ablation hook

def clamp_channel_hook(y: np.ndarray, mode: str, site: str = SITE_Y) -> np.ndarray:
    """Replace each channel's per-sequence maximum activation with 0 or 1.

    ``y`` is (..., T, d); channels are the trailing axis, the maximum is
    taken over the sequence axis, and ties resolve to the first
    occurrence.
    """
    if site not in SITES:
        raise ContractError(f"unknown site {site!r}")
    if mode == "off":
        return y
    if mode not in ("max_to_zero", "max_to_one"):
        raise ContractError(f"unknown clamp mode {mode!r}")
    value = 0.0 if mode == "max_to_zero" else 1.0
    out = np.array(y, copy=True)
    idx = np.argmax(out, axis=-2)  # first occurrence per channel
    np.put_along_axis(out, idx[..., None, :], value, axis=-2)
    return out


def make_clamp_hook(mode: str, site: str) -> Hook:
    def hook(layer: int, at: str, data: np.ndarray) -> np.ndarray:
        if at == site:
            return clamp_channel_hook(data, mode, site=site)
        return data
    return hook


# ---------------------------------------------------------------------------
# batched forward (training / teacher-forced evaluation)

@dataclass
class BlockAux:
    s_in: np.ndarray | None = None   # integer activations at the input projection
    s_out: np.ndarray | None = None  # integer activations at the output projection
    # (spiking output, compensation output) per mirrored projection;
    # tape tensors on the batched path, plain arrays on the stepwise path
    sgc_pairs: list[tuple] = field(default_factory=list)


def block_forward(params: BlockParams, u: Tensor, cfg: Mamba2Config, *,
                  layer_idx: int = 0, want_sgc: bool = False,
                  hook: Hook | None = None) -> tuple[Tensor, BlockAux]:
    """Full-sequence block forward; ``u`` is (B, T, d_model).

    ``hook`` may transform activations at the two neuron sites; it cuts
    the gradient flow, so it is only legal outside a tape.
    """
    if hook is not None and active_graph() is not None:
        raise ContractError("activation hooks are evaluation-only")
    B, T, D = u.shape
    H, P, N = cfg.n_heads, cfg.d_head, cfg.n_state
    d_inner = cfg.d_inner
    spiking = cfg.mode == SPIKING
    aux = BlockAux()

    if hook is not None:
        u = Tensor(hook(layer_idx, SITE_U, u.data))

    if spiking:
        s_in = neuron_forward(cfg.neuron, u)
        aux.s_in = s_in.data
        u2 = matmul(s_in, params.w_in)
    else:
        u2 = matmul(u, params.w_in)

    if want_sgc and params.w_sgc_in is not None:
        aux.sgc_pairs.append((u2, sgc_forward(u, params.w_sgc_in, cfg.neuron.d_max)))

    z = narrow(u2, -1, 0, d_inner)
    x_raw = narrow(u2, -1, d_inner, d_inner)
    b_raw = narrow(u2, -1, 2 * d_inner, N)
    c_raw = narrow(u2, -1, 2 * d_inner + N, N)
    dt_raw = narrow(u2, -1, 2 * d_inner + 2 * N, H)

    x_conv, _ = causal_conv1d(x_raw, params.conv_x)
    b_conv, _ = causal_conv1d(b_raw, params.conv_b)
    c_conv, _ = causal_conv1d(c_raw, params.conv_c)
    x = reshape(tn.silu(x_conv), (B, T, H, P))
    b = tn.silu(b_conv)
    c = tn.silu(c_conv)

    dt = tn.softplus(dt_raw + params.dt_bias)             # (B,T,H)
    decay = tn.exp(-(dt * tn.exp(params.a_log)))          # (B,T,H)

    o = ssm_scan(decay, dt, b, x, c) + params.d_skip * x  # (B,T,H,P)

    gated = reshape(o, (B, T, d_inner)) * tn.silu(z)
    y = rmsnorm(gated, params.norm_w, RMS_EPS)

    if hook is not None:
        y = Tensor(hook(layer_idx, SITE_Y, y.data))

    if spiking:
        s_out = neuron_forward(cfg.neuron, y)
        aux.s_out = s_out.data
        y_out = matmul(s_out, params.w_out)
    else:
        y_out = matmul(y, params.w_out)

    if want_sgc and params.w_sgc_out is not None:
        aux.sgc_pairs.append((y_out, sgc_forward(y, params.w_sgc_out, cfg.neuron.d_max)))

    if not np.isfinite(y_out.data).all():
        raise NumericError(f"non-finite block output at layer {layer_idx}")
    return y_out, aux


# ---------------------------------------------------------------------------
# stepwise forward (recurrent inference)

def block_step(params: BlockParams, state: BlockState, u_t: np.ndarray,
               cfg: Mamba2Config, *, layer_idx: int = 0, kernel: str = "int",
               counter: OpCounter | None = None, want_sgc: bool = False,
               ) -> tuple[np.ndarray, BlockState, BlockAux]:
    """One recurrent step; ``u_t`` is (..., d_model), plain arrays throughout.

    ``kernel`` picks the spiking projection route: "int" (sparse signed
    accumulation), "event" (binary micro-step train), or "matmul"
    (dense arithmetic on the quantized activations; identical result).
    ``want_sgc`` additionally evaluates the compensation-path outputs
    (plain arrays here; the batched path is the differentiable one).
    """
    H, P, N = cfg.n_heads, cfg.d_head, cfg.n_state
    d_inner = cfg.d_inner
    lead = u_t.shape[:-1]
    if u_t.shape[-1] != cfg.d_model:
        raise DimensionError(f"expected trailing dim {cfg.d_model}, got {u_t.shape}")
    if state.h.shape != lead + (H, N, P):
        raise DimensionError(f"state shape {state.h.shape} does not match input {u_t.shape}")
    spiking = cfg.mode == SPIKING
    aux = BlockAux()

    if spiking:
        s_in = quantize(cfg.neuron, u_t)
        aux.s_in = s_in
        u2 = _project(s_in, params.w_in.data, kernel, cfg.neuron, counter)
    else:
        u2 = u_t @ params.w_in.data
    if want_sgc and params.w_sgc_in is not None:
        mim = cfg.neuron.d_max * np.tanh(u_t)
        aux.sgc_pairs.append((u2, mim @ params.w_sgc_in.data))

    z = u2[..., :d_inner]
    x_raw = u2[..., d_inner:2 * d_inner]
    b_raw = u2[..., 2 * d_inner:2 * d_inner + N]
    c_raw = u2[..., 2 * d_inner + N:2 * d_inner + 2 * N]
    dt_raw = u2[..., 2 * d_inner + 2 * N:]

    conv_in = np.concatenate([x_raw, b_raw, c_raw], axis=-1)
    kern = np.concatenate(
        [params.conv_x.data, params.conv_b.data, params.conv_c.data], axis=0)
    conv_out, conv_state = causal_conv1d_step(conv_in, kern, state.conv_state)
    x = _np_silu(conv_out[..., :d_inner]).reshape(lead + (H, P))
    b = _np_silu(conv_out[..., d_inner:d_inner + N])
    c = _np_silu(conv_out[..., d_inner + N:])

    dt = _np_softplus(dt_raw + params.dt_bias.data)            # (..., H)
    decay = np.exp(-dt * np.exp(params.a_log.data))            # (..., H)

    h = ssm_update(state.h, decay, dt, b, x)                   # (..., H,N,P)
    o = (c[..., None, :, None] * h).sum(axis=-2)               # (..., H,P)
    o = o + params.d_skip.data * x

    gated = o.reshape(lead + (d_inner,)) * _np_silu(z)
    y = _np_rmsnorm(gated, params.norm_w.data)

    if spiking:
        s_out = quantize(cfg.neuron, y)
        aux.s_out = s_out
        y_out = _project(s_out, params.w_out.data, kernel, cfg.neuron, counter)
    else:
        y_out = y @ params.w_out.data
    if want_sgc and params.w_sgc_out is not None:
        mim = cfg.neuron.d_max * np.tanh(y)
        aux.sgc_pairs.append((y_out, mim @ params.w_sgc_out.data))

    if not np.isfinite(y_out).all():
        raise NumericError(f"non-finite step output at layer {layer_idx}")
    return y_out, BlockState(h=h, conv_state=conv_state), aux


def _project(s_int: np.ndarray, w: np.ndarray, kernel: str,
             neuron: NeuronConfig, counter: OpCounter | None) -> np.ndarray:
    if kernel == "matmul":
        return s_int @ w
    wt = w.T  # column-per-input-channel view for the sparse kernels
    flat = s_int.reshape(-1, s_int.shape[-1])
    rows = []
    for row in flat:
        if kernel == "int":
            rows.append(spike_linear_int(wt, row))
        elif kernel == "event":
            train = expand_spike_train(neuron, row)
            rows.append(spike_linear_event(wt, train, counter=counter))
        else:
            raise ContractError(f"unknown kernel {kernel!r}")
    return np.stack(rows).reshape(s_int.shape[:-1] + (w.shape[1],))


def ssm_update(h: np.ndarray, decay: np.ndarray, dt: np.ndarray,
               b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-head state update: h' = decay * h + (dt * b) outer x."""
    dbx = dt[..., :, None, None] * b[..., None, :, None] * x[..., :, None, :]
    return decay[..., :, None, None] * h + dbx


def ssm_scan(decay: Tensor, dt: Tensor, b: Tensor, x: Tensor, c: Tensor) -> Tensor:
    """Sequential decay-scan with readout as one op on the tape.

    Forward runs ``h_t = decay_t * h_{t-1} + (dt_t * b_t) outer x_t`` and
    emits ``o_t[h,p] = sum_n c_t[n] * h_t[h,n,p]``; backward replays the
    recurrence in reverse. Fusing the scan keeps the tape free of
    per-timestep slice nodes, whose gradient accumulation would touch
    the full sequence tensor once per step.
    """
    a_, dt_, b_, x_, c_ = decay.data, dt.data, b.data, x.data, c.data
    B, T, H = dt_.shape
    N = b_.shape[-1]
    P = x_.shape[-1]
    hs = np.empty((B, T, H, N, P), dtype=dt_.dtype)
    o = np.empty((B, T, H, P), dtype=dt_.dtype)
    h = np.zeros((B, H, N, P), dtype=dt_.dtype)
    for t in range(T):
        h = ssm_update(h, a_[:, t], dt_[:, t], b_[:, t], x_[:, t])
        hs[:, t] = h
        o[:, t] = np.einsum("bn,bhnp->bhp", c_[:, t], h)

    def grad_fn(g):
        da = np.zeros((B, T, H), dtype=g.dtype)
        ddt = np.empty((B, T, H), dtype=g.dtype)
        db = np.empty((B, T, N), dtype=g.dtype)
        dx = np.empty((B, T, H, P), dtype=g.dtype)
        dc = np.empty((B, T, N), dtype=g.dtype)
        dh = np.zeros((B, H, N, P), dtype=g.dtype)
        for t in reversed(range(T)):
            dh += c_[:, t, None, :, None] * g[:, t, :, None, :]
            if t > 0:
                da[:, t] = np.einsum("bhnp,bhnp->bh", dh, hs[:, t - 1])
            bx = b_[:, t, None, :, None] * x_[:, t, :, None, :]
            ddt[:, t] = np.einsum("bhnp,bhnp->bh", dh, bx)
            dtx = dt_[:, t, :, None] * x_[:, t]
            db[:, t] = np.einsum("bhnp,bhp->bn", dh, dtx)
            dtb = dt_[:, t, :, None] * b_[:, t, None, :]  # (B,H,N)
            dx[:, t] = np.einsum("bhnp,bhn->bhp", dh, dtb)
            dc[:, t] = np.einsum("bhp,bhnp->bn", g[:, t], hs[:, t])
            dh *= a_[:, t, :, None, None]
        return da, ddt, db, dx, dc

    return tn.custom_op(o, (decay, dt, b, x, c), grad_fn, "ssm_scan")


def _np_silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        ex_neg = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + ex_neg)
    return x * np.where(x >= 0, pos, 1.0 - pos)


def _np_softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _np_rmsnorm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS)
    return x * inv * w


# ---------------------------------------------------------------------------
# the full language model

@dataclass
class ModelState:
    blocks: list[BlockState]


@dataclass
class SiteStats:
    """Integer-activation tallies for the two projection sites of a run."""
    fr_in: FireStats
    fr_out: FireStats


class LanguageModel:
    """Embedding -> n_layers blocks with residual -> norm -> tied head."""

    def __init__(self, cfg: Mamba2Config, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        self.embedding = tn.parameter(rng.normal(0.0, 0.08, (cfg.vocab, cfg.d_model)))
        self.norm_f = tn.parameter(np.ones(cfg.d_model))
        self.layers = [init_block_params(cfg, rng, i) for i in range(cfg.n_layers)]
        # the residual stream is normalized before each block, so the
        # quantizers at the projection sites see unit-scale activations
        self.pre_norms = [tn.parameter(np.ones(cfg.d_model))
                          for _ in range(cfg.n_layers)]

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embedding", self.embedding), ("norm_f", self.norm_f)]
        for i, layer in enumerate(self.layers):
            out.append((f"layers.{i}.pre_norm", self.pre_norms[i]))
            out.extend((f"layers.{i}.{n}", t) for n, t in layer.named())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(tensors):
            missing = set(own) ^ set(tensors)
            raise ContractError(f"parameter names disagree: {sorted(missing)}")
        for name, t in own.items():
            if t.data.shape != tensors[name].shape:
                raise ContractError(f"shape mismatch for {name}")
            t.data = tensors[name].astype(t.data.dtype)

    def clone(self, mode: str | None = None, neuron: NeuronConfig | None = None,
              sgc: bool | None = None) -> "LanguageModel":
        """Copy of this model, optionally switching mode / neuron / SGC layers."""
        cfg = self.cfg
        new_cfg = replace(
            cfg,
            mode=mode if mode is not None else cfg.mode,
            neuron=neuron if neuron is not None else cfg.neuron,
            sgc_layers=(default_sgc_layers(cfg.n_layers) if sgc else frozenset())
            if sgc is not None else cfg.sgc_layers,
        )
        other = LanguageModel(new_cfg)
        other.embedding.data = self.embedding.data.copy()
        other.norm_f.data = self.norm_f.data.copy()
        for dst_n, src_n in zip(other.pre_norms, self.pre_norms):
            dst_n.data = src_n.data.copy()
        for i, (src, dst) in enumerate(zip(self.layers, other.layers)):
            for (_, a), (_, b) in zip(src.named()[:9], dst.named()[:9]):
                b.data = a.data.copy()
            if i in new_cfg.sgc_layers:
                if dst.w_sgc_in is None:
                    attach_sgc(dst)
                if src.w_sgc_in is not None:
                    dst.w_sgc_in.data = src.w_sgc_in.data.copy()
                    dst.w_sgc_out.data = src.w_sgc_out.data.copy()
                else:
                    dst.w_sgc_in.data = dst.w_in.data.copy()
                    dst.w_sgc_out.data = dst.w_out.data.copy()
        return other

    # -- batched (teacher-forced) forward ------------------------------------

    def forward_batch(self, tokens: np.ndarray, *, want_sgc: bool = False,
                      hook: Hook | None = None) -> tuple[Tensor, list[BlockAux]]:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DimensionError("forward_batch expects (batch, time) token ids")
        x = embedding(self.embedding, tokens)
        auxes = []
        for i, layer in enumerate(self.layers):
            x_in = rmsnorm(x, self.pre_norms[i], RMS_EPS)
            y, aux = block_forward(layer, x_in, self.cfg, layer_idx=i,
                                   want_sgc=want_sgc, hook=hook)
            auxes.append(aux)
            x = x + y
        x = rmsnorm(x, self.norm_f, RMS_EPS)
        logits = matmul(x, transpose2d(self.embedding))
        return logits, auxes

    def site_stats(self, auxes: list[BlockAux]) -> SiteStats | None:
        """Aggregate fire rates over layers and tokens of one forward pass."""
        if self.cfg.mode != SPIKING:
            return None
        k = self.cfg.micro_steps
        fr_in = fr_out = None
        for aux in auxes:
            a = fire_stats_from_ints(aux.s_in, k)
            b = fire_stats_from_ints(aux.s_out, k)
            fr_in = a if fr_in is None else fr_in.merged(a)
            fr_out = b if fr_out is None else fr_out.merged(b)
        return SiteStats(fr_in=fr_in, fr_out=fr_out)

    # -- stepwise forward -----------------------------------------------------

    def init_state(self, batch_shape: tuple[int, ...] = ()) -> ModelState:
        return ModelState(
            blocks=[init_block_state(self.cfg, batch_shape) for _ in self.layers])

    def step(self, token: np.ndarray, state: ModelState, *, kernel: str = "int",
             counter: OpCounter | None = None) -> tuple[np.ndarray, ModelState]:
        """Next-token logits for one token id per batch entry."""
        token = np.asarray(token)
        x = self.embedding.data[token]
        new_blocks = []
        for i, (layer, bst) in enumerate(zip(self.layers, state.blocks)):
            x_in = _np_rmsnorm(x, self.pre_norms[i].data)
            y, nst, _ = block_step(layer, bst, x_in, self.cfg, layer_idx=i,
                                   kernel=kernel, counter=counter)
            new_blocks.append(nst)
            x = x + y
        x = _np_rmsnorm(x, self.norm_f.data)
        logits = x @ self.embedding.data.T
        return logits, ModelState(blocks=new_blocks)

    def generate_greedy(self, prompts: np.ndarray, max_new: int, *,
                        stop_id: int | None = None,
                        kernel: str = "matmul") -> np.ndarray:
        """Greedy continuation of a (B, T0) prompt batch; returns (B, T0+max_new).

        Generation past a stop id repeats the stop id, so rows stay aligned.
        """
        prompts = np.atleast_2d(np.asarray(prompts))
        B, T0 = prompts.shape
        state = self.init_state((B,))
        logits = None
        for t in range(T0):
            logits, state = self.step(prompts[:, t], state, kernel=kernel)
        out = [prompts]
        done = np.zeros(B, dtype=bool)
        for _ in range(max_new):
            cur = logits.argmax(axis=-1)
            if stop_id is not None:
                cur = np.where(done, stop_id, cur)
                done |= cur == stop_id
            out.append(cur[:, None])
            logits, state = self.step(cur, state, kernel=kernel)
        return np.concatenate(out, axis=1)


def model_forward(model: LanguageModel, tokens: np.ndarray,
                  hook: Hook | None = None) -> tuple[Tensor, SiteStats | None]:
    """Logits for one token sequence plus fire stats per projection site."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise DimensionError("model_forward takes a single token sequence")
    logits, auxes = model.forward_batch(tokens[None, :], hook=hook)
    return reshape(logits, (tokens.size, model.cfg.vocab)), model.site_stats(auxes)
