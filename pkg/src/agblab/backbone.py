"""Regression backbones mapping daily feature windows to biomass and latents.

Three interchangeable trunks (pointwise MLP, 1-D convolution over the time
axis, simple recurrent net) all emit five channels per day. Heads squash the
raw channels so the latent outputs satisfy their physical bounds by
construction, and the predicted biomass increments are consecutive
differences of the biomass head within the window.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import sqrt

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError, ConfigError, ShapeError
from .process import growth_law

DEFAULT_FEATURES = (
    "day_of_season", "radiation", "t_min", "t_max", "precipitation",
    "treat_shelter", "treat_rainfed", "treat_irrigated",
    "soil_0", "soil_1", "soil_2",
)

BACKBONE_KINDS = ("mlp", "conv1d", "recurrent")
ACTIVATIONS = {"relu": ad.relu, "sigmoid": ad.sigmoid, "tanh": ad.tanh}

# output channel order of every trunk
CHANNELS = ("agb", "lai", "par", "rue", "fw")


@dataclass(frozen=True)
class NetworkConfig:
    backbone: str = "conv1d"
    hidden: tuple = (16, 16, 16)
    kernel_size: int = 5
    activation: str = "relu"
    dropout: float = 0.3
    features: tuple = DEFAULT_FEATURES
    rue_bounds: tuple = (0.5, 4.0)
    lai_cap: float = 12.0
    agb_scale: float = 1.0

    def __post_init__(self):
        if self.backbone not in BACKBONE_KINDS:
            raise ConfigError("network.backbone",
                              f"must be one of {BACKBONE_KINDS}, got {self.backbone!r}")
        if not self.hidden:
            raise ConfigError("network.hidden", "need at least one hidden layer")
        if any(int(h) < 1 for h in self.hidden):
            raise ConfigError("network.hidden", f"widths must be >= 1, got {self.hidden}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("network.dropout",
                              f"must lie in [0, 1), got {self.dropout}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError("network.activation",
                              f"unknown activation {self.activation!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("network.kernel_size",
                              f"must be odd and >= 1, got {self.kernel_size}")
        lo, hi = self.rue_bounds
        if not (0 < lo <= hi):
            raise ConfigError("network.rue_bounds",
                              f"need 0 < lo <= hi, got {self.rue_bounds}")
        if self.lai_cap <= 0:
            raise ConfigError("network.lai_cap", "must be > 0")
        if self.agb_scale <= 0:
            raise ConfigError("network.agb_scale", "must be > 0")

    @property
    def n_features(self):
        return len(self.features)

    def with_agb_scale(self, scale):
        return replace(self, agb_scale=float(scale))


@dataclass
class PredictionBundle:
    """Per-day network outputs for a window batch, as graph tensors.

    agb, lai, par, rue, fw have shape (batch, window); delta is the forward
    difference of agb along the window, shape (batch, window - 1).
    """

    agb: ad.Tensor
    lai: ad.Tensor
    par: ad.Tensor
    rue: ad.Tensor
    fw: ad.Tensor
    delta: ad.Tensor

    def arrays(self):
        return {name: getattr(self, name).value.copy()
                for name in (*CHANNELS, "delta")}


def _uniform(rng, fan_in, shape):
    bound = sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_network(config, seed):
    """Variance-scaled uniform weights keyed by fan-in; zero biases."""
    rng = np.random.default_rng(seed)
    store = ad.ParameterStore()
    n_out = len(CHANNELS)
    f = config.n_features
    if config.backbone == "mlp":
        dims = [f, *config.hidden, n_out]
        for i in range(len(dims) - 1):
            store.add(f"dense{i}.w", _uniform(rng, dims[i], (dims[i], dims[i + 1])))
            store.add(f"dense{i}.b", np.zeros(dims[i + 1]))
    elif config.backbone == "conv1d":
        k = config.kernel_size
        channels = [f, *config.hidden]
        for i in range(len(channels) - 1):
            fan_in = k * channels[i]
            store.add(f"conv{i}.w", _uniform(rng, fan_in, (fan_in, channels[i + 1])))
            store.add(f"conv{i}.b", np.zeros(channels[i + 1]))
        store.add("head.w", _uniform(rng, channels[-1], (channels[-1], n_out)))
        store.add("head.b", np.zeros(n_out))
    else:  # recurrent
        h = config.hidden[0]
        store.add("rnn.wx", _uniform(rng, f, (f, h)))
        store.add("rnn.wh", _uniform(rng, h, (h, h)))
        store.add("rnn.b", np.zeros(h))
        store.add("head.w", _uniform(rng, h, (h, n_out)))
        store.add("head.b", np.zeros(n_out))
    return store


def _maybe_dropout(t, config, mode, rng):
    if mode == "train" and config.dropout > 0.0:
        if rng is None:
            raise ArgumentError("train-mode forward with dropout needs an rng")
        return ad.dropout(t, config.dropout, rng)
    return t


def _trunk_mlp(store, x, config, mode, rng):
    batch, window, f = x.shape
    act = ACTIVATIONS[config.activation]
    h = ad.reshape(x, (batch * window, f))
    for i in range(len(config.hidden)):
        h = act(ad.matmul(h, store[f"dense{i}.w"]) + store[f"dense{i}.b"])
        h = _maybe_dropout(h, config, mode, rng)
    i = len(config.hidden)
    out = ad.matmul(h, store[f"dense{i}.w"]) + store[f"dense{i}.b"]
    return ad.reshape(out, (batch, window, len(CHANNELS)))


def _conv_same(h, w, b, kernel_size):
    """Same-padded 1-D convolution over the window axis via shifted slices."""
    batch, window, c_in = h.shape
    pad = kernel_size // 2
    zeros = ad.constant(np.zeros((batch, pad, c_in)))
    padded = ad.concat([zeros, h, zeros], axis=1)
    cols = ad.concat(
        [ad.slice_(padded, (slice(None), slice(j, j + window), slice(None)))
         for j in range(kernel_size)],
        axis=2,
    )
    flat = ad.reshape(cols, (batch * window, kernel_size * c_in))
    out = ad.matmul(flat, w) + b
    return ad.reshape(out, (batch, window, w.shape[1]))


def _trunk_conv1d(store, x, config, mode, rng):
    act = ACTIVATIONS[config.activation]
    h = x
    for i in range(len(config.hidden)):
        h = act(_conv_same(h, store[f"conv{i}.w"], store[f"conv{i}.b"],
                           config.kernel_size))
        h = _maybe_dropout(h, config, mode, rng)
    batch, window, c = h.shape
    flat = ad.reshape(h, (batch * window, c))
    out = ad.matmul(flat, store["head.w"]) + store["head.b"]
    return ad.reshape(out, (batch, window, len(CHANNELS)))


def _trunk_recurrent(store, x, config, mode, rng):
    batch, window, f = x.shape
    h_size = config.hidden[0]
    wx, wh, b = store["rnn.wx"], store["rnn.wh"], store["rnn.b"]
    head_w, head_b = store["head.w"], store["head.b"]
    h_prev = ad.constant(np.zeros((batch, h_size)))
    outs = []
    for t in range(window):
        xt = ad.reshape(ad.slice_(x, (slice(None), slice(t, t + 1), slice(None))),
                        (batch, f))
        h_prev = ad.tanh(ad.matmul(xt, wx) + ad.matmul(h_prev, wh) + b)
        # dropout only on the output projection, never on the recurrence
        h_out = _maybe_dropout(h_prev, config, mode, rng)
        yt = ad.matmul(h_out, head_w) + head_b
        outs.append(ad.reshape(yt, (batch, 1, len(CHANNELS))))
    return ad.concat(outs, axis=1)


_TRUNKS = {"mlp": _trunk_mlp, "conv1d": _trunk_conv1d, "recurrent": _trunk_recurrent}


def _bound_channel(raw, channel, config):
    """Squash one raw Tensor channel onto its physical range."""
    if channel == "agb":
        return ad.softplus(raw) * config.agb_scale
    if channel == "lai":
        # softplus, hard-capped at lai_cap as a numeric guard only
        sp = ad.softplus(raw)
        return config.lai_cap - ad.relu(config.lai_cap - sp)
    if channel == "par":
        return ad.softplus(raw)
    if channel == "rue":
        lo, hi = config.rue_bounds
        return lo + (hi - lo) * ad.sigmoid(raw)
    if channel == "fw":
        return ad.sigmoid(raw)
    raise ArgumentError(f"unknown channel {channel!r}")


def bound_latents(raw, config):
    """Map four unconstrained channels to a valid latent quadruple.

    ``raw`` is array-like with last axis (lai, par, rue, fw). Returns a dict
    of numpy arrays satisfying the latent invariants by construction.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != 4:
        raise ShapeError(f"bound_latents expects last axis 4, got {raw.shape}")
    out = {}
    for i, channel in enumerate(("lai", "par", "rue", "fw")):
        t = _bound_channel(ad.constant(raw[..., i]), channel, config)
        out[channel] = t.value
    return out


def forward(store, x, config, mode="infer", rng=None):
    """Run the configured trunk and heads over a window batch.

    x: array of shape (batch, window, features) or (window, features).
    mode "train" draws dropout masks from ``rng``; "infer" is deterministic.
    """
    if mode not in ("train", "infer"):
        raise ArgumentError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != config.n_features:
        raise ShapeError(
            f"feature window {x.shape} does not match layout "
            f"({config.n_features} features: {', '.join(config.features)})"
        )
    raw = _TRUNKS[config.backbone](store, ad.constant(x), config, mode, rng)
    heads = {}
    for i, channel in enumerate(CHANNELS):
        ch = ad.slice_(raw, (slice(None), slice(None), i))
        heads[channel] = _bound_channel(ch, channel, config)
    agb = heads["agb"]
    window = x.shape[1]
    delta = (ad.slice_(agb, (slice(None), slice(1, window)))
             - ad.slice_(agb, (slice(None), slice(0, window - 1))))
    return PredictionBundle(agb=agb, lai=heads["lai"], par=heads["par"],
                            rue=heads["rue"], fw=heads["fw"], delta=delta)


def residual_graph(bundle, k):
    """Process residual of the predicted increments, as a graph Tensor.

    The latent at day t drives the increment from t to t+1, so the last
    window day's latents do not enter.
    """
    w = bundle.agb.shape[1]
    if w < 2:
        raise ArgumentError("residuals need at least two window steps")
    head = (slice(None), slice(0, w - 1))
    phi = growth_law(ad.slice_(bundle.rue, head), ad.slice_(bundle.par, head),
                     ad.slice_(bundle.lai, head), ad.slice_(bundle.fw, head),
                     k, exp=ad.exp)
    return bundle.delta - phi
