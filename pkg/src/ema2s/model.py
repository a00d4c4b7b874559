"""Spectral encoder, EMA encoder and shared decoder with analytic gradients.

Every network is a stack of bidirectional LSTM layers followed by one
linear layer and a rectifier. Parameters live in a flat ``dict`` mapping
dotted names (``"decoder.blstm2.bw.U"``) to float64 arrays; forward passes
return a cache that the matching ``backward`` consumes. Sequences are
``(T, d)`` matrices or ``(B, T, d)`` stacks of equal-length sequences.

Gate layout inside the fused ``4 * hidden`` axis is input, forget, output,
candidate, so the three sigmoid gates are contiguous.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ConfigurationError, InvalidInputError

NETWORKS = ("spec_encoder", "ema_encoder", "decoder")


@dataclass(frozen=True)
class ArchitectureConfig:
    """Layer widths of the three networks.

    Defaults are the published sizes: spectral encoder BLSTM 196/256,
    EMA encoder BLSTM 128/256, decoder 3 x BLSTM 256, 256-wide embeddings
    and 513 output bins. Hidden sizes count units per direction.
    """

    spec_bins: int = 513
    ema_width: int = 90
    spec_hidden: tuple = (196, 256)
    ema_hidden: tuple = (128, 256)
    decoder_hidden: tuple = (256, 256, 256)
    spec_embed_width: int = 256
    ema_embed_width: int = 256

    def __post_init__(self):
        for name in ("spec_hidden", "ema_hidden", "decoder_hidden"):
            object.__setattr__(self, name, tuple(int(h) for h in getattr(self, name)))
        widths = [self.spec_bins, self.ema_width, self.spec_embed_width, self.ema_embed_width]
        widths += list(self.spec_hidden) + list(self.ema_hidden) + list(self.decoder_hidden)
        if min(widths) <= 0:
            raise ConfigurationError("all layer widths must be positive")
        if not (self.spec_hidden and self.ema_hidden and self.decoder_hidden):
            raise ConfigurationError("each network needs at least one recurrent layer")
        if self.spec_embed_width != self.ema_embed_width:
            raise ConfigurationError(
                f"EMA embedding width {self.ema_embed_width} differs from spectral "
                f"embedding width {self.spec_embed_width}; the deep feature loss needs them equal"
            )

    @property
    def embed_width(self):
        return self.ema_embed_width

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# single LSTM direction
# ---------------------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward(x, W, U, b, reverse=False):
    """Run one LSTM direction over ``x`` of shape ``(B, T, d)``.

    Returns the hidden states ``(B, T, H)`` and a cache for
    :func:`lstm_backward`.
    """
    B, T, _ = x.shape
    H = U.shape[0]
    xw = x @ W + b
    hs = np.empty((B, T, H))
    h_prev = np.empty((B, T, H))
    c_prev = np.empty((B, T, H))
    gates = np.empty((B, T, 4 * H))
    tanh_c = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h_prev[:, t] = h
        c_prev[:, t] = c
        z = xw[:, t] + h @ U
        sig = _sigmoid(z[:, : 3 * H])
        g = np.tanh(z[:, 3 * H:])
        c = sig[:, H: 2 * H] * c + sig[:, :H] * g
        tc = np.tanh(c)
        h = sig[:, 2 * H: 3 * H] * tc
        gates[:, t, : 3 * H] = sig
        gates[:, t, 3 * H:] = g
        tanh_c[:, t] = tc
        hs[:, t] = h
    return hs, (x, W, U, h_prev, c_prev, gates, tanh_c, reverse)


def lstm_backward(dh_out, cache):
    """Backpropagate ``dL/dh`` through one direction.

    Returns ``(dx, dW, dU, db)``.
    """
    x, W, U, h_prev, c_prev, gates, tanh_c, reverse = cache
    B, T, d = x.shape
    H = U.shape[0]
    dz = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    order = range(T) if reverse else range(T - 1, -1, -1)
    for t in order:
        i = gates[:, t, :H]
        f = gates[:, t, H: 2 * H]
        o = gates[:, t, 2 * H: 3 * H]
        g = gates[:, t, 3 * H:]
        tc = tanh_c[:, t]
        dh = dh_out[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dzt = dz[:, t]
        dzt[:, :H] = dc * g * i * (1.0 - i)
        dzt[:, H: 2 * H] = dc * c_prev[:, t] * f * (1.0 - f)
        dzt[:, 2 * H: 3 * H] = dh * tc * o * (1.0 - o)
        dzt[:, 3 * H:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dzt @ U.T
    flat_dz = dz.reshape(B * T, 4 * H)
    dW = x.reshape(B * T, d).T @ flat_dz
    dU = h_prev.reshape(B * T, H).T @ flat_dz
    db = flat_dz.sum(axis=0)
    dx = dz @ W.T
    return dx, dW, dU, db


def blstm_forward(layer, x):
    """Bidirectional layer: concatenated forward and backward hidden states.

    ``layer`` maps ``fw.W, fw.U, fw.b, bw.W, bw.U, bw.b`` to arrays;
    ``x`` is ``(T, d)`` or ``(B, T, d)``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    d = layer["fw.W"].shape[0]
    if x.ndim != 3 or x.shape[2] != d:
        raise InvalidInputError(f"BLSTM layer expects input width {d}, got shape {x.shape}")
    fw, cf = lstm_forward(x, layer["fw.W"], layer["fw.U"], layer["fw.b"])
    bw, cb = lstm_forward(x, layer["bw.W"], layer["bw.U"], layer["bw.b"], reverse=True)
    out = np.concatenate([fw, bw], axis=2)
    return (out[0] if single else out), (cf, cb, single)


def blstm_backward(dy, cache):
    """Returns ``(dx, grads)`` with ``grads`` keyed like the layer dict."""
    cf, cb, single = cache
    dy = np.asarray(dy, dtype=np.float64)
    if single:
        dy = dy[None]
    h = cf[2].shape[0]
    dx_f, dWf, dUf, dbf = lstm_backward(dy[:, :, :h], cf)
    dx_b, dWb, dUb, dbb = lstm_backward(dy[:, :, h:], cb)
    grads = {"fw.W": dWf, "fw.U": dUf, "fw.b": dbf, "bw.W": dWb, "bw.U": dUb, "bw.b": dbb}
    dx = dx_f + dx_b
    return (dx[0] if single else dx), grads


def layer_params(params, prefix):
    """Strip ``prefix.`` from the keys of one layer's parameters."""
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class Network:
    """BLSTM stack -> linear -> rectifier.

    Parameters
    ----------
    name : str
        Prefix for parameter names.
    input_width : int
    hidden : sequence of int
        Per-direction hidden units of each BLSTM layer.
    output_width : int
    """

    def __init__(self, name, input_width, hidden, output_width):
        self.name = name
        self.input_width = int(input_width)
        self.hidden = tuple(int(h) for h in hidden)
        self.output_width = int(output_width)

    def __repr__(self):
        return f"Network({self.name!r}, {self.input_width}, {self.hidden}, {self.output_width})"

    def param_shapes(self):
        shapes = {}
        width = self.input_width
        for k, h in enumerate(self.hidden, start=1):
            for direction in ("fw", "bw"):
                prefix = f"{self.name}.blstm{k}.{direction}"
                shapes[f"{prefix}.W"] = (width, 4 * h)
                shapes[f"{prefix}.U"] = (h, 4 * h)
                shapes[f"{prefix}.b"] = (4 * h,)
            width = 2 * h
        shapes[f"{self.name}.proj.W"] = (width, self.output_width)
        shapes[f"{self.name}.proj.b"] = (self.output_width,)
        return shapes

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.input_width:
            raise InvalidInputError(
                f"{self.name} expects input width {self.input_width}, got shape {x.shape}"
            )
        if x.shape[1] == 0:
            raise InvalidInputError(f"{self.name} received an empty sequence")
        return x, single

    def forward(self, params, x):
        """Return ``(y, cache)``; ``y`` keeps the batch layout of ``x``."""
        x, single = self._as_batch(x)
        caches = []
        h = x
        for k in range(1, len(self.hidden) + 1):
            h, layer_cache = blstm_forward(layer_params(params, f"{self.name}.blstm{k}"), h)
            caches.append(layer_cache)
        pre = h @ params[f"{self.name}.proj.W"] + params[f"{self.name}.proj.b"]
        y = np.maximum(pre, 0.0)
        cache = (caches, h, pre > 0, single)
        return (y[0] if single else y), cache

    def __call__(self, params, x):
        return self.forward(params, x)[0]

    def backward(self, params, cache, dy):
        """Gradients of a scalar loss given ``dL/dy``.

        Returns
        -------
        grads : dict
            Keyed like :meth:`param_shapes`.
        dx : ndarray
            Gradient with respect to the network input.
        """
        caches, top, active, single = cache
        dy = np.asarray(dy, dtype=np.float64)
        if single:
            dy = dy[None]
        dpre = dy * active
        B, T, width = top.shape
        grads = {
            f"{self.name}.proj.W": top.reshape(B * T, width).T @ dpre.reshape(B * T, -1),
            f"{self.name}.proj.b": dpre.sum(axis=(0, 1)),
        }
        dh = dpre @ params[f"{self.name}.proj.W"].T
        for k in range(len(self.hidden), 0, -1):
            dh, layer_grads = blstm_backward(dh, caches[k - 1])
            grads.update({f"{self.name}.blstm{k}.{name}": g for name, g in layer_grads.items()})
        return grads, (dh[0] if single else dh)


def build_networks(config):
    """The three networks for an :class:`ArchitectureConfig`, keyed by name."""
    return {
        "spec_encoder": Network("spec_encoder", config.spec_bins, config.spec_hidden, config.spec_embed_width),
        "ema_encoder": Network("ema_encoder", config.ema_width, config.ema_hidden, config.ema_embed_width),
        "decoder": Network("decoder", config.embed_width, config.decoder_hidden, config.spec_bins),
    }


def param_shapes(config):
    shapes = {}
    for net in build_networks(config).values():
        shapes.update(net.param_shapes())
    return shapes


def init_params(config, seed):
    """Deterministic initial parameters for all three networks.

    Weight matrices are uniform in ``[-1/sqrt(rows), 1/sqrt(rows)]``;
    forget-gate biases start at 1, every other bias at 0.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            bias = np.zeros(shape)
            if ".blstm" in name:
                h = shape[0] // 4
                bias[h: 2 * h] = 1.0
            params[name] = bias
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def count_params(params):
    return int(sum(p.size for p in params.values()))


def subset(params, network):
    prefix = network + "."
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def spectral_encode(params, s, config=None):
    config = config or _infer_config(params)
    return build_networks(config)["spec_encoder"](params, s)


def ema_encode(params, e, config=None):
    config = config or _infer_config(params)
    return build_networks(config)["ema_encoder"](params, e)


def decode(params, z, config=None):
    config = config or _infer_config(params)
    return build_networks(config)["decoder"](params, z)


def _infer_config(params):
    """Recover layer widths from parameter shapes."""

    def hidden(net):
        out = []
        k = 1
        while f"{net}.blstm{k}.fw.U" in params:
            out.append(params[f"{net}.blstm{k}.fw.U"].shape[0])
            k += 1
        return tuple(out)

    try:
        return ArchitectureConfig(
            spec_bins=params["decoder.proj.W"].shape[1],
            ema_width=params["ema_encoder.blstm1.fw.W"].shape[0],
            spec_hidden=hidden("spec_encoder"),
            ema_hidden=hidden("ema_encoder"),
            decoder_hidden=hidden("decoder"),
            spec_embed_width=params["spec_encoder.proj.W"].shape[1],
            ema_embed_width=params["ema_encoder.proj.W"].shape[1],
        )
    except KeyError as exc:
        raise ConfigurationError(f"parameter set is missing {exc}") from None
