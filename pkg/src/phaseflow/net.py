"""Mean-displacement field network with structural forward and reverse mode.

The network maps (x, p, dt) to the pair (v_bar, f_bar): the mean velocity
and mean force over a window of length dt, so that one large step is
x' = x + dt v_bar, p' = p + dt f_bar.

Architecture: dt passes through Gaussian random Fourier features (frozen at
init) and a 2-layer MLP; x and p each pass through their own 2-layer MLP;
the three embeddings are summed, refined by a 3-layer MLP, and read out by
two 2-layer heads.  All inputs are flat and concatenated, so particle count
is fixed at construction.

Differentiation is structural, written layer by layer:

  forward_with_tangent  pushes an input tangent (dx, dp, ddt) through the
                        same graph (the JVP the consistency target needs),
  backward              pulls head cotangents back to parameter gradients
                        and input cotangents (the VJP training needs).

Everything is float64 numpy; no autodiff framework is involved.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
import numpy as np

from .errors import ConfigError, DimensionMismatch, FileFormatError

_TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# activations (value and first derivative, elementwise)

def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _silu(z):
    return z * _sigmoid(z)


def _silu_d(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_tanh(z):
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3)))


def _gelu_tanh_d(z):
    u = _GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (
        1.0 + 3.0 * 0.044715 * z * z
    )


def _tanh(z):
    return np.tanh(z)


def _tanh_d(z):
    t = np.tanh(z)
    return 1.0 - t * t


_ACTIVATIONS = {
    "silu": (_silu, _silu_d),
    "gelu_tanh": (_gelu_tanh, _gelu_tanh_d),
    "tanh": (_tanh, _tanh_d),
}

_ACTIVATION_TAGS = {"silu": 1, "gelu_tanh": 2, "tanh": 3}
_TAG_ACTIVATIONS = {v: k for k, v in _ACTIVATION_TAGS.items()}


@dataclass(frozen=True)
class NetConfig:
    """Shape and hyperparameters of one field network."""

    count: int
    dims: int
    dt_max: float
    width: int = 256
    embed_width: int | None = None
    sigma_f: float = 1.0
    activation: str = "silu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.count < 1 or self.dims not in (1, 2, 3):
            raise ConfigError("bad particle count or dims")
        if self.width < 1 or (self.embed_width is not None and self.embed_width < 1):
            raise ConfigError("widths must be positive")
        if not (np.isfinite(self.dt_max) and self.dt_max > 0):
            raise ConfigError("dt_max must be positive and finite")

    @property
    def h_embed(self) -> int:
        return self.width if self.embed_width is None else self.embed_width

    @property
    def n_dof(self) -> int:
        return self.count * self.dims


def _layer_shapes(cfg: NetConfig):
    h, he, nd = cfg.width, cfg.h_embed, cfg.n_dof
    return [
        ("t1", h, 2 * he),
        ("t2", h, h),
        ("x1", h, nd),
        ("x2", h, h),
        ("p1", h, nd),
        ("p2", h, h),
        ("trunk1", h, h),
        ("trunk2", h, h),
        ("trunk3", h, h),
        ("v1", h, h),
        ("v2", nd, h),
        ("f1", h, h),
        ("f2", nd, h),
    ]


class FlowFieldNet:
    """Parameters plus the structural forward/JVP/backward passes."""

    def __init__(self, config: NetConfig, params: dict, fourier_freqs: np.ndarray):
        self.config = config
        self.params = params
        self.fourier_freqs = np.asarray(fourier_freqs, dtype=np.float64)
        if self.fourier_freqs.shape != (config.h_embed,):
            raise DimensionMismatch("fourier_freqs must have shape (h_embed,)")
        self._act, self._act_d = _ACTIVATIONS[config.activation]

    @property
    def dt_max(self) -> float:
        return self.config.dt_max

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator) -> "FlowFieldNet":
        """Fan-in scaled Gaussian weights, zero biases, frozen Fourier bank.

        Draw order is fixed (frequencies first, then layers in declaration
        order), so a given stream always yields the same network.
        """
        freqs = config.sigma_f * rng.standard_normal(config.h_embed)
        params = {}
        for name, out, inp in _layer_shapes(config):
            params[name + "_w"] = rng.standard_normal((out, inp)) / np.sqrt(inp)
            params[name + "_b"] = np.zeros(out)
        return cls(config, params, freqs)

    # -- parameter vector helpers ------------------------------------------

    def param_names(self):
        for name, _, _ in _layer_shapes(self.config):
            yield name + "_w"
            yield name + "_b"

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].reshape(-1) for k in self.param_names()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        for k in self.param_names():
            size = self.params[k].size
            self.params[k] = vec[pos : pos + size].reshape(self.params[k].shape).copy()
            pos += size
        if pos != vec.size:
            raise DimensionMismatch(
                f"flat vector has {vec.size} entries, network needs {pos}"
            )

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(self.params[k]) for k in self.param_names()}

    # -- core passes --------------------------------------------------------

    def _prep(self, x, p, dt):
        nd = self.config.n_dof
        x = np.asarray(x, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        dt = np.asarray(dt, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != nd or p.shape != x.shape:
            raise DimensionMismatch(f"expected (B, {nd}) position/momentum batches")
        if dt.shape != (x.shape[0],):
            raise DimensionMismatch("dt must be a (B,) vector")
        return x, p, dt

    def _fourier(self, dt):
        arg = _TWO_PI * dt[:, None] * self.fourier_freqs[None, :]
        return np.concatenate([np.cos(arg), np.sin(arg)], axis=1), arg

    def forward(self, x, p, dt, need_cache: bool = False):
        """Field values (v_bar, f_bar), each (B, N*d)."""
        out = self._run(x, p, dt, tangents=None, need_cache=need_cache)
        if need_cache:
            return out[0], out[2]
        return out[0]

    def forward_with_tangent(self, x, p, dt, tangents, need_cache: bool = False):
        """Values and their directional derivative along (dx, dp, ddt).

        Returns ((v, f), (dv, df)) and, on request, the cache that
        backward() consumes.
        """
        out = self._run(x, p, dt, tangents=tangents, need_cache=need_cache)
        if need_cache:
            return out[0], out[1], out[2]
        return out[0], out[1]

    def _run(self, x, p, dt, tangents, need_cache):
        x, p, dt = self._prep(x, p, dt)
        P = self.params
        act, act_d = self._act, self._act_d

        want_tan = tangents is not None
        if want_tan:
            tx = np.asarray(tangents[0], dtype=np.float64)
            tp = np.asarray(tangents[1], dtype=np.float64)
            tdt = np.asarray(tangents[2], dtype=np.float64)
            if tx.shape != x.shape or tp.shape != p.shape or tdt.shape != dt.shape:
                raise DimensionMismatch("tangent shapes must match input shapes")

        def lin(name, z):
            return z @ P[name + "_w"].T + P[name + "_b"]

        def lin_t(name, dz):
            return dz @ P[name + "_w"].T

        phi, arg = self._fourier(dt)
        he = self.config.h_embed
        if want_tan:
            w = _TWO_PI * self.fourier_freqs[None, :]
            dphi = np.concatenate(
                [-np.sin(arg) * w, np.cos(arg) * w], axis=1
            ) * tdt[:, None]

        # embeddings
        ht1 = lin("t1", phi)
        et = lin("t2", act(ht1))
        hx1 = lin("x1", x)
        ex = lin("x2", act(hx1))
        hp1 = lin("p1", p)
        ep = lin("p2", act(hp1))
        h0 = et + ex + ep
        if want_tan:
            dt1 = lin_t("t1", dphi)
            det = lin_t("t2", act_d(ht1) * dt1)
            dx1 = lin_t("x1", tx)
            dex = lin_t("x2", act_d(hx1) * dx1)
            dp1 = lin_t("p1", tp)
            dep = lin_t("p2", act_d(hp1) * dp1)
            dh0 = det + dex + dep

        # trunk
        h1 = lin("trunk1", act(h0))
        h2 = lin("trunk2", act(h1))
        h3 = lin("trunk3", act(h2))
        if want_tan:
            dh1 = lin_t("trunk1", act_d(h0) * dh0)
            dh2 = lin_t("trunk2", act_d(h1) * dh1)
            dh3 = lin_t("trunk3", act_d(h2) * dh2)

        # heads
        zh = act(h3)
        hv1 = lin("v1", zh)
        v = lin("v2", act(hv1))
        hf1 = lin("f1", zh)
        f = lin("f2", act(hf1))
        if want_tan:
            dzh = act_d(h3) * dh3
            dhv1 = lin_t("v1", dzh)
            dv = lin_t("v2", act_d(hv1) * dhv1)
            dhf1 = lin_t("f1", dzh)
            df = lin_t("f2", act_d(hf1) * dhf1)

        cache = None
        if need_cache:
            cache = {
                "x": x, "p": p, "dt": dt, "phi": phi, "arg": arg,
                "ht1": ht1, "hx1": hx1, "hp1": hp1,
                "h0": h0, "h1": h1, "h2": h2, "h3": h3,
                "hv1": hv1, "hf1": hf1,
            }
        tans = (dv, df) if want_tan else None
        return (v, f), tans, cache

    def backward(self, cache: dict, g_v: np.ndarray, g_f: np.ndarray):
        """Reverse pass from head cotangents.

        Returns (grads, (g_x, g_p, g_dt)): parameter gradients keyed like
        params, and the input cotangents (the transpose of the JVP).
        """
        P = self.params
        act, act_d = self._act, self._act_d
        grads = {}

        def lin_back(name, g_out, z_in):
            grads[name + "_w"] = g_out.T @ z_in
            grads[name + "_b"] = g_out.sum(axis=0)
            return g_out @ P[name + "_w"]

        zh = act(cache["h3"])

        # velocity head
        zv = act(cache["hv1"])
        g_hv1 = lin_back("v2", g_v, zv) * act_d(cache["hv1"])
        g_zh_v = lin_back("v1", g_hv1, zh)
        # force head
        zf = act(cache["hf1"])
        g_hf1 = lin_back("f2", g_f, zf) * act_d(cache["hf1"])
        g_zh_f = lin_back("f1", g_hf1, zh)

        g_h3 = (g_zh_v + g_zh_f) * act_d(cache["h3"])

        # trunk
        g_h2 = lin_back("trunk3", g_h3, act(cache["h2"])) * act_d(cache["h2"])
        g_h1 = lin_back("trunk2", g_h2, act(cache["h1"])) * act_d(cache["h1"])
        g_h0 = lin_back("trunk1", g_h1, act(cache["h0"])) * act_d(cache["h0"])

        # embeddings (h0 = et + ex + ep fans the cotangent out unchanged)
        g_ht1 = lin_back("t2", g_h0, act(cache["ht1"])) * act_d(cache["ht1"])
        g_phi = lin_back("t1", g_ht1, cache["phi"])
        g_hx1 = lin_back("x2", g_h0, act(cache["hx1"])) * act_d(cache["hx1"])
        g_x = lin_back("x1", g_hx1, cache["x"])
        g_hp1 = lin_back("p2", g_h0, act(cache["hp1"])) * act_d(cache["hp1"])
        g_p = lin_back("p1", g_hp1, cache["p"])

        # fourier features back to dt
        he = self.config.h_embed
        w = _TWO_PI * self.fourier_freqs[None, :]
        arg = cache["arg"]
        g_dt = np.sum(
            g_phi[:, :he] * (-np.sin(arg)) * w + g_phi[:, he:] * np.cos(arg) * w,
            axis=1,
        )
        return grads, (g_x, g_p, g_dt)


# ---------------------------------------------------------------------------
# analytic oracle field

class AnalyticOscillatorField:
    """Exact mean-displacement field of the unit oscillator (omega = m = 1).

    v_bar(x, p, t) = (x (cos t - 1) + p sin t) / t
    f_bar(x, p, t) = (p (cos t - 1) - x sin t) / t

    with the t -> 0 limits (p, -x).  Implements the same forward /
    forward_with_tangent surface as FlowFieldNet, so it can stand in for a
    perfectly-trained network in losses and steppers.
    """

    count = 1
    dims = 1

    def __init__(self, dt_max: float = 2.5):
        self.dt_max = float(dt_max)
        # mirror NetConfig fields the steppers look at
        self.config = NetConfig(count=1, dims=1, dt_max=self.dt_max, width=1)

    @staticmethod
    def _coeffs(t):
        """A=(cos t - 1)/t, B=sin(t)/t and their t-derivatives, stable at 0."""
        small = np.abs(t) < 1e-4
        ts = np.where(small, 1.0, t)
        c, s = np.cos(ts), np.sin(ts)
        t2 = t * t
        a = np.where(small, -t / 2.0 + t * t2 / 24.0, (c - 1.0) / ts)
        b = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, s / ts)
        da = np.where(small, -0.5 + t2 / 8.0, (-s * ts - (c - 1.0)) / (ts * ts))
        db = np.where(small, -t / 3.0 + t * t2 / 30.0, (c * ts - s) / (ts * ts))
        return a, b, da, db

    def forward(self, x, p, dt, need_cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        dt = np.asarray(dt, dtype=np.float64)
        a, b, _, _ = self._coeffs(dt)
        v = x * a[:, None] + p * b[:, None]
        f = p * a[:, None] - x * b[:, None]
        if need_cache:
            return (v, f), None
        return v, f

    def forward_with_tangent(self, x, p, dt, tangents, need_cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        dt = np.asarray(dt, dtype=np.float64)
        tx, tp, tdt = (np.asarray(t, dtype=np.float64) for t in tangents)
        a, b, da, db = self._coeffs(dt)
        v = x * a[:, None] + p * b[:, None]
        f = p * a[:, None] - x * b[:, None]
        dv = (
            tx * a[:, None]
            + tp * b[:, None]
            + (x * da[:, None] + p * db[:, None]) * tdt[:, None]
        )
        df = (
            tp * a[:, None]
            - tx * b[:, None]
            + (p * da[:, None] - x * db[:, None]) * tdt[:, None]
        )
        if need_cache:
            return (v, f), (dv, df), None
        return (v, f), (dv, df)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"HFMC"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII")  # magic, version, N, d, H, He, act, pad
_SCALARS = struct.Struct("<ddQ")  # dt_max, sigma_f, n_params


def save_checkpoint(path, net: FlowFieldNet) -> None:
    """Binary checkpoint (format HFMC v1): config header, Fourier bank,
    flat float64 parameter vector."""
    cfg = net.config
    flat = net.flat_params()
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _MAGIC,
                _VERSION,
                cfg.count,
                cfg.dims,
                cfg.width,
                cfg.h_embed,
                _ACTIVATION_TAGS[cfg.activation],
                0,
            )
        )
        fh.write(_SCALARS.pack(cfg.dt_max, cfg.sigma_f, flat.size))
        fh.write(net.fourier_freqs.astype("<f8").tobytes())
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path) -> FlowFieldNet:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FileFormatError("truncated checkpoint header")
        magic, version, count, dims, width, h_embed, act_tag, _pad = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise FileFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        if version != _VERSION:
            raise FileFormatError(f"unsupported checkpoint version {version}")
        if act_tag not in _TAG_ACTIVATIONS:
            raise FileFormatError(f"unknown activation tag {act_tag}")
        dt_max, sigma_f, n_params = _SCALARS.unpack(fh.read(_SCALARS.size))
        freqs = np.frombuffer(fh.read(8 * h_embed), dtype="<f8")
        flat = np.frombuffer(fh.read(8 * n_params), dtype="<f8")
        if fh.read(1):
            raise FileFormatError("trailing bytes after checkpoint body")
    if freqs.size != h_embed or flat.size != n_params:
        raise FileFormatError("truncated checkpoint body")
    cfg = NetConfig(
        count=count,
        dims=dims,
        dt_max=dt_max,
        width=width,
        embed_width=h_embed,
        sigma_f=sigma_f,
        activation=_TAG_ACTIVATIONS[act_tag],
    )
    net = FlowFieldNet.init(cfg, np.random.Generator(np.random.Philox(0)))
    net.fourier_freqs = freqs.copy()
    net.load_flat(flat)
    return net
