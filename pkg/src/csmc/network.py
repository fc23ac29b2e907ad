"""The staged decoder.

Each stage runs three modules on the block measurements y:

* a preliminary CNN, y -> x_pre (fc to 16x16, then a 3x3 conv stack),
* multi-hypothesis motion compensation x_mc = H w, matched against the
  previous stage's output (stage 1 matches its own x_pre),
* a residual CNN on d = y - Phi x_mc,

fused as x_out = g * x_pre + (1 - g) * (x_mc + x_res), g = sigmoid(gamma).

All batched arrays are (B, ...) with blocks rasterised row-major. Parameters
live in one flat ordered dict keyed ``stage{k}.{module}.{layer}.{weight|bias}``.
"""

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import mh
from .errors import ConfigError, DimensionError
from .mh import SearchWindow, hypothesis_indices
from .sensing import MeasurementMatrix, SensingConfig, make_matrix
from .tensor import (
    conv3x3_nhwc_backward,
    conv3x3_nhwc_forward,
    fc_backward,
    fc_forward,
)

MAX_STAGES = 8


@dataclass(frozen=True)
class ModelConfig:
    block_size: int = 16
    compression_factor: int = 16
    matrix_seed: int = 0
    init_seed: int = 0
    stage_count: int = 4
    window_radius: int = 8
    window_stride: int = 2
    mc_mode: str = "learned"
    prelim_channels: tuple = (64, 32, 16)
    residual_channels: tuple = (32, 16, 8, 4)

    def __post_init__(self):
        if not 1 <= self.stage_count <= MAX_STAGES:
            raise ConfigError(f"stage_count must be in 1..{MAX_STAGES}, got {self.stage_count}")
        if self.mc_mode not in mh.MC_MODES:
            raise ConfigError(f"mc_mode must be one of {mh.MC_MODES}, got {self.mc_mode!r}")
        object.__setattr__(self, "prelim_channels", tuple(self.prelim_channels))
        object.__setattr__(self, "residual_channels", tuple(self.residual_channels))
        self.sensing  # validates block_size / compression_factor
        self.window

    @property
    def sensing(self):
        return SensingConfig(self.block_size, self.compression_factor)

    @property
    def window(self):
        return SearchWindow(self.window_radius, self.window_stride)

    def to_dict(self):
        d = asdict(self)
        d["prelim_channels"] = list(self.prelim_channels)
        d["residual_channels"] = list(self.residual_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    params: dict
    phi: MeasurementMatrix
    norm_mean: float = 0.0
    norm_std: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.norm_std > 0:
            raise ConfigError("norm_std must be positive")

    @property
    def n(self):
        return self.config.block_size ** 2

    @property
    def m(self):
        return self.phi.rows

    @property
    def stage_count(self):
        return self.config.stage_count

    def stage(self, k):
        """Parameters of stage ``k`` with the ``stage{k}.`` prefix stripped."""
        prefix = f"stage{k}."
        return {name[len(prefix):]: v for name, v in self.params.items()
                if name.startswith(prefix)}

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()},
                       extra=dict(self.extra))


# -- construction ------------------------------------------------------------

def _cnn_params(prefix, m, n, channels, rng):
    p = {
        f"{prefix}.fc.weight": rng.standard_normal((n, m)) / np.sqrt(m),
        f"{prefix}.fc.bias": np.zeros(n),
    }
    plan = (1,) + tuple(channels) + (1,)
    for i in range(len(plan) - 1):
        c_in, c_out = plan[i], plan[i + 1]
        last = i == len(plan) - 2
        scale = np.sqrt((1.0 if last else 2.0) / (9 * c_in))
        p[f"{prefix}.conv{i}.weight"] = rng.standard_normal((c_out, c_in, 3, 3)) * scale
        p[f"{prefix}.conv{i}.bias"] = np.zeros(c_out)
    return p


def init_params(config, m=None):
    rng = np.random.Generator(np.random.PCG64(config.init_seed))
    n = config.block_size ** 2
    m = config.sensing.m if m is None else m
    k = config.window.k
    params = {}
    for s in range(config.stage_count):
        params.update(_cnn_params(f"stage{s}.prelim", m, n, config.prelim_channels, rng))
        for name, v in mh.init_mc_head(k, rng).items():
            params[f"stage{s}.mc.{name}"] = v
        params.update(_cnn_params(f"stage{s}.residual", m, n, config.residual_channels, rng))
        params[f"stage{s}.gamma"] = np.zeros(1)
    return params


def build_model(config=ModelConfig(), norm_mean=0.0, norm_std=1.0):
    phi = make_matrix(config.sensing, config.matrix_seed)
    return Model(config, init_params(config, phi.rows), phi, norm_mean, norm_std)


def conv_count(params, prefix):
    return sum(1 for k in params if k.startswith(prefix + ".conv") and k.endswith(".weight"))


# -- CNN branch (fc -> conv stack) -------------------------------------------

def cnn_forward(p, prefix, v, fc_relu, block_size=16):
    """fc (+ReLU) -> reshape to one channel -> 3x3 convs, ReLU on all but the last."""
    z = fc_forward(v, p[f"{prefix}.fc.weight"], p[f"{prefix}.fc.bias"])
    a = np.maximum(z, 0.0) if fc_relu else z
    img = a.reshape(-1, block_size, block_size, 1)
    cache = {"v": v, "z": z, "fc_relu": fc_relu, "conv": [], "pre": []}
    count = conv_count(p, prefix)
    for i in range(count):
        out, conv_cache = conv3x3_nhwc_forward(img, p[f"{prefix}.conv{i}.weight"],
                                               p[f"{prefix}.conv{i}.bias"])
        cache["conv"].append(conv_cache)
        cache["pre"].append(out)
        img = np.maximum(out, 0.0) if i < count - 1 else out
    return img.reshape(v.shape[:-1] + (block_size * block_size,)), cache


def cnn_backward(p, prefix, cache, upstream, grads):
    """Accumulates parameter gradients into ``grads``; returns d/d(input)."""
    count = len(cache["conv"])
    g = upstream.reshape(cache["pre"][-1].shape)
    for i in reversed(range(count)):
        if i < count - 1:
            g = np.where(cache["pre"][i] > 0, g, 0.0)
        lg = conv3x3_nhwc_backward(cache["conv"][i], p[f"{prefix}.conv{i}.weight"], g,
                                   need_input=True)
        _acc(grads, f"{prefix}.conv{i}.weight", lg.d_params[0])
        _acc(grads, f"{prefix}.conv{i}.bias", lg.d_params[1])
        g = lg.d_input
    g = g.reshape(cache["z"].shape)
    if cache["fc_relu"]:
        g = np.where(cache["z"] > 0, g, 0.0)
    lg = fc_backward(cache["v"], p[f"{prefix}.fc.weight"], g)
    _acc(grads, f"{prefix}.fc.weight", lg.d_params[0])
    _acc(grads, f"{prefix}.fc.bias", lg.d_params[1])
    return lg.d_input


def _acc(grads, name, value):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


def prelim_forward(params, y_norm, block_size=16):
    """Preliminary reconstruction for already-normalised measurements.

    ``params`` is a stage dict (``prelim.fc.weight``, ...) as returned by
    :meth:`Model.stage`; y_norm is (M,) or (B, M).
    """
    y = np.asarray(y_norm, dtype=np.float64)
    out, _ = cnn_forward(params, "prelim", np.atleast_2d(y), True, block_size)
    return out[0] if y.ndim == 1 else out


# -- stage -------------------------------------------------------------------

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _stage_forward(p, s, y, y_norm, phi, H, x_match, mc_mode, norm_std, block_size):
    pre = f"stage{s}"
    x_pre, c_pre = cnn_forward(p, f"{pre}.prelim", y_norm, True, block_size)
    if x_match is None:
        x_match = x_pre
    cache = {"c_pre": c_pre, "mode": mc_mode, "H": H}
    if H is None or mc_mode == "off":
        x_mc = np.zeros_like(x_pre)
        cache["mode"] = "off"
    elif mc_mode == "learned":
        head = {k: p[f"{pre}.mc.{k}"] for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias")}
        _, x_mc, cache["c_mc"] = mh.learned_predict(H, x_match, head, return_cache=True)
        cache["head"] = head
    else:
        _, x_mc = mh.lsq_predict(H, x_match)
    d = y - x_mc @ phi.T
    x_res, cache["c_res"] = cnn_forward(p, f"{pre}.residual", d / norm_std, False, block_size)
    g = sigmoid(p[f"{pre}.gamma"][0])
    x_out = g * x_pre + (1.0 - g) * (x_mc + x_res)
    cache.update(x_pre=x_pre, x_mc=x_mc, x_res=x_res, d=d, g=g)
    return x_out, cache


def _stage_backward(p, s, cache, g_out, g_d_extra, phi, norm_std, grads):
    """Returns (d/d x_pre of this stage, d/d x_match)."""
    pre = f"stage{s}"
    g = cache["g"]
    x_pre, x_mc, x_res = cache["x_pre"], cache["x_mc"], cache["x_res"]
    _acc(grads, f"{pre}.gamma",
         np.array([np.sum(g_out * (x_pre - x_mc - x_res)) * g * (1.0 - g)]))
    g_pre = g * g_out
    g_sum = (1.0 - g) * g_out
    g_dn = cnn_backward(p, f"{pre}.residual", cache["c_res"], g_sum, grads)
    g_d = g_dn / norm_std
    if g_d_extra is not None:
        g_d = g_d + g_d_extra
    g_mc = g_sum - g_d @ phi
    g_match = None
    mode = cache["mode"]
    if mode == "learned":
        hg, g_match = mh.learned_backward(cache["head"], cache["c_mc"], g_mc)
        for k, v in hg.items():
            _acc(grads, f"{pre}.mc.{k}", v)
    elif mode == "lsq":
        g_match = mh.lsq_backward(cache["H"], g_mc)
    return g_pre, g_match


def _zero_grads_for_unused(p, s, mode, grads):
    if mode != "learned":
        for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"):
            name = f"stage{s}.mc.{k}"
            if name not in grads:
                grads[name] = np.zeros_like(p[name])


def forward(model, y, H=None, mc_mode=None):
    """Run all stages on a batch. Returns (x_out, caches).

    ``H`` is (B, N, K) or None; rows of H that are all zero behave as
    "no reference" (x_mc = 0).
    """
    p = model.params
    mode = model.config.mc_mode if mc_mode is None else mc_mode
    if mode not in mh.MC_MODES:
        raise ConfigError(f"unknown mc_mode {mode!r}")
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != model.m:
        raise DimensionError(f"measurements must be (B, {model.m}), got {y.shape}")
    if H is not None and H.shape != (y.shape[0], model.n, model.config.window.k):
        raise DimensionError(f"H must be {(y.shape[0], model.n, model.config.window.k)}, "
                             f"got {H.shape}")
    phi = model.phi.entries
    y_norm = (y - model.norm_mean) / model.norm_std
    caches = []
    x = None
    for s in range(model.stage_count):
        x, c = _stage_forward(p, s, y, y_norm, phi, H, x, mode, model.norm_std,
                              model.config.block_size)
        caches.append(c)
    return x, caches


def backward(model, caches, g_out, g_d_per_stage=None):
    """Gradient of a scalar loss given d(loss)/d(final output) and optional
    extra d(loss)/d(d) terms per stage. Returns a dict matching model.params."""
    p = model.params
    phi = model.phi.entries
    grads = {}
    g = g_out
    for s in reversed(range(model.stage_count)):
        c = caches[s]
        extra = None if g_d_per_stage is None else g_d_per_stage[s]
        g_pre, g_match = _stage_backward(p, s, c, g, extra, phi, model.norm_std, grads)
        if s == 0:
            if g_match is not None:
                g_pre = g_pre + g_match
            g = None
        else:
            g = g_match if g_match is not None else np.zeros_like(g_pre)
        cnn_backward(p, f"stage{s}.prelim", c["c_pre"], g_pre, grads)
        _zero_grads_for_unused(p, s, c["mode"], grads)
    return {k: grads[k] for k in p}


def stage_forward(stage_params, y, phi, H, x_match, norm_mean=0.0, norm_std=1.0,
                  mc_mode="learned", block_size=16):
    """One stage for a single block or a batch; returns (x_out, x_mc, d).

    ``stage_params`` is the output of :meth:`Model.stage`. ``x_match`` None
    means "use this stage's preliminary output" (the first-stage wiring).
    """
    p = {f"stage0.{k}": v for k, v in stage_params.items()}
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    yb = np.atleast_2d(y)
    Hm = None
    if H is not None:
        Hm = H.H if isinstance(H, mh.HypothesisSet) else np.asarray(H, dtype=np.float64)
        Hm = Hm[None] if single else Hm
    xm = None if x_match is None else np.atleast_2d(np.asarray(x_match, dtype=np.float64))
    phi_e = phi.entries if isinstance(phi, MeasurementMatrix) else np.asarray(phi)
    out, c = _stage_forward(p, 0, yb, (yb - norm_mean) / norm_std, phi_e, Hm, xm,
                            mc_mode, norm_std, block_size)
    res = out, c["x_mc"], c["d"]
    return tuple(r[0] for r in res) if single else res


# -- frame decoding ----------------------------------------------------------

class FrameBuffer:
    """Holds the previously decoded frame; read-only while a frame decodes."""

    def __init__(self, frame=None):
        self._frame = None
        if frame is not None:
            self.update(frame)

    @property
    def frame(self):
        return self._frame

    def update(self, frame):
        f = np.array(frame, dtype=np.float64)
        f.setflags(write=False)
        self._frame = f


def block_origins(height, width, block_size=16):
    return [(r, c) for r in range(0, height, block_size) for c in range(0, width, block_size)]


def check_geometry(height, width, block_size):
    if height % block_size or width % block_size or height <= 0 or width <= 0:
        raise ConfigError(f"frame {height}x{width} is not tiled by {block_size}x{block_size} blocks")


def blocks_to_frame(blocks, height, width, block_size=16):
    b = block_size
    blocks = np.asarray(blocks).reshape(height // b, width // b, b, b)
    return blocks.transpose(0, 2, 1, 3).reshape(height, width)


def frame_to_blocks(frame, block_size=16):
    h, w = frame.shape
    b = block_size
    return frame.reshape(h // b, b, w // b, b).transpose(0, 2, 1, 3).reshape(-1, b * b)


def decode_blocks(model, y, ref_frame, origins, frame_shape, mc_mode=None):
    """Decode blocks at ``origins`` against a frozen reference; unclamped."""
    mode = model.config.mc_mode if mc_mode is None else mc_mode
    H = None
    if ref_frame is not None and mode != "off":
        if ref_frame.shape != tuple(frame_shape):
            raise ConfigError(f"reference frame {ref_frame.shape} != geometry {frame_shape}")
        flat = ref_frame.ravel()
        H = np.stack([flat[hypothesis_indices(frame_shape, o, model.config.window,
                                              model.config.block_size)]
                      for o in origins])
    x, _ = forward(model, y, H, mode)
    return x


def decode_frame(model, measurements, buffer, frame_shape, mc_mode=None, block_order=None):
    """Decode one frame and push it into ``buffer``.

    Blocks depend only on their own measurements, the frozen reference and
    the model, so ``block_order`` (a permutation of block indices) only
    changes the processing order. A frame decoded with an empty buffer runs
    with motion compensation off.
    """
    height, width = frame_shape
    b = model.config.block_size
    check_geometry(height, width, b)
    origins = block_origins(height, width, b)
    y = np.asarray(measurements, dtype=np.float64)
    if y.shape != (len(origins), model.m):
        raise ConfigError(f"expected {len(origins)} blocks of {model.m} measurements, "
                          f"got array of shape {y.shape}")
    order = np.arange(len(origins)) if block_order is None else np.asarray(block_order)
    if sorted(order.tolist()) != list(range(len(origins))):
        raise ConfigError("block_order must be a permutation of the block indices")
    ref = buffer.frame
    mode = "off" if ref is None else mc_mode
    blocks = np.empty((len(origins), model.n))
    # One block per call keeps each block's arithmetic independent of batch layout.
    for i in order:
        blocks[i] = decode_blocks(model, y[i:i + 1], ref, [origins[i]], frame_shape, mode)[0]
    frame = np.clip(blocks_to_frame(blocks, height, width, b), 0.0, 1.0)
    buffer.update(frame)
    return frame


def decode_video(model, all_measurements, frame_shape, mc_mode=None):
    buffer = FrameBuffer()
    return [decode_frame(model, y, buffer, frame_shape, mc_mode) for y in all_measurements]
