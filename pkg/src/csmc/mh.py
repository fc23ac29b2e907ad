"""Multi-hypothesis motion compensation.

A block is predicted as x_mc = H w, where the columns of H are rasterised
candidate blocks taken from a search window of the reference frame. The
weights come either from a Tikhonov-regularised least-squares fit to a
matching target, or from a small learned fully-connected head.

Functions taking ``H`` accept one hypothesis matrix (N, K) or a batch
(B, N, K); matching vectors are then (N,) or (B, N).
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import BoundsError, ConfigError, DimensionError, SingularityError
from .tensor import fc_backward, fc_forward, relu_backward, relu_forward

MC_MODES = ("learned", "lsq", "off")


@dataclass(frozen=True)
class SearchWindow:
    radius: int = 8
    stride: int = 2

    def __post_init__(self):
        if not self.radius >= self.stride >= 1:
            raise ConfigError(f"need radius >= stride >= 1, got {self.radius}, {self.stride}")

    @property
    def steps(self):
        return self.radius // self.stride

    @property
    def k(self):
        return (2 * self.steps + 1) ** 2

    def offsets(self):
        grid = [self.stride * j for j in range(-self.steps, self.steps + 1)]
        return [(dy, dx) for dy in grid for dx in grid]


@dataclass(frozen=True, eq=False)
class HypothesisSet:
    H: np.ndarray
    offsets: tuple

    @property
    def k(self):
        return self.H.shape[1]


@lru_cache(maxsize=4096)
def _indices(frame_shape, block_pos, window, block_size):
    rows, cols = frame_shape
    r, c = block_pos
    b = block_size
    ar = np.arange(b)
    base = (ar[:, None] * cols + ar[None, :]).ravel()
    idx = np.empty((b * b, window.k), dtype=np.intp)
    for j, (dy, dx) in enumerate(window.offsets()):
        rr = min(max(r + dy, 0), rows - b)
        cc = min(max(c + dx, 0), cols - b)
        idx[:, j] = base + rr * cols + cc
    idx.setflags(write=False)
    return idx


def hypothesis_indices(frame_shape, block_pos, window, block_size=16):
    """Flat (N, K) indices into ``ref.ravel()`` giving H for this block.

    Candidate origins outside the frame are clamped onto its border, so K
    is the same for every block (edge blocks get duplicate columns).
    """
    rows, cols = (int(v) for v in frame_shape)
    r, c = (int(v) for v in block_pos)
    if rows < block_size or cols < block_size:
        raise BoundsError(f"reference {rows}x{cols} smaller than one block")
    if not (0 <= r <= rows - block_size and 0 <= c <= cols - block_size):
        raise BoundsError(f"block at {(r, c)} lies outside the {rows}x{cols} reference")
    return _indices((rows, cols), (r, c), window, block_size)


def gather_hypotheses(ref_frame, block_pos, window=SearchWindow(), block_size=16):
    ref = np.asarray(ref_frame, dtype=np.float64)
    idx = hypothesis_indices(ref.shape, block_pos, window, block_size)
    return HypothesisSet(ref.ravel()[idx], tuple(window.offsets()))


def _as_matrix(H):
    return H.H if isinstance(H, HypothesisSet) else np.asarray(H, dtype=np.float64)


def default_tikhonov(H):
    """1e-2 * trace(H^T H) / K, per sample."""
    return 1e-2 * np.einsum("...nk,...nk->...", H, H) / H.shape[-1]


def lsq_predict(H, target, tikhonov_lambda=None):
    """Solve (H^T H + lam I) w = H^T target; returns (w, H w).

    ``tikhonov_lambda=None`` uses :func:`default_tikhonov`. Rows of a batch
    whose H is identically zero (no reference) yield w = 0.
    """
    H = _as_matrix(H)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != H.shape[:-1]:
        raise DimensionError(f"target shape {t.shape} does not match H {H.shape}")
    k = H.shape[-1]
    lam = default_tikhonov(H) if tikhonov_lambda is None else np.broadcast_to(
        np.asarray(tikhonov_lambda, dtype=np.float64), H.shape[:-2])
    if np.any(lam < 0):
        raise ConfigError("tikhonov_lambda must be >= 0")
    gram = np.swapaxes(H, -1, -2) @ H + lam[..., None, None] * np.eye(k)
    rhs = np.einsum("...nk,...n->...k", H, t)
    empty = ~np.any(H, axis=(-2, -1))
    if np.any(empty):
        gram = np.where(empty[..., None, None], np.eye(k), gram)
    if np.any(lam == 0):
        ranks = np.linalg.matrix_rank(np.where(empty[..., None, None], np.eye(k), gram),
                                      hermitian=True)
        if np.any((ranks < k) & (lam == 0) & ~empty):
            raise SingularityError(
                "H^T H is singular; use tikhonov_lambda > 0 (duplicate or "
                "linearly dependent hypotheses)")
    w = np.linalg.solve(gram, rhs[..., None])[..., 0]
    return w, np.einsum("...nk,...k->...n", H, w)


def lsq_backward(H, upstream, tikhonov_lambda=None):
    """Gradient of x_mc w.r.t. the matching target for lsq_predict.

    x_mc = H A^{-1} H^T t with A symmetric, so the adjoint has the same form.
    """
    _, g = lsq_predict(H, upstream, tikhonov_lambda)
    return g


# -- learned head ------------------------------------------------------------

def init_mc_head(k, rng):
    """fc1: 2K->2K, fc2: 2K->K. fc2 starts at zero weight with bias 1/K,
    i.e. the plain average of all hypotheses."""
    return {
        "fc1.weight": rng.standard_normal((2 * k, 2 * k)) * np.sqrt(2.0 / (2 * k)),
        "fc1.bias": np.zeros(2 * k),
        "fc2.weight": np.zeros((k, 2 * k)),
        "fc2.bias": np.full(k, 1.0 / k),
    }


def head_features(H, target_estimate):
    """concat(H^T t, squared column norms) scaled by 1/N."""
    n = H.shape[-2]
    corr = np.einsum("...nk,...n->...k", H, target_estimate)
    norms = np.einsum("...nk,...nk->...k", H, H)
    return np.concatenate([corr, norms], axis=-1) / n


def learned_predict(H, target_estimate, params, return_cache=False):
    H = _as_matrix(H)
    t = np.asarray(target_estimate, dtype=np.float64)
    k = H.shape[-1]
    if params["fc2.weight"].shape[0] != k or params["fc1.weight"].shape[1] != 2 * k:
        raise DimensionError(
            f"head built for K={params['fc2.weight'].shape[0]}, hypotheses have K={k}")
    if t.shape != H.shape[:-1]:
        raise DimensionError(f"target shape {t.shape} does not match H {H.shape}")
    f = head_features(H, t)
    z1 = fc_forward(f, params["fc1.weight"], params["fc1.bias"])
    h1 = relu_forward(z1)
    w = fc_forward(h1, params["fc2.weight"], params["fc2.bias"])
    x_mc = np.einsum("...nk,...k->...n", H, w)
    if return_cache:
        return w, x_mc, (H, f, z1, h1)
    return w, x_mc


def learned_backward(params, cache, upstream):
    """Backprop d(loss)/d(x_mc) through the head.

    Returns (param grads dict, d(loss)/d(target_estimate)).
    """
    H, f, z1, h1 = cache
    n, k = H.shape[-2:]
    g_w = np.einsum("...nk,...n->...k", H, upstream)
    g2 = fc_backward(h1, params["fc2.weight"], g_w)
    g_z1 = relu_backward(z1, g2.d_input).d_input
    g1 = fc_backward(f, params["fc1.weight"], g_z1)
    g_corr = g1.d_input[..., :k] / n
    d_target = np.einsum("...nk,...k->...n", H, g_corr)
    grads = {
        "fc1.weight": g1.d_params[0], "fc1.bias": g1.d_params[1],
        "fc2.weight": g2.d_params[0], "fc2.bias": g2.d_params[1],
    }
    return grads, d_target
