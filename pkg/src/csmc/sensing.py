"""Block measurement: matrix generation, y = Phi x, residual measurement and
additive Gaussian measurement noise."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateSignalError, DimensionError

# Recorded in model files so another implementation can regenerate Phi.
MATRIX_ALGORITHM = "numpy-pcg64/standard_normal(M,N)/qr(G^T)-sign-fixed"

SNR_CAP_DB = 300.0


@dataclass(frozen=True)
class SensingConfig:
    block_size: int = 16
    compression_factor: int = 16
    noise_snr_db: float | None = None

    def __post_init__(self):
        if self.block_size < 1 or self.compression_factor < 1:
            raise ConfigError("block_size and compression_factor must be positive")
        if self.n % self.compression_factor:
            raise ConfigError(
                f"block area {self.n} is not divisible by compression factor "
                f"{self.compression_factor}")

    @property
    def n(self):
        return self.block_size * self.block_size

    @property
    def m(self):
        return self.n // self.compression_factor


@dataclass(frozen=True, eq=False)
class MeasurementMatrix:
    entries: np.ndarray
    seed: int
    algorithm: str = field(default=MATRIX_ALGORITHM)

    def __post_init__(self):
        self.entries.setflags(write=False)

    @property
    def rows(self):
        return self.entries.shape[0]

    @property
    def cols(self):
        return self.entries.shape[1]

    def __eq__(self, other):
        return (isinstance(other, MeasurementMatrix) and self.seed == other.seed
                and np.array_equal(self.entries, other.entries))


def make_matrix(config, seed, allow_square=False):
    """Seeded Gaussian matrix with orthonormalised rows.

    ``allow_square`` admits M == N, which is only useful for round-trip tests.
    """
    m, n = config.m, config.n
    if m > n or (m == n and not allow_square):
        raise ConfigError(f"need M < N for compressive sensing, got M={m}, N={n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    g = rng.standard_normal((m, n))
    q, r = np.linalg.qr(g.T)
    # Sign fix makes the factorisation unique.
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return MeasurementMatrix(np.ascontiguousarray(q.T), int(seed))


def _entries(phi):
    return phi.entries if isinstance(phi, MeasurementMatrix) else np.asarray(phi)


def measure(phi, x):
    """y = Phi x for one block (N,) or a stack of blocks (..., N)."""
    a = _entries(phi)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != a.shape[1]:
        raise DimensionError(f"block length {x.shape[-1]} != matrix columns {a.shape[1]}")
    return x @ a.T


def residual_measure(y, phi, x_mc):
    y = np.asarray(y, dtype=np.float64)
    m = _entries(phi).shape[0]
    if y.shape[-1] != m:
        raise DimensionError(f"measurement length {y.shape[-1]} != matrix rows {m}")
    return y - measure(phi, x_mc)


def noise_sigma(y, snr_db):
    """Noise standard deviation giving the requested SNR over all of ``y``."""
    y = np.asarray(y, dtype=np.float64)
    energy = float(np.sum(y * y))
    if energy == 0.0:
        raise DegenerateSignalError("SNR is undefined for a zero-energy measurement")
    snr_db = min(float(snr_db), SNR_CAP_DB)
    return np.sqrt(energy / (y.size * 10.0 ** (snr_db / 10.0)))


def add_noise(y, snr_db, seed):
    """y + n, n ~ N(0, sigma^2) i.i.d. with sigma^2 = |y|^2 / (size * 10^(snr/10)).

    The SNR is taken over the whole array, so passing all blocks of a frame
    sets the frame-level SNR.
    """
    y = np.asarray(y, dtype=np.float64)
    sigma = noise_sigma(y, snr_db)
    rng = np.random.Generator(np.random.PCG64(seed))
    return y + sigma * rng.standard_normal(y.shape)
