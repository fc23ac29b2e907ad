"""Encoder side of the codec and the measurement file format.

Measurement file layout (little-endian)::

    b"CSMM" | u16 version | u32 header_len | header JSON (utf-8)
    | float64 measurements, shape (frames, blocks, M)

Blocks are in raster order (left to right, top to bottom). The header
records block size, M, N, compression factor, frame geometry and the
measurement-matrix seed and algorithm, so any decoder can check that it
holds the matching matrix.
"""

import json
import struct

import numpy as np

from .errors import ConfigError, FormatError
from .network import check_geometry, frame_to_blocks
from .sensing import SNR_CAP_DB, add_noise, measure

MAGIC = b"CSMM"
VERSION = 1


def encode_frames(frames, phi, block_size=16, snr_db=None, noise_seed=0):
    """Measure every block of every frame.

    ``frames`` is (T, H, W) in [0, 1]. With ``snr_db`` set, frame t gets
    Gaussian noise at that SNR (over all of its measurements) seeded with
    ``noise_seed + t``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    _, h, w = frames.shape
    check_geometry(h, w, block_size)
    ys = np.stack([measure(phi, frame_to_blocks(f, block_size)) for f in frames])
    if snr_db is not None:
        ys = np.stack([add_noise(y, snr_db, noise_seed + t) for t, y in enumerate(ys)])
    return ys


def make_header(phi, block_size, frames_shape, snr_db=None, noise_seed=None):
    t, h, w = frames_shape
    n = block_size * block_size
    return {
        "block_size": block_size,
        "m": phi.rows,
        "n": n,
        "compression_factor": n // phi.rows,
        "width": w,
        "height": h,
        "frames": t,
        "matrix_seed": phi.seed,
        "matrix_algorithm": phi.algorithm,
        "noise_snr_db": None if snr_db is None else min(float(snr_db), SNR_CAP_DB),
        "noise_seed": noise_seed,
    }


def measurements_to_bytes(header, ys):
    ys = np.asarray(ys, dtype="<f8")
    expected = (header["frames"], (header["height"] // header["block_size"])
                * (header["width"] // header["block_size"]), header["m"])
    if ys.shape != expected:
        raise ConfigError(f"measurement array {ys.shape} does not match header {expected}")
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<HI", VERSION, len(hb)) + hb + ys.tobytes()


def measurements_from_bytes(data):
    if len(data) < 10:
        raise FormatError(f"truncated header: {len(data)} bytes", offset=len(data))
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported measurement file version {version}", offset=4)
    if len(data) < 10 + hlen:
        raise FormatError(f"header needs {hlen} bytes, file has {len(data) - 10}", offset=10)
    header = json.loads(data[10:10 + hlen].decode("utf-8"))
    b = header["block_size"]
    shape = (header["frames"], (header["height"] // b) * (header["width"] // b), header["m"])
    expected = 8 * int(np.prod(shape))
    actual = len(data) - 10 - hlen
    if actual != expected:
        raise FormatError(f"payload is {actual} bytes, expected {expected}",
                          offset=10 + hlen + min(actual, expected))
    ys = np.frombuffer(data, dtype="<f8", offset=10 + hlen).astype(np.float64).reshape(shape)
    return header, ys


def write_measurements(path, header, ys):
    with open(path, "wb") as fh:
        fh.write(measurements_to_bytes(header, ys))


def read_measurements(path):
    with open(path, "rb") as fh:
        return measurements_from_bytes(fh.read())


def check_model_matches(header, model):
    """Refuse to decode with a model whose matrix differs from the encoder's."""
    if header["matrix_seed"] != model.phi.seed:
        raise ConfigError(f"measurements were taken with matrix seed {header['matrix_seed']}, "
                          f"model uses seed {model.phi.seed}")
    if header.get("matrix_algorithm", model.phi.algorithm) != model.phi.algorithm:
        raise ConfigError(f"matrix algorithm {header['matrix_algorithm']!r} differs from the "
                          f"model's {model.phi.algorithm!r}")
    if header["m"] != model.m or header["block_size"] != model.config.block_size:
        raise ConfigError(f"measurements use B={header['block_size']}, M={header['m']}; "
                          f"model uses B={model.config.block_size}, M={model.m}")
