"""Loss, Adam, learning-rate schedule, pre-training, training and checkpoints.

Checkpoint layout (little-endian)::

    b"CSMC" | u16 version | u32 header_len | header JSON (utf-8, sorted keys)
    | float64 arrays back to back, in the order listed by header["arrays"]

Array order: ``phi``, then every model parameter in model order, then
``adam.m.<name>`` and ``adam.v.<name>`` for every parameter when an
optimizer state is stored.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import network
from .errors import ConfigError, FormatError
from .network import Model, ModelConfig
from .sensing import MATRIX_ALGORITHM, MeasurementMatrix, measure

log = logging.getLogger(__name__)

# Values used for the full-scale protocol; desk defaults below are smaller.
PAPER_BATCH_SIZE = 400
PAPER_EPOCHS = 200


@dataclass(frozen=True)
class TrainConfig:
    lambda_mc: float = 0.5
    lr0: float = 0.01
    batch_size: int = 32
    epochs: int = 40
    lr_decay_factor: float = 10.0
    lr_floor: float = 1e-7
    seed: int = 0
    stage_count: int = 4
    pretrain_epochs: int = 0

    def __post_init__(self):
        if self.lambda_mc < 0:
            raise ConfigError("lambda_mc must be >= 0")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be > 0")
        if min(self.batch_size, self.epochs, self.stage_count) < 1 or self.pretrain_epochs < 0:
            raise ConfigError("batch_size, epochs and stage_count must be >= 1")


# -- loss --------------------------------------------------------------------

def _batch_arrays(model, batch):
    """(x, H, y) from either a (x, H[, y]) tuple or a (dataset, indices) pair."""
    if len(batch) == 2 and hasattr(batch[0], "hypotheses"):
        ds, idx = batch
        x, H = ds.x[idx], ds.hypotheses(idx)
        y = None
    else:
        x, H = batch[0], batch[1]
        y = batch[2] if len(batch) > 2 else None
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("loss needs a nonempty batch of blocks")
    if y is None:
        y = measure(model.phi, x)
    return x, H, y


def _loss_terms(model, x, H, y, lambda_mc, mc_mode=None):
    out, caches = network.forward(model, y, H, mc_mode)
    nb = x.shape[0]
    s = model.stage_count
    err = 0.5 * np.sum((out - x) ** 2) / nb
    mask = np.zeros(nb) if H is None else np.any(H, axis=(1, 2)).astype(np.float64)
    mc = 0.0
    for c in caches:
        if c["mode"] != "off":
            mc += 0.5 * np.sum(mask[:, None] * c["d"] ** 2) / (nb * s)
    return out, caches, mask, err, mc


def loss(model, batch, lambda_mc=0.5, mc_mode=None):
    """Returns (total, L_err, L_mc).

    L_err = 1/(2 N_b) sum |f(y_i) - x_i|^2 over the final stage output.
    L_mc = 1/(2 N_b) sum |y_i - Phi x_mc,i|^2, averaged over stages and taken
    over blocks that have a reference.
    """
    x, H, y = _batch_arrays(model, batch)
    _, _, _, err, mc = _loss_terms(model, x, H, y, lambda_mc, mc_mode)
    return err + lambda_mc * mc, err, mc


def loss_and_grad(model, batch, lambda_mc=0.5, mc_mode=None):
    x, H, y = _batch_arrays(model, batch)
    out, caches, mask, err, mc = _loss_terms(model, x, H, y, lambda_mc, mc_mode)
    nb = x.shape[0]
    s = model.stage_count
    g_out = (out - x) / nb
    g_d = [lambda_mc * mask[:, None] * c["d"] / (nb * s) if c["mode"] != "off" else None
           for c in caches]
    grads = network.backward(model, caches, g_out, g_d)
    return (err + lambda_mc * mc, err, mc), grads


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, names=None):
        names = list(params) if names is None else list(names)
        return cls({k: np.zeros_like(params[k]) for k in names},
                   {k: np.zeros_like(params[k]) for k in names})


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update, in place over the names tracked by ``state``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in state.m:
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def lr_schedule(losses, lr, factor=10.0, floor=1e-7):
    """Divide lr by ``factor`` when the latest epoch loss exceeds the previous one."""
    if len(losses) >= 2 and losses[-1] > losses[-2]:
        lr = lr / factor
    return max(lr, floor)


# -- training ----------------------------------------------------------------

def fit_norm_stats(model, dataset):
    """Store mean and std of the training measurements in ``model``."""
    y = measure(model.phi, dataset.x)
    std = float(y.std())
    model.norm_mean = float(y.mean())
    model.norm_std = std if std > 0 else 1.0
    return model


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def prelim_names(model):
    return [k for k in model.params if ".prelim." in k]


def pretrain_prelim(model, dataset, config=TrainConfig(), epochs=None, on_epoch=None):
    """Fit every stage's preliminary CNN to the blocks under plain MSE.

    Only ``stage*.prelim.*`` parameters change. Returns (model, epoch losses).
    """
    epochs = config.pretrain_epochs if epochs is None else epochs
    if len(dataset) == 0:
        raise ConfigError("pretraining dataset is empty")
    names = prelim_names(model)
    state = AdamState.zeros_like(model.params, names)
    rng = np.random.Generator(np.random.PCG64(config.seed + 7919))
    p = model.params
    b = model.config.block_size
    lr = config.lr0
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(len(dataset), config.batch_size, rng):
            x = dataset.x[idx]
            nb = len(idx)
            yn = (measure(model.phi, x) - model.norm_mean) / model.norm_std
            grads = {}
            batch_loss = 0.0
            for s in range(model.stage_count):
                out, cache = network.cnn_forward(p, f"stage{s}.prelim", yn, True, b)
                batch_loss += 0.5 * np.sum((out - x) ** 2) / nb
                network.cnn_backward(p, f"stage{s}.prelim", cache, (out - x) / nb, grads)
            adam_step(p, grads, state, lr)
            total += batch_loss * nb
            count += nb
        history.append(total / count / model.stage_count)
        lr = lr_schedule(history, lr, config.lr_decay_factor, config.lr_floor)
        if on_epoch:
            on_epoch(epoch, history[-1])
    return model, history


@dataclass
class Checkpoint:
    model: Model
    adam: AdamState | None = None
    epoch: int = 0
    history: list = field(default_factory=list)
    train_config: dict = field(default_factory=dict)


def train(model, dataset, config=TrainConfig(), checkpoint_path=None, log_path=None,
          on_epoch=None):
    """End-to-end optimisation of all parameters. Returns a Checkpoint whose
    ``history`` holds one {epoch, lr, L_err, L_mc, total} record per epoch."""
    if len(dataset) < config.batch_size:
        raise ConfigError(f"dataset of {len(dataset)} blocks is smaller than one batch "
                          f"({config.batch_size})")
    if config.stage_count != model.stage_count:
        raise ConfigError(f"config asks for {config.stage_count} stages, model has "
                          f"{model.stage_count}")
    state = AdamState.zeros_like(model.params)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    lr = config.lr0
    history = []
    totals = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            sums = np.zeros(3)
            for idx in _batches(len(dataset), config.batch_size, rng):
                (total, err, mc), grads = loss_and_grad(model, (dataset, idx), config.lambda_mc)
                adam_step(model.params, grads, state, lr)
                sums += len(idx) * np.array([total, err, mc])
            total, err, mc = (sums / len(dataset)).tolist()
            rec = {"epoch": epoch, "lr": lr, "L_err": err, "L_mc": mc, "total": total}
            history.append(rec)
            totals.append(total)
            log.info("epoch %d lr %.2e L_err %.6f L_mc %.6f total %.6f",
                     epoch, lr, err, mc, total)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            lr = lr_schedule(totals, lr, config.lr_decay_factor, config.lr_floor)
            ckpt = Checkpoint(model, state, epoch + 1, history, asdict(config))
            if checkpoint_path:
                save_checkpoint(checkpoint_path, ckpt)
            if on_epoch:
                on_epoch(ckpt)
    finally:
        if log_fh:
            log_fh.close()
    return Checkpoint(model, state, config.epochs, history, asdict(config))


# -- checkpoint io -----------------------------------------------------------

MAGIC = b"CSMC"
VERSION = 1


def checkpoint_to_bytes(ckpt):
    model = ckpt.model
    arrays = [("phi", model.phi.entries)]
    arrays += list(model.params.items())
    adam = None
    if ckpt.adam is not None:
        a = ckpt.adam
        adam = {"step": a.step, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
                "names": list(a.m)}
        arrays += [(f"adam.m.{k}", v) for k, v in a.m.items()]
        arrays += [(f"adam.v.{k}", v) for k, v in a.v.items()]
    header = {
        "model_config": model.config.to_dict(),
        "norm": {"mean": model.norm_mean, "std": model.norm_std},
        "phi": {"seed": model.phi.seed, "algorithm": model.phi.algorithm},
        "extra": model.extra,
        "adam": adam,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "train_config": ckpt.train_config,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(hb)), hb]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in arrays]
    return b"".join(parts)


def checkpoint_from_bytes(data):
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < 10:
        raise FormatError("truncated checkpoint header", offset=len(data))
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    if len(data) < 10 + hlen:
        raise FormatError(f"header needs {hlen} bytes, file has {len(data) - 10}", offset=10)
    header = json.loads(data[10:10 + hlen].decode("utf-8"))
    pos = 10 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"array {spec['name']} needs {nbytes} bytes, "
                              f"{len(data) - pos} remain", offset=pos)
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8,
                                             offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after arrays", offset=pos)
    config = ModelConfig.from_dict(header["model_config"])
    phi = MeasurementMatrix(arrays.pop("phi"), header["phi"]["seed"],
                            header["phi"].get("algorithm", MATRIX_ALGORITHM))
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    model = Model(config, params, phi, header["norm"]["mean"], header["norm"]["std"],
                  header.get("extra") or {})
    adam = None
    if header["adam"] is not None:
        a = header["adam"]
        adam = AdamState({k: arrays[f"adam.m.{k}"] for k in a["names"]},
                         {k: arrays[f"adam.v.{k}"] for k in a["names"]},
                         a["step"], a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(model, adam, header["epoch"], header["history"], header["train_config"])


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def save_model(path, model):
    save_checkpoint(path, Checkpoint(model))


def load_model(path):
    return load_checkpoint(path).model
