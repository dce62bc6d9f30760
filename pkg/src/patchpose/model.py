"""Patch pose estimator: conv encoder + two MLP softmax heads, trained by hand.

Forward and backward passes are written out in numpy (float64, NHWC) so the
alignment-loss gradients can be checked end to end against finite
differences. Training uses plain SGD with classical momentum.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .histogram import (
    ORIENTATION_BINS,
    SCALE_BINS,
    Axis,
    PoseHistogram,
    loss_gradients,
    symmetric_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PPCK"
CHECKPOINT_VERSION = 1
HEADS = ("scale", "ori")


class CheckpointError(Exception):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = (32, 32, 64, 128)
    hidden: int = 128
    mlp_layers: int = 4
    scale_bins: int = SCALE_BINS.count
    orientation_bins: int = ORIENTATION_BINS.count
    temperature: float = 20.0
    # one encoder per head instead of a shared trunk
    separate: bool = False
    # std multiplier for the last layer of each head; 0 gives uniform outputs
    head_init: float = 0.01
    # "pyramid": conv layers start as a steerable derivative pyramid (two
    # channels carry +/- blurred luminance to the next level, the next
    # ``orientations`` take directional derivatives, the rest are small noise);
    # "he": plain He init everywhere
    init: str = "pyramid"
    orientations: int = 16
    init_noise: float = 0.1
    # "all": concatenate the pooled output of every conv layer; "last": only the last
    pool: str = "all"
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.init not in ("pyramid", "he") or self.pool not in ("all", "last"):
            raise ValueError(f"unknown init/pool option {self.init!r}/{self.pool!r}")
        if self.init == "pyramid" and min(self.widths) < self.orientations + 2:
            raise ValueError("pyramid init needs every width >= orientations + 2")

    @property
    def feature_dim(self) -> int:
        return sum(self.widths) if self.pool == "all" else self.widths[-1]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


# -- layers ----------------------------------------------------------------

def conv_forward(x, w, b, stride=2):
    """3x3 convolution with padding 1. ``x``: (N, H, W, C), ``w``: (9*C, F)."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    cols = np.stack([xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
                     for i in range(3) for j in range(3)], axis=3)
    cols = cols.reshape(n * ho * wo, 9 * c)
    out = (cols @ w + b).reshape(n, ho, wo, -1)
    return out, (cols, x.shape, stride)


def conv_backward(dout, w, cache, need_dx=True):
    cols, xshape, stride = cache
    n, h, wd, c = xshape
    _, ho, wo, f = dout.shape
    dflat = dout.reshape(-1, f)
    dw = cols.T @ dflat
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dflat @ w.T).reshape(n, ho, wo, 9, c)
    dxp = np.zeros((n, h + 2, wd + 2, c))
    k = 0
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :], dw, db


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
_BLUR = np.outer([1, 2, 1], [1, 2, 1]).astype(np.float64) / 16.0


def pyramid_filters(cin: int, cout: int, orientations: int, first: bool,
                    rng: np.random.Generator, noise: float) -> np.ndarray:
    """One level of a steerable derivative pyramid in im2col layout ``(9*cin, cout)``.

    Luminance is the RGB mean on the first level and ``ch0 - ch1`` after that.
    """
    lum = np.zeros(cin)
    if first:
        lum[:] = 1.0 / cin
    else:
        lum[0], lum[1] = 1.0, -1.0
    w = np.zeros((3, 3, cin, cout))
    w[:, :, :, 0] = _BLUR[:, :, None] * lum
    w[:, :, :, 1] = -w[:, :, :, 0]
    for k in range(orientations):
        t = 2 * math.pi * k / orientations
        d = math.cos(t) * _SOBEL_X + math.sin(t) * _SOBEL_X.T
        w[:, :, :, 2 + k] = d[:, :, None] * lum
    rest = 2 + orientations
    w[:, :, :, rest:] = rng.normal(0, noise * math.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout - rest))
    return w.reshape(9 * cin, cout)


# -- model -----------------------------------------------------------------

def _encoder_names(prefix, cfg: ModelConfig):
    return [(f"{prefix}.conv{i}.w", f"{prefix}.conv{i}.b") for i in range(len(cfg.widths))]


def _head_names(head, cfg: ModelConfig):
    return [(f"{head}.fc{i}.w", f"{head}.fc{i}.b") for i in range(cfg.mlp_layers)]


def _encoder_prefix(head, cfg: ModelConfig):
    return f"{head}_enc" if cfg.separate else "enc"


class EstimatorModel:
    """Parameters live in an ordered name -> array dict.

    ``buffers`` hold the fixed feature normalization (per-encoder mean and
    std of the pooled features); they are set by :meth:`calibrate` and never
    receive gradients.
    """

    def __init__(self, cfg: ModelConfig | None = None, params: dict | None = None,
                 buffers: dict | None = None):
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else self._init_params()
        if buffers is None:
            buffers = {}
            for prefix in self._prefixes():
                buffers[f"{prefix}.feat_mu"] = np.zeros(self.cfg.feature_dim)
                buffers[f"{prefix}.feat_sd"] = np.ones(self.cfg.feature_dim)
        self.buffers = buffers

    def _prefixes(self):
        return [f"{h}_enc" for h in HEADS] if self.cfg.separate else ["enc"]

    def _init_params(self) -> dict:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        params = {}
        for prefix in self._prefixes():
            cin = 3
            for li, ((wn, bn), cout) in enumerate(zip(_encoder_names(prefix, cfg), cfg.widths)):
                if cfg.init == "pyramid":
                    params[wn] = pyramid_filters(cin, cout, cfg.orientations, li == 0,
                                                 rng, cfg.init_noise)
                else:
                    params[wn] = rng.normal(0, math.sqrt(2.0 / (9 * cin)), (9 * cin, cout))
                params[bn] = np.zeros(cout)
                cin = cout
        for head, bins in zip(HEADS, (cfg.scale_bins, cfg.orientation_bins)):
            dims = [cfg.feature_dim] + [cfg.hidden] * (cfg.mlp_layers - 1) + [bins]
            for li, (wn, bn) in enumerate(_head_names(head, cfg)):
                std = math.sqrt(2.0 / dims[li])
                if li == cfg.mlp_layers - 1:
                    std *= cfg.head_init
                params[wn] = rng.normal(0, 1, (dims[li], dims[li + 1])) * std
                params[bn] = np.zeros(dims[li + 1])
        return params

    def calibrate(self, patches) -> None:
        """Data-dependent init on a sample of training ``patches``.

        Each conv layer is scaled (weights and bias together, which ReLU
        layers pass through unchanged) so its pooled outputs have median std
        1, then the pooled features are standardized by fixed buffers. The
        std is floored at its median so near-constant features keep a small
        scale instead of being blown up.
        """
        x = self.prepare(patches)
        for prefix in self._prefixes():
            h = x
            for wn, bn in _encoder_names(prefix, self.cfg):
                a = np.maximum(conv_forward(h, self.params[wn], self.params[bn])[0], 0.0)
                sd = np.median(a.mean(axis=(1, 2)).std(axis=0))
                if sd > 0:
                    self.params[wn] = self.params[wn] / sd
                    self.params[bn] = self.params[bn] / sd
                    a = a / sd
                h = a
            self.buffers[f"{prefix}.feat_mu"] = np.zeros(self.cfg.feature_dim)
            self.buffers[f"{prefix}.feat_sd"] = np.ones(self.cfg.feature_dim)
            feat, _ = self._encode(x, prefix)
            sd = feat.std(axis=0)
            self.buffers[f"{prefix}.feat_mu"] = feat.mean(axis=0)
            self.buffers[f"{prefix}.feat_sd"] = np.maximum(sd, np.median(sd) + 1e-12)

    @property
    def names(self) -> list[str]:
        return list(self.params)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params():
            raise ValueError(f"expected {self.num_params()} parameters, got {vec.size}")
        off = 0
        for name, p in self.params.items():
            self.params[name] = vec[off:off + p.size].reshape(p.shape).copy()
            off += p.size

    def copy(self) -> "EstimatorModel":
        return EstimatorModel(self.cfg, {k: v.copy() for k, v in self.params.items()},
                              {k: v.copy() for k, v in self.buffers.items()})

    # forward / backward

    @staticmethod
    def prepare(patches) -> np.ndarray:
        """(N, 3, H, W) patches in [0, 1] to centered NHWC float64."""
        x = np.asarray(patches, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) patches, got {x.shape}")
        return x.transpose(0, 2, 3, 1) - 0.5

    def _encode(self, x, prefix):
        caches, pooled = [], []
        for wn, bn in _encoder_names(prefix, self.cfg):
            z, cc = conv_forward(x, self.params[wn], self.params[bn])
            x = np.maximum(z, 0.0)
            caches.append((cc, z))
            pooled.append(x.mean(axis=(1, 2)))
        if self.cfg.pool == "last":
            pooled = pooled[-1:]
        feat = np.concatenate(pooled, axis=1)
        feat = (feat - self.buffers[f"{prefix}.feat_mu"]) / self.buffers[f"{prefix}.feat_sd"]
        return feat, caches

    def _encode_backward(self, dfeat, caches, prefix, grads):
        names = _encoder_names(prefix, self.cfg)
        dfeat = dfeat / self.buffers[f"{prefix}.feat_sd"]
        # split the feature gradient back onto the pooled layers
        splits = {}
        if self.cfg.pool == "all":
            off = 0
            for li, wd in enumerate(self.cfg.widths):
                splits[li] = dfeat[:, off:off + wd]
                off += wd
        else:
            splits[len(names) - 1] = dfeat
        dx = 0.0
        for li in range(len(names) - 1, -1, -1):
            wn, bn = names[li]
            cc, z = caches[li]
            if li in splits:
                _, h, w, _ = z.shape
                dx = dx + splits[li][:, None, None, :] / (h * w)
            dz = dx * (z > 0)
            dx, dw, db = conv_backward(dz, self.params[wn], cc, need_dx=li > 0)
            grads[wn] = grads.get(wn, 0) + dw
            grads[bn] = grads.get(bn, 0) + db

    def _head(self, feat, head):
        caches = []
        x = feat
        names = _head_names(head, self.cfg)
        for li, (wn, bn) in enumerate(names):
            z = x @ self.params[wn] + self.params[bn]
            caches.append((x, z))
            x = np.maximum(z, 0.0) if li < len(names) - 1 else z
        return softmax(self.cfg.temperature * x), caches

    def _head_backward(self, h, dh, caches, head, grads):
        # softmax(tau * z): dz = tau * h * (dh - <h, dh>)
        dz = self.cfg.temperature * h * (dh - (h * dh).sum(axis=-1, keepdims=True))
        names = _head_names(head, self.cfg)
        for li in range(len(names) - 1, -1, -1):
            wn, bn = names[li]
            x, z = caches[li]
            if li < len(names) - 1:
                dz = dz * (z > 0)
            grads[wn] = x.T @ dz
            grads[bn] = dz.sum(axis=0)
            dz = dz @ self.params[wn].T
        return dz

    def forward_batch(self, x):
        """Histograms for prepared input ``x``; returns ``(h_s, h_o, cache)``."""
        feats = {}
        enc_cache = {}
        for head in HEADS:
            prefix = _encoder_prefix(head, self.cfg)
            if prefix not in feats:
                feats[prefix], enc_cache[prefix] = self._encode(x, prefix)
        hs, cs = self._head(feats[_encoder_prefix("scale", self.cfg)], "scale")
        ho, co = self._head(feats[_encoder_prefix("ori", self.cfg)], "ori")
        return hs, ho, (enc_cache, cs, co)

    def backward_batch(self, hs, ho, dhs, dho, cache) -> dict:
        enc_cache, cs, co = cache
        grads: dict = {}
        dfeat = {}
        for head, h, dh, c in (("scale", hs, dhs, cs), ("ori", ho, dho, co)):
            d = self._head_backward(h, dh, c, head, grads)
            prefix = _encoder_prefix(head, self.cfg)
            dfeat[prefix] = dfeat.get(prefix, 0) + d
        for prefix, d in dfeat.items():
            self._encode_backward(d, enc_cache[prefix], prefix, grads)
        return {k: grads[k] for k in self.params}

    def predict(self, patches):
        """Scale and orientation histograms, ``(N, 13)`` and ``(N, 36)``."""
        hs, ho, _ = self.forward_batch(self.prepare(patches))
        return hs, ho

    def forward(self, patch) -> tuple[PoseHistogram, PoseHistogram]:
        hs, ho = self.predict(np.asarray(patch)[None] if np.ndim(patch) == 3 else patch)
        return (PoseHistogram(SCALE_BINS, hs[0]), PoseHistogram(ORIENTATION_BINS, ho[0]))

    def pair_loss(self, xa, xb, ds, do):
        """Mean symmetric loss (scale + orientation) over a batch of pairs."""
        n = len(ds)
        hs, ho, _ = self.forward_batch(np.concatenate([xa, xb]))
        ls = symmetric_loss(hs[:n], hs[n:], ds, Axis.SCALE)
        lo = symmetric_loss(ho[:n], ho[n:], do, Axis.ORIENTATION)
        return float(np.mean(ls + lo))

    def loss_and_grads(self, xa, xb, ds, do):
        """Mean symmetric loss and its exact gradient for a batch of pairs.

        ``xa``/``xb`` are prepared inputs of the first and second patches;
        ``ds``/``do`` the relative poses from ``xa`` to ``xb``.
        """
        n = len(ds)
        hs, ho, cache = self.forward_batch(np.concatenate([xa, xb]))
        ls = symmetric_loss(hs[:n], hs[n:], ds, Axis.SCALE)
        lo = symmetric_loss(ho[:n], ho[n:], do, Axis.ORIENTATION)
        gsa, gsb = loss_gradients(hs[:n], hs[n:], ds, Axis.SCALE)
        goa, gob = loss_gradients(ho[:n], ho[n:], do, Axis.ORIENTATION)
        dhs = np.concatenate([gsa, gsb]) / n
        dho = np.concatenate([goa, gob]) / n
        grads = self.backward_batch(hs, ho, dhs, dho, cache)
        return float(np.mean(ls + lo)), grads


def backward(model: EstimatorModel, patch_a, patch_b, ds, do):
    """Loss and parameter gradients for pair(s) of raw ``(3, H, W)`` patches."""
    xa = model.prepare(patch_a)
    xb = model.prepare(patch_b)
    return model.loss_and_grads(xa, xb, np.atleast_1d(ds).astype(float),
                                np.atleast_1d(do).astype(float))


# -- optimisation ----------------------------------------------------------

@dataclass
class SGD:
    lr: float = 3.0
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)
    step_count: int = 0

    def step(self, model: EstimatorModel, grads: dict, lr: float | None = None) -> None:
        """``v <- mu * v + g``; ``p <- p - lr * v``. Refuses non-finite gradients."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in {name} at step {self.step_count}")
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = np.asarray(g, dtype=np.float64).copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            model.params[name] = model.params[name] - lr * v
        self.step_count += 1

    def flat_velocity(self, model: EstimatorModel) -> np.ndarray:
        return np.concatenate([self.velocity.get(k, np.zeros_like(p)).ravel()
                               for k, p in model.params.items()])


def sgd_step(model: EstimatorModel, grads: dict, opt: SGD) -> EstimatorModel:
    opt.step(model, grads)
    return model


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 3.0
    momentum: float = 0.9
    temperature: float = 20.0
    epochs: int = 10
    seed: int = 0
    # save a checkpoint every this many epochs (0: never)
    checkpoint_interval: int = 0
    # rescale the whole gradient to at most this L2 norm (0: off)
    clip_norm: float = 0.0
    # number of training patches used for the data-dependent init (0: skip)
    calibrate: int = 512
    # wall-clock budget in seconds; training stops after the epoch that crosses it
    time_limit: float = 0.0

    def __post_init__(self):
        if self.batch_size <= 0 or self.lr <= 0 or self.epochs <= 0 or self.temperature <= 0:
            raise ValueError("batch size, lr, epochs and temperature must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.clip_norm < 0 or self.calibrate < 0 or self.checkpoint_interval < 0:
            raise ValueError("clip_norm, calibrate and checkpoint_interval must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainResult:
    model: EstimatorModel
    history: list
    optimizer: SGD
    best_epoch: int


def clip_gradients(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads, norm


def train(model: EstimatorModel, dataset, cfg: TrainConfig, val=None,
          callbacks: Sequence[Callable[[dict, EstimatorModel, SGD], None]] = (),
          optimizer: SGD | None = None, checkpoint_path=None) -> TrainResult:
    """Minibatch SGD on the symmetric alignment losses.

    Records mean training loss per epoch and, when ``val`` is given, the
    validation accuracies; returns a copy of the best-validation model
    (lowest training loss without ``val``).
    """
    from .evaluation import ORIENTATION_THRESHOLDS, SCALE_THRESHOLDS, accuracy, predict_pairs

    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if cfg.temperature != model.cfg.temperature:
        raise ValueError(f"train temperature {cfg.temperature} differs from the "
                         f"model's {model.cfg.temperature}")
    a_all, b_all, ds_all, do_all = dataset.arrays()
    patches = dataset.patches
    opt = optimizer or SGD(cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    if cfg.calibrate and opt.step_count == 0:
        used = np.unique(np.concatenate([a_all, b_all]))
        pick = rng.choice(used, size=min(cfg.calibrate, len(used)), replace=False)
        model.calibrate(patches[np.sort(pick)])
    n = len(ds_all)
    s_key = f"{SCALE_THRESHOLDS[1]:.6f}"
    o_key = f"{ORIENTATION_THRESHOLDS[1]:.6f}"
    history = []
    best, best_score, best_epoch = model.copy(), -math.inf, 0
    start = time.monotonic()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xa = model.prepare(patches[a_all[idx]])
            xb = model.prepare(patches[b_all[idx]])
            loss, grads = model.loss_and_grads(xa, xb, ds_all[idx], do_all[idx])
            grads, _ = clip_gradients(grads, cfg.clip_norm)
            opt.step(model, grads)
            losses.append(loss)
        rec = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "first_loss": losses[0],
               "last_loss": losses[-1], "seconds": time.monotonic() - start}
        if val is not None and len(val):
            acc = accuracy(predict_pairs(model, val))
            rec["val_scale"] = acc["scale"][s_key]
            rec["val_orientation"] = acc["orientation"][o_key]
            score = rec["val_scale"] + rec["val_orientation"]
        else:
            score = -rec["loss"]
        if score > best_score:
            best, best_score, best_epoch = model.copy(), score, epoch + 1
        history.append(rec)
        log.info("epoch %d %s", epoch + 1, json.dumps(rec))
        if checkpoint_path and cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, model, opt, cfg, rng.bit_generator.state,
                            {"epoch": epoch + 1})
        for cb in callbacks:
            cb(rec, model, opt)
        if cfg.time_limit and time.monotonic() - start > cfg.time_limit:
            log.info("time limit reached after epoch %d", epoch + 1)
            break
    return TrainResult(best, history, opt, best_epoch)


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: EstimatorModel, opt: SGD | None = None,
                    train_cfg: TrainConfig | None = None, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """``PPCK`` | u32 version | u32 len + JSON | u64 n + f64[n] params |
    u64 m + f64[m] momentum | u32 CRC32 of everything before it."""
    meta = {
        "model": asdict(model.cfg),
        "train": asdict(train_cfg) if train_cfg else None,
        "names": model.names,
        "shapes": [list(p.shape) for p in model.params.values()],
        "buffers": {k: v.tolist() for k, v in model.buffers.items()},
        "step": opt.step_count if opt else 0,
        "rng": rng_state,
        "extra": extra or {},
    }
    blob = json.dumps(meta).encode("utf-8")
    params = model.flat().astype("<f8")
    vel = opt.flat_velocity(model).astype("<f8") if opt and opt.velocity else np.zeros(0, "<f8")
    body = b"".join([
        CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(blob)), blob,
        struct.pack("<Q", params.size), params.tobytes(),
        struct.pack("<Q", vel.size), vel.tobytes(),
    ])
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    """Returns ``(model, optimizer, meta)``."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    try:
        (jlen,) = struct.unpack_from("<I", data, 8)
        off = 12
        meta = json.loads(data[off:off + jlen].decode("utf-8"))
        off += jlen
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + 8 * n > len(body):
            raise CheckpointError("checkpoint is truncated")
        params = np.frombuffer(data, "<f8", n, off).astype(np.float64)
        off += 8 * n
        (m,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + 8 * m != len(body):
            raise CheckpointError("checkpoint is truncated")
        vel = np.frombuffer(data, "<f8", m, off).astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"checkpoint is truncated or malformed: {exc}") from exc
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    model = EstimatorModel(ModelConfig.from_dict(meta["model"]))
    if model.names != meta["names"]:
        raise CheckpointError("parameter layout does not match the model config")
    model.load_flat(params)
    model.buffers = {k: np.array(v, dtype=np.float64) for k, v in meta["buffers"].items()}
    train_cfg = TrainConfig.from_dict(meta["train"]) if meta.get("train") else None
    opt = SGD(train_cfg.lr if train_cfg else 3.0, train_cfg.momentum if train_cfg else 0.9)
    opt.step_count = int(meta.get("step", 0))
    if m:
        tmp = model.copy()
        tmp.load_flat(vel)
        opt.velocity = dict(tmp.params)
    return model, opt, meta
