"""LocUNet: input encoding, encoder-decoder with CoM readout, training,
the heatmap-regression baseline and the ablation matrix.

Positions inside the net are in pixel coordinates ``1..g``; reported AEDs
are in meters.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import checkpoint
from .autodiff.ops import DegenerateHeatmapError
from .grid import LinkBudget, Position, pixel_index, to_gray

# Published LocUNet architecture per layer: (resolution factor vs 256, channels,
# filter) for the input and encoder layers 1..14, then the filters of the
# decoder convolutions 15..28.
PUBLISHED_ENCODER = (
    (1, None, 3),
    (1, 20, 5),
    (2, 50, 5),
    (4, 60, 5),
    (4, 70, 5),
    (8, 90, 5),
    (8, 100, 5),
    (16, 120, 3),
    (16, 120, 5),
    (16, 135, 5),
    (32, 150, 5),
    (32, 225, 5),
    (64, 300, 5),
    (64, 400, 5),
    (128, 500, 4),
)
PUBLISHED_DECODER_FILTERS = (5, 4, 5, 4, 5, 3, 6, 5, 6, 5, 6, 6, 5, 5)  # layers 15..28
PUBLISHED_GRID = 256


class Activation(str, enum.Enum):
    LEAKY_RELU = "leaky-relu"
    RELU = "relu"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


class Loss(str, enum.Enum):
    AED = "AED"
    ASED = "ASED"


# --------------------------------------------------------------------------
# inputs


@dataclass(frozen=True)
class InputEncoding:
    use_city: bool = True
    use_tx_onehot: bool = True

    def n_channels(self, n_bs: int) -> int:
        return 2 * n_bs + int(self.use_city) + n_bs * int(self.use_tx_onehot)

    @property
    def label(self) -> str:
        return f"{'wC' if self.use_city else 'w/oC'} {'wT' if self.use_tx_onehot else 'w/oT'}"


def area_downsample(img: np.ndarray, grid: int) -> np.ndarray:
    """Block-average a square image down to ``grid`` pixels per side."""
    n = img.shape[-1]
    if n == grid:
        return img
    if n % grid:
        raise ValueError(f"cannot area-average {n} px down to {grid}")
    f = n // grid
    return img.reshape(*img.shape[:-2], grid, f, grid, f).mean(axis=(-3, -1))


def _tx_pixel(p: Position, scale: float, grid: int, free: np.ndarray) -> tuple[tuple[int, int], bool]:
    """Row/col of a BS on the net grid; off-grid or blocked BSs snap to the nearest free pixel."""
    r, c = pixel_index(Position((p.x - 0.5) / scale + 0.5, (p.y - 0.5) / scale + 0.5))
    if 0 <= r < grid and 0 <= c < grid and free[r, c]:
        return (r, c), False
    rr, cc = np.nonzero(free)
    if len(rr) == 0:
        rr, cc = np.indices((grid, grid)).reshape(2, -1)
    k = int(np.argmin((rr - r) ** 2 + (cc - c) ** 2))
    return (int(rr[k]), int(cc[k])), True


def encode_inputs(instance, enc: InputEncoding, budget: LinkBudget, grid: int | None = None,
                  dtype=np.float32) -> np.ndarray:
    """``(C, g, g)`` input image stack for one instance.

    Channels: constant gray of each measured pathloss, gray estimated radio
    maps, optional binary city (building = 1), optional BS one-hots; BSs in
    the dataset's canonical order.
    """
    n = instance.spec.size_px
    grid = grid or n
    J = len(instance.bs_ids)
    out = np.empty((enc.n_channels(J), grid, grid), dtype)
    gray_p = np.clip(to_gray(np.asarray(instance.measured_pl, float), budget), 0.0, 1.0)
    out[:J] = gray_p[:, None, None]
    out[J:2 * J] = area_downsample(np.clip(to_gray(instance.est_pl, budget), 0.0, 1.0), grid)
    ch = 2 * J
    buildings = area_downsample(instance.city.astype(float), grid)
    if enc.use_city:
        out[ch] = buildings >= 0.5
        ch += 1
    if enc.use_tx_onehot:
        out[ch:] = 0.0
        free = buildings < 0.5
        for j, p in enumerate(instance.bs_positions):
            (r, c), snapped = _tx_pixel(p, n / grid, grid, free)
            if snapped:
                warnings.warn(f"instance {instance.instance_id}: BS {instance.bs_ids[j]} snapped to a free pixel")
            out[ch + j, r, c] = 1.0
    return out


def truth_px(instance, grid: int | None = None) -> np.ndarray:
    """UE truth in net pixel coordinates."""
    n = instance.spec.size_px
    s = n / (grid or n)
    return np.array([(instance.truth.x - 0.5) / s + 0.5, (instance.truth.y - 0.5) / s + 0.5])


class EncodedSet:
    """Instances with inputs encoded once, shared per deployment."""

    def __init__(self, instances: Sequence, enc: InputEncoding, budget: LinkBudget, grid: int | None = None,
                 dtype=np.float32):
        self.instances = list(instances)
        if not self.instances:
            raise ValueError("empty instance set")
        self.enc, self.budget = enc, budget
        self.grid = grid or self.instances[0].spec.size_px
        self.dtype = dtype
        self.J = len(self.instances[0].bs_ids)
        self.pixel_len_m = self.instances[0].spec.pixel_len_m * self.instances[0].spec.size_px / self.grid
        self._static: dict = {}
        self._keys = []
        for inst in self.instances:
            key = (inst.map_id, inst.deployment_id)
            if key not in self._static:
                x = encode_inputs(inst, enc, budget, self.grid, dtype)
                self._static[key] = x
            self._keys.append(key)
        self._gray = np.stack([np.clip(to_gray(np.asarray(i.measured_pl, float), budget), 0, 1) for i in self.instances])
        self.truth = np.stack([truth_px(i, self.grid) for i in self.instances])

    def __len__(self) -> int:
        return len(self.instances)

    def batch(self, idx) -> np.ndarray:
        J = self.J
        xs = np.stack([self._static[self._keys[i]] for i in idx])
        xs[:, :J] = self._gray[idx][:, :, None, None].astype(self.dtype)
        return xs


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    in_ch: int
    grid: int = 64
    widths: tuple[int, ...] = ()  # encoder layers 1..L
    down: tuple[bool, ...] = ()  # whether layer k is half the resolution of layer k-1
    enc_filters: tuple[int, ...] = ()  # filter of the conv producing layer k (k = 1..L)
    dec_filters: tuple[int, ...] = ()  # filter of the decoder conv feeding skip k (k = 1..L-1)
    head_filters: tuple[int, int] = (5, 5)
    final_activation: str = Activation.LEAKY_RELU.value
    skip: bool = True
    negative_slope: float = 0.2
    head_bias: float = 0.0  # initial bias of the last conv

    def __post_init__(self):
        L = len(self.widths)
        if L < 1:
            raise ValueError("at least one encoder layer")
        if not (len(self.down) == len(self.enc_filters) == L and len(self.dec_filters) == L - 1):
            raise ValueError("inconsistent layer tables")
        if self.grid % (2 ** sum(self.down)):
            raise ValueError(f"grid {self.grid} not divisible by 2^{sum(self.down)}")
        if self.final_activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.final_activation!r}")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        for k in ("widths", "down", "enc_filters", "dec_filters", "head_filters"):
            d[k] = tuple(d[k])
        return cls(**d)


def published_config(in_ch: int, grid: int = 64, width_div: int = 5, min_res_px: int = 2,
                     final_activation: str = "leaky-relu", head_bias: float = 0.0) -> NetConfig:
    """Published architecture scaled to ``grid``: widths divided by ``width_div`` (rounded up),
    encoder truncated to the layers whose resolution is at least ``min_res_px``.

    ``published_config(16, 256, 1, 2)`` is the full-size architecture.
    """
    widths, down, ef = [], [], []
    prev = 1
    for k in range(1, len(PUBLISHED_ENCODER)):
        fac, ch, _ = PUBLISHED_ENCODER[k]
        if grid % fac or grid // fac < min_res_px:
            break
        widths.append(math.ceil(ch / width_div))
        down.append(fac != prev)
        ef.append(PUBLISHED_ENCODER[k - 1][2])
        prev = fac
    L = len(widths)
    # the decoder conv feeding skip k is table layer 27 - k (14 is the last encoder filter)
    all_filters = {15 + i: f for i, f in enumerate(PUBLISHED_DECODER_FILTERS)}
    all_filters[14] = PUBLISHED_ENCODER[14][2]
    dec = tuple(all_filters[27 - k] for k in range(1, L))
    return NetConfig(
        in_ch=in_ch, grid=grid, widths=tuple(widths), down=tuple(down), enc_filters=tuple(ef),
        dec_filters=dec, head_filters=(all_filters[27], all_filters[28]), final_activation=final_activation,
        head_bias=head_bias,
    )


class LocUNet:
    """Encoder-decoder with skip connections and a CoM readout."""

    def __init__(self, cfg: NetConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng([seed, 7])
        s = cfg.negative_slope
        self.enc = []
        c_in = cfg.in_ch
        for k, (w, f) in enumerate(zip(cfg.widths, cfg.enc_filters), start=1):
            self.enc.append(ad.Conv2d(c_in, w, f, rng, s, dtype, name=f"enc{k}"))
            c_in = w
        self.dec = []
        L = cfg.depth
        for k in range(L - 1, 0, -1):
            self.dec.append(ad.Conv2d(c_in, cfg.widths[k - 1], cfg.dec_filters[k - 1], rng, s, dtype, name=f"dec{k}"))
            c_in = cfg.widths[k - 1] + (cfg.widths[k - 1] if cfg.skip else 0)
            if k == 1:
                c_in += cfg.in_ch
        if L == 1:
            c_in = cfg.widths[0] + cfg.in_ch
        self.head1 = ad.Conv2d(c_in, cfg.widths[0], cfg.head_filters[0], rng, s, dtype, name="head1")
        self.head2 = ad.Conv2d(cfg.widths[0] + cfg.in_ch, 1, cfg.head_filters[1], rng, s, dtype, name="head2")
        self.head2.bias.data[:] = cfg.head_bias

    # -- parameters -----------------------------------------------------------
    def layers(self) -> list[ad.Conv2d]:
        return [*self.enc, *self.dec, self.head1, self.head2]

    def parameters(self) -> list[ad.Tensor]:
        return [p for l in self.layers() for p in l.parameters()]

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for l in self.layers():
            out.update(l.named_parameters())
        return out

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(named) != set(state):
            raise ValueError("state dict keys do not match the network")
        for k, t in named.items():
            if state[k].shape != t.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.data.shape}")
            t.data = np.array(state[k], dtype=self.dtype)

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(checkpoint.load(path))

    # -- forward ----------------------------------------------------------------
    def heatmap(self, x) -> ad.Tensor:
        """Quasi-heatmap ``(N, 1, g, g)`` before the final activation."""
        cfg = self.cfg
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(np.asarray(x, self.dtype))
        if x.shape[1:] != (cfg.in_ch, cfg.grid, cfg.grid):
            raise ValueError(f"input shape {x.shape[1:]} != {(cfg.in_ch, cfg.grid, cfg.grid)}")
        act = lambda t: ad.leaky_relu(t, cfg.negative_slope)
        skips = []
        h = x
        for k, conv in enumerate(self.enc, start=1):
            h = act(conv(h))
            if cfg.down[k - 1]:
                h = ad.avgpool2(h)
            skips.append(h)
        L = cfg.depth
        for conv, k in zip(self.dec, range(L - 1, 0, -1)):
            h = act(conv(h))
            if cfg.down[k]:
                h = ad.upsample2(h)
            parts = [h, skips[k - 1]] if cfg.skip else [h]
            if k == 1:
                parts.append(x)
            h = ad.concat(parts)
        if L == 1:
            h = ad.concat([h, x])
        h = act(self.head1(h))
        return self.head2(ad.concat([h, x]))

    def forward(self, x, skip_degenerate: bool = False):
        """(activated heatmap, CoM estimate ``(N, 2)`` in pixels[, valid mask])."""
        H = ad.ACTIVATIONS[self.cfg.final_activation](self.heatmap(x))
        if skip_degenerate:
            est, valid = ad.com_readout(H, skip_degenerate=True)
            return H, est, valid
        return H, ad.com_readout(H)

    def predict(self, x, batch: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Pixel estimates and a validity mask (False for degenerate heatmaps)."""
        x = np.asarray(x)
        est, ok = [], []
        params = self.parameters()
        for p in params:  # inference only: build no tape
            p.requires_grad = False
        try:
            for i in range(0, len(x), batch):
                _, e, v = self.forward(ad.Tensor(x[i:i + batch].astype(self.dtype)), skip_degenerate=True)
                est.append(e.data.astype(float))
                ok.append(v)
        finally:
            for p in params:
                p.requires_grad = True
        return np.concatenate(est), np.concatenate(ok)


def heatmap_parts(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positive and negative parts of a quasi-heatmap, each scaled to sum 1
    (all-zero when that part is empty)."""
    H = np.asarray(H, float)
    pos = np.maximum(H, 0.0)
    neg = np.maximum(-H, 0.0)
    sp, sn = pos.sum(), neg.sum()
    return (pos / sp if sp > 0 else pos), (neg / sn if sn > 0 else neg)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    loss: str = Loss.AED.value
    lr: float = 1e-5
    lr_drop_factor: float = 10.0
    lr_drop_epoch: int = 30
    epochs: int = 50
    batch: int = 15
    seed: int = 0
    warmup_epochs: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.loss not in (Loss.AED.value, Loss.ASED.value):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch < 1 or not self.lr > 0:
            raise ValueError("epochs, batch and lr must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr / self.lr_drop_factor if epoch >= self.lr_drop_epoch else self.lr

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    log: list[dict]  # epoch, train_loss, val_aed (m)
    best_epoch: int
    best_val_aed_m: float
    centroid_aed_m: float
    diverged: bool
    non_finite: bool
    degenerate_elements: int
    degenerate_batches: int
    batches: int
    seconds: float
    init: str = "fan-in uniform (He bound for leaky ReLU 0.2), zero bias"

    @property
    def converged(self) -> bool:
        """False for the "n.c." outcome: non-finite loss or no better than the centroid."""
        return not self.non_finite and math.isfinite(self.best_val_aed_m) and self.best_val_aed_m < self.centroid_aed_m

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_aed"])
        for row in self.log:
            w.writerow([row["epoch"], repr(float(row["train_loss"])), repr(float(row["val_aed"]))])
        return buf.getvalue()


def centroid_aed_m(data: EncodedSet, center_px: np.ndarray | None = None) -> float:
    """AED of always predicting the map center (the UE box centroid)."""
    c = np.full(2, (data.grid + 1) / 2.0) if center_px is None else np.asarray(center_px, float)
    return float(np.linalg.norm(data.truth - c, axis=1).mean() * data.pixel_len_m)


def evaluate_net(net: LocUNet, data: EncodedSet, batch: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance errors in meters (NaN where the heatmap was degenerate) and the valid mask."""
    est = np.empty((len(data), 2))
    ok = np.empty(len(data), bool)
    for i in range(0, len(data), batch):
        idx = np.arange(i, min(i + batch, len(data)))
        e, v = net.predict(data.batch(idx), batch)
        est[idx], ok[idx] = e, v
    err = np.linalg.norm(est - data.truth, axis=1) * data.pixel_len_m
    err[~ok] = np.nan
    return err, ok


def _val_aed(net, data) -> float:
    err, ok = evaluate_net(net, data)
    return float(err[ok].mean()) if ok.any() else math.inf


def train(net: LocUNet, train_set: EncodedSet, val_set: EncodedSet, tc: TrainConfig, log_fn=None) -> TrainResult:
    """Minibatch Adam on the AED or ASED of the CoM estimate.

    Keeps the parameters of the epoch with the lowest validation AED (also
    for ASED training).  Degenerate heatmaps are dropped from their batch.
    """
    t0 = time.perf_counter()
    opt = ad.Adam(net.parameters(), lr=tc.lr)
    loss_fn = ad.aed_loss if tc.loss == Loss.AED.value else ad.ased_loss
    base = centroid_aed_m(val_set)
    best_state, best_val, best_epoch = net.state_dict(), _val_aed(net, val_set), -1
    log, diverged, non_finite = [], False, False
    deg_el = deg_b = n_b = 0
    for epoch in range(tc.epochs):
        opt.lr = tc.lr_at(epoch)
        perm = np.random.default_rng([tc.seed, epoch]).permutation(len(train_set))
        tot, cnt = 0.0, 0
        for i in range(0, len(perm), tc.batch):
            idx = perm[i:i + tc.batch]
            n_b += 1
            _, est, valid = net.forward(ad.Tensor(train_set.batch(idx)), skip_degenerate=True)
            if not valid.all():
                deg_b += 1
                deg_el += int((~valid).sum())
                if not valid.any():
                    continue
            loss = loss_fn(est, train_set.truth[idx], mask=valid)
            if not np.isfinite(loss.data):
                non_finite = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss.data) * int(valid.sum())
            cnt += int(valid.sum())
        if non_finite:
            break
        val = _val_aed(net, val_set)
        row = {"epoch": epoch + 1, "train_loss": tot / max(cnt, 1), "val_aed": val}
        log.append(row)
        if log_fn:
            log_fn(row)
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch + 1, net.state_dict()
        if epoch + 1 >= tc.warmup_epochs and val > 2.0 * base:
            diverged = True
    net.load_state_dict(best_state)
    return TrainResult(log, best_epoch, best_val, base, diverged, non_finite, deg_el, deg_b, n_b,
                       time.perf_counter() - t0)


# --------------------------------------------------------------------------
# heatmap regression baseline


def gaussian_target(truth_px: np.ndarray, grid: int, sigma_px: float) -> np.ndarray:
    """``(N, 1, g, g)`` Gaussian bumps at the truths, each summing to 1.

    Below ``sigma_px = 1e-3`` the bump is a one-hot at the nearest pixel.
    """
    if not sigma_px > 0:
        raise ValueError("sigma_px must be > 0")
    t = np.asarray(truth_px, float).reshape(-1, 2)
    r = np.arange(1, grid + 1, dtype=float)
    out = np.zeros((len(t), 1, grid, grid))
    for n, (x, y) in enumerate(t):
        if sigma_px < 1e-3:
            c = int(np.clip(round(x), 1, grid)) - 1
            rr = int(np.clip(round(y), 1, grid)) - 1
            out[n, 0, rr, c] = 1.0
            continue
        gx = np.exp(-0.5 * ((r - x) / sigma_px) ** 2)
        gy = np.exp(-0.5 * ((r - y) / sigma_px) ** 2)
        g = gy[:, None] * gx[None, :]
        out[n, 0] = g / g.sum()
    return out


def argmax_readout(H: np.ndarray) -> np.ndarray:
    """``(N, 2)`` pixel coordinates of each heatmap's maximum (first in row-major order)."""
    H = np.asarray(H)
    N, _, h, w = H.shape
    k = H.reshape(N, -1).argmax(axis=1)
    return np.stack([k % w + 1, k // w + 1], axis=1).astype(float)


def train_heatmap(net: LocUNet, train_set: EncodedSet, tc: TrainConfig, sigma_px: float) -> list[float]:
    """Fit softmax heatmaps to Gaussian targets by MSE; returns per-epoch loss.

    Both heatmaps are scaled by ``g^2`` so a uniform map has value 1; the
    optimum is unchanged and the gradients stay well above Adam's epsilon.
    """
    g = train_set.grid
    opt = ad.Adam(net.parameters(), lr=tc.lr)
    losses = []
    for epoch in range(tc.epochs):
        opt.lr = tc.lr_at(epoch)
        perm = np.random.default_rng([tc.seed, epoch]).permutation(len(train_set))
        tot = 0.0
        for i in range(0, len(perm), tc.batch):
            idx = perm[i:i + tc.batch]
            P = ad.softmax2d(net.heatmap(ad.Tensor(train_set.batch(idx))))
            target = gaussian_target(train_set.truth[idx], g, sigma_px) * (g * g)
            loss = ad.mse_loss(P * float(g * g), target.astype(P.data.dtype))
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss.data) * len(idx)
        losses.append(tot / len(train_set))
    return losses


def heatmap_predict(net: LocUNet, data: EncodedSet, inference: str, batch: int = 32) -> np.ndarray:
    if inference not in ("argmax", "com"):
        raise ValueError(f"unknown inference {inference!r}")
    est = []
    for i in range(0, len(data), batch):
        P = ad.softmax2d(net.heatmap(ad.Tensor(data.batch(np.arange(i, min(i + batch, len(data)))))))
        est.append(argmax_readout(P.data) if inference == "argmax" else ad.com_readout(P).data.astype(float))
    return np.concatenate(est)


def heatmap_regression_baseline(net: LocUNet, train_set: EncodedSet, eval_set: EncodedSet, tc: TrainConfig,
                                sigma_px: float) -> dict:
    """Train on Gaussian heatmaps, then report AED (m) for argmax and CoM inference."""
    losses = train_heatmap(net, train_set, tc, sigma_px)
    out = {"sigma_px": sigma_px, "train_loss": losses}
    for inf in ("argmax", "com"):
        est = heatmap_predict(net, eval_set, inf)
        out[f"aed_{inf}_m"] = float(np.linalg.norm(est - eval_set.truth, axis=1).mean() * eval_set.pixel_len_m)
    return out


def sigma_sweep(net_factory, train_set: EncodedSet, eval_set: EncodedSet, tc: TrainConfig,
                sigmas: Sequence[float] = (1, 2, 4, 8, 16), spatial_aed_m: float | None = None) -> list[dict]:
    """AED vs sigma rows ``{sigma_px, inference, aed_m}`` plus the spatial-regression constant line.

    ``net_factory()`` returns a fresh net per sigma; when ``spatial_aed_m``
    is None a CoM-readout net is trained with ``tc`` on the same split.
    """
    rows = []
    for s in sigmas:
        r = heatmap_regression_baseline(net_factory(), train_set, eval_set, tc, float(s))
        rows.append({"sigma_px": float(s), "inference": "argmax", "aed_m": r["aed_argmax_m"]})
        rows.append({"sigma_px": float(s), "inference": "com", "aed_m": r["aed_com_m"]})
    if spatial_aed_m is None:
        net = net_factory()
        train(net, train_set, eval_set, tc)
        err, ok = evaluate_net(net, eval_set)
        spatial_aed_m = float(np.nanmean(err)) if ok.any() else math.inf
    for s in sigmas:
        rows.append({"sigma_px": float(s), "inference": "spatial", "aed_m": spatial_aed_m})
    return rows


# --------------------------------------------------------------------------
# ablation matrix

ENCODINGS = (
    InputEncoding(True, True),
    InputEncoding(False, True),
    InputEncoding(True, False),
    InputEncoding(False, False),
)


def _ablation_cell(args) -> dict:
    act, loss, enc, train_insts, val_insts, budget, net_kw, tc = args
    tr = EncodedSet(train_insts, enc, budget)
    va = EncodedSet(val_insts, enc, budget)
    cfg = published_config(enc.n_channels(tr.J), tr.grid, final_activation=act, **net_kw)
    net = LocUNet(cfg, seed=tc.seed)
    res = train(net, tr, va, replace(tc, loss=loss))
    return {
        "activation": act,
        "loss": loss,
        "inputs": enc.label,
        "n_params": net.n_params,
        "val_aed_m": res.best_val_aed_m if res.converged else "n.c.",
        "converged": res.converged,
        "degenerate_batch_frac": res.degenerate_batches / max(res.batches, 1),
        "best_epoch": res.best_epoch,
    }


def ablation_matrix(train_insts, val_insts, budget: LinkBudget, tc: TrainConfig, net_kw: dict | None = None,
                    jobs: int = 1) -> list[dict]:
    """All 4 activations x 2 losses x 4 input sets; non-convergence is recorded as ``"n.c."``."""
    net_kw = net_kw or {}
    cells = [(a.value, l.value, e, train_insts, val_insts, budget, net_kw, tc)
             for a in Activation for l in Loss for e in ENCODINGS]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_ablation_cell, cells))
    return [_ablation_cell(c) for c in cells]


class NetLocalizer:
    """Evaluation adapter: a trained net plus its input encoding."""

    def __init__(self, net: LocUNet, enc: InputEncoding, budget: LinkBudget, name: str = "locnet"):
        self.net, self.enc, self.budget, self.name = net, enc, budget, name

    def localize_batch(self, instances) -> tuple[np.ndarray, np.ndarray]:
        """Estimates in instance pixel coordinates and the validity mask."""
        data = EncodedSet(instances, self.enc, self.budget, self.net.cfg.grid, self.net.dtype)
        est = np.empty((len(data), 2))
        ok = np.empty(len(data), bool)
        for i in range(0, len(data), 32):
            idx = np.arange(i, min(i + 32, len(data)))
            est[idx], ok[idx] = self.net.predict(data.batch(idx))
        s = instances[0].spec.size_px / data.grid
        return (est - 0.5) * s + 0.5, ok

    def localize(self, inst) -> Position:
        est, ok = self.localize_batch([inst])
        if not ok[0]:
            raise DegenerateHeatmapError(f"instance {inst.instance_id}: degenerate heatmap")
        return Position(float(est[0, 0]), float(est[0, 1]))
