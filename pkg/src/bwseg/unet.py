"""3D U-Net, training loop, inference and checkpoints.

Layers and reverse-mode differentiation come from PyTorch. The loss and its
gradient come from :mod:`bwseg.losses` and are fed back into autograd at
the network's logit output, so the boundary-weighted loss is exactly the one
tested there.
"""
from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from . import boundary
from .augment import AugmentConfig, augment_sample, sample_rng
from .losses import LossConfig, composite_loss_logits
from .volgrid import BoldSeries, LabelMap, Volume, crop_or_pad, crop_or_pad_array, normalize_p90

log = logging.getLogger(__name__)


@dataclass
class UNetConfig:
    levels: int = 5
    base_channels: int = 16
    in_channels: int = 1
    bn_momentum: float = 0.9  # running = m * running + (1 - m) * batch
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("a U-Net needs at least 2 levels")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def check_dims(self, dims: Sequence[int]):
        f = 2 ** (self.levels - 1)
        if any(int(d) % f for d in dims):
            raise ValueError(f"input dims {tuple(dims)} must be divisible by {f} for {self.levels} levels")

    def skip_shapes(self, dims: Sequence[int]) -> List[Tuple[int, ...]]:
        """Spatial dims at every level; encoder and upsampled decoder tensors must agree."""
        self.check_dims(dims)
        shapes = [tuple(int(d) for d in dims)]
        for _ in range(self.levels - 1):
            shapes.append(tuple(d // 2 for d in shapes[-1]))
        for lvl in range(self.levels - 2, -1, -1):
            up = tuple(2 * d for d in shapes[lvl + 1])
            assert up == shapes[lvl], (up, shapes[lvl])
        return shapes


def param_count(cfg: UNetConfig) -> int:
    """Trainable parameter count.

    With c_i = base * 2**i and c_in the input channels:

    * encoder level i: 27*in_i*c_i + 27*c_i**2 + 4*c_i, in_0 = c_in, in_i = c_{i-1}
    * decoder level i < L-1: transpose conv 8*c_{i+1}*c_i + c_i, then
      27*2*c_i*c_i + 27*c_i**2 + 4*c_i
    * head: c_0 + 1

    Convolutions followed by batch norm carry no bias; each batch norm adds a
    scale and a shift per channel.
    """
    L, total = cfg.levels, 0
    prev = cfg.in_channels
    for i in range(L):
        c = cfg.channels(i)
        total += 27 * prev * c + 27 * c * c + 4 * c
        prev = c
    for i in range(L - 1):
        c, c_up = cfg.channels(i), cfg.channels(i + 1)
        total += 8 * c_up * c + c
        total += 27 * 2 * c * c + 27 * c * c + 4 * c
    return total + cfg.channels(0) + 1


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, cfg: UNetConfig):
        mom = 1.0 - cfg.bn_momentum
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm3d(cout, cfg.bn_eps, mom), nn.ReLU(),
            nn.Conv3d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm3d(cout, cfg.bn_eps, mom), nn.ReLU(),
        )


class UNet(nn.Module):
    """Contracting path of ``levels`` blocks joined by 2x max pooling, expanding
    path of transpose convolutions with skip concatenation, 1x1x1 logit head."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        L = cfg.levels
        self.down = nn.ModuleList()
        prev = cfg.in_channels
        for i in range(L):
            self.down.append(ConvBlock(prev, cfg.channels(i), cfg))
            prev = cfg.channels(i)
        self.up = nn.ModuleList(nn.ConvTranspose3d(cfg.channels(i + 1), cfg.channels(i), 2, stride=2)
                                for i in range(L - 1))
        self.dec = nn.ModuleList(ConvBlock(2 * cfg.channels(i), cfg.channels(i), cfg) for i in range(L - 1))
        self.head = nn.Conv3d(cfg.channels(0), 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool3d(x, 2)
        for i in range(len(self.up) - 1, -1, -1):
            x = self.up[i](x)
            skip = skips[i]
            assert x.shape[2:] == skip.shape[2:]
            x = self.dec[i](torch.cat([skip, x], dim=1))
        return self.head(x)[:, 0]


def init_params(net: UNet, seed: int, zero_head: bool = False, head_prior: float = 0.5) -> UNet:
    """He-normal initialisation drawn from numpy, so it depends only on ``seed``.

    The head bias starts at ``logit(head_prior)``.
    """
    rng = sample_rng(seed, 99)
    with torch.no_grad():
        for name, mod in net.named_modules():
            if isinstance(mod, nn.ConvTranspose3d):
                fan_in = mod.weight.shape[0]
            elif isinstance(mod, nn.Conv3d):
                fan_in = int(np.prod(mod.weight.shape[1:]))
            else:
                if isinstance(mod, nn.BatchNorm3d):
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
                    mod.reset_running_stats()
                continue
            gain = 1.0 if mod is net.head else 2.0
            w = rng.normal(0.0, np.sqrt(gain / fan_in), tuple(mod.weight.shape))
            mod.weight.copy_(torch.from_numpy(w))
            if mod.bias is not None:
                mod.bias.zero_()
        net.head.bias.fill_(float(np.log(head_prior / (1.0 - head_prior))))
        if zero_head:
            net.head.weight.zero_()
            net.head.bias.zero_()
    return net


def build(cfg: UNetConfig, seed: int = 0, zero_head: bool = False, dtype=torch.float32,
          head_prior: float = 0.5) -> UNet:
    return init_params(UNet(cfg), seed, zero_head, head_prior).to(dtype)


def _as_batch(x, net: UNet) -> torch.Tensor:
    a = np.asarray(x)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[0] < 1:
        raise ValueError(f"expected a batch shaped (B, H, W, D), got {a.shape}")
    net.cfg.check_dims(a.shape[1:])
    dtype = next(net.parameters()).dtype
    return torch.from_numpy(np.array(a, dtype=np.float64)).to(dtype)[:, None]


def forward(net: UNet, x, train: bool = False) -> np.ndarray:
    """Foreground probabilities for a batch ``(B, H, W, D)``; eval mode by default."""
    net.train(train)
    with torch.no_grad():
        z = net(_as_batch(x, net))
    return torch.sigmoid(z.double()).numpy()


def forward_logits(net: UNet, x, train: bool = False) -> np.ndarray:
    net.train(train)
    with torch.no_grad():
        return net(_as_batch(x, net)).double().numpy()


def backward(net: UNet, x, y, loss_cfg: LossConfig, weights=None):
    """One train-mode pass: fills ``.grad`` of every parameter, returns (loss, probabilities).

    The batch loss is the mean of per-sample losses. ``weights`` optionally
    supplies precomputed boundary weight maps, one per sample.
    """
    net.train(True)
    net.zero_grad(set_to_none=False)
    xb = _as_batch(x, net)
    ys = np.asarray(y)
    if ys.ndim == 3:
        ys = ys[None]
    if ys.shape[0] != xb.shape[0]:
        raise ValueError("batch sizes of x and y differ")
    z = net(xb)
    zn = z.detach().double().numpy()
    grads = np.empty_like(zn)
    total = 0.0
    B = zn.shape[0]
    for b in range(B):
        w = None if weights is None else weights[b]
        res = composite_loss_logits(zn[b], ys[b], loss_cfg, w)
        total += res.value
        grads[b] = res.grad
    z.backward(torch.from_numpy(grads / B).to(z.dtype))
    return total / B, 1.0 / (1.0 + np.exp(-zn))


# -- training -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 3000
    batch_size: int = 8
    optimizer: str = "adam"
    sgd_momentum: float = 0.9
    loss: LossConfig = field(default_factory=lambda: LossConfig.from_name("bw-ce"))
    unet: UNetConfig = field(default_factory=UNetConfig)
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    input_dims: Tuple[int, int, int] = (112, 112, 80)
    seed: int = 0
    val_every: int = 1
    head_prior: float = 0.5

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1 or self.val_every < 1:
            raise ValueError("learning_rate, epochs, batch_size and val_every must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        self.unet.check_dims(self.input_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["augment"] = None if self.augment is None else self.augment.to_dict()
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            loss = dict(d["loss"])
            name = loss.pop("name", None)
            d["loss"] = LossConfig.from_name(name, **loss) if name else LossConfig(**loss)
        if "unet" in d:
            d["unet"] = UNetConfig(**d["unet"])
        if "augment" in d and d["augment"] is not None:
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


def prepare(v: Volume, dims: Sequence[int], normalize: bool = True) -> np.ndarray:
    """Network input for ``v``: p90 normalization then centered crop/pad to ``dims``."""
    if normalize:
        v = normalize_p90(v)
    return crop_or_pad(v, dims).data


def _batch_dice(prob: np.ndarray, y: np.ndarray) -> float:
    p = prob >= 0.5
    t = np.asarray(y).astype(bool)
    tot = p.sum() + t.sum()
    return 1.0 if tot == 0 else 2.0 * float(np.sum(p & t)) / float(tot)


def validation_dice(net: UNet, samples: Sequence[Tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean Dice at threshold 0.5 over prepared (input, label) pairs."""
    scores = [_batch_dice(forward(net, x)[0], y) for x, y in samples]
    return float(np.mean(scores)) if scores else float("nan")


def _prepare_labeled(series: Sequence[BoldSeries], dims) -> List[List[Tuple[np.ndarray, np.ndarray]]]:
    out = []
    for s in series:
        items = []
        for t, lab in s.labels.items():
            items.append((prepare(s.frames[t], dims), crop_or_pad(lab, dims).data))
        out.append(items)
    return out


def train(train_set: Sequence[BoldSeries], val_set: Sequence[BoldSeries], cfg: TrainConfig,
          progress: Optional[Callable[[dict], None]] = None):
    """Train from scratch; returns (best network, history).

    Every epoch each training subject contributes exactly one sample: one of
    its labeled frames drawn uniformly, then augmented. The returned network
    is the state with the highest validation Dice (first one on ties).
    """
    if not train_set:
        raise ValueError("training set is empty")
    for s in train_set:
        if not s.labels:
            raise ValueError(f"training series {s.subject_id!r} has no labeled frames")
    dims = cfg.input_dims
    train_items = _prepare_labeled(train_set, dims)
    val_items = [it for subj in _prepare_labeled(val_set, dims) for it in subj]

    net = build(cfg.unet, cfg.seed, head_prior=cfg.head_prior)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    else:
        opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.sgd_momentum)

    lc = cfg.loss
    best_state, best_dice, best_epoch = None, -np.inf, -1
    history = []
    n = len(train_items)
    for epoch in range(cfg.epochs):
        erng = sample_rng(cfg.seed, 1, epoch)
        order = erng.permutation(n)
        picks = erng.integers(0, [len(train_items[s]) for s in range(n)])
        xs, ys = [], []
        for s in order:
            x, y = train_items[s][picks[s]]
            if cfg.augment is not None:
                va, ya = augment_sample(Volume(x), LabelMap(y), cfg.augment, sample_rng(cfg.seed, 2, epoch, s))
                x, y = va.data, ya.data
            xs.append(x)
            ys.append(y)
        losses, dices = [], []
        for start in range(0, n, cfg.batch_size):
            xb = np.stack(xs[start:start + cfg.batch_size])
            yb = np.stack(ys[start:start + cfg.batch_size])
            weights = None
            if lc.boundary_weighting:
                weights = [boundary.weight_map(LabelMap(yy), lc.w1, lc.w2, lc.K) if yy.any() else np.zeros(yy.shape)
                           for yy in yb]
            loss, prob = backward(net, xb, yb, lc, weights)
            opt.step()
            losses.append(loss * len(xb))
            dices += [_batch_dice(p, t) for p, t in zip(prob, yb)]
        rec = {"epoch": epoch, "train_loss": float(sum(losses) / n), "train_dice": float(np.mean(dices))}
        if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1:
            vd = validation_dice(net, val_items) if val_items else rec["train_dice"]
            rec["val_dice"] = vd
            if vd > best_dice:
                best_dice, best_epoch = vd, epoch
                best_state = copy.deepcopy(net.state_dict())
        history.append(rec)
        if progress is not None:
            progress(rec)
    net.load_state_dict(best_state)
    net.eval()
    net.best_epoch = best_epoch
    return net, history


# -- inference ------------------------------------------------------------------------

def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 26-connected component; ties go to the component found first in scan order."""
    m = np.asarray(mask).astype(bool)
    lab, n = ndimage.label(m, structure=np.ones((3, 3, 3), dtype=bool))
    if n <= 1:
        return m
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == int(np.argmax(sizes))


def postprocess(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return largest_component(np.asarray(prob) >= threshold)


@dataclass
class SegmentResult:
    label: LabelMap
    empty: bool


def segment(net: UNet, v: Volume, input_dims: Optional[Sequence[int]] = None,
            normalize: bool = True) -> SegmentResult:
    """Threshold at 0.5, keep the largest component, map back to ``v``'s grid."""
    dims = tuple(input_dims) if input_dims is not None else v.dims
    x = prepare(v, dims, normalize)
    mask = postprocess(forward(net, x)[0])
    mask = crop_or_pad_array(mask.astype(np.uint8), v.dims)
    return SegmentResult(LabelMap(mask, v.spacing), not mask.any())


# -- checkpoints ------------------------------------------------------------------------

CKPT_MAGIC = b"BWSEGCK\0"
CKPT_VERSION = 1


def _tensors(net: UNet) -> Dict[str, torch.Tensor]:
    return {k: v for k, v in net.state_dict().items() if not k.endswith("num_batches_tracked")}


def save_checkpoint(path, net: UNet, input_dims: Sequence[int], history: Optional[list] = None,
                    extra: Optional[dict] = None) -> None:
    """Binary checkpoint: magic, version, JSON header length + header, then float32 tensors.

    The header holds the UNetConfig, input dims, tensor table (name, shape in
    storage order), training history and any ``extra`` metadata.
    """
    tensors = _tensors(net)
    header = {"unet": asdict(net.cfg), "input_dims": [int(d) for d in input_dims],
              "tensors": [{"name": k, "shape": list(t.shape)} for k, t in tensors.items()],
              "history": history or [], "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hbytes)), hbytes]
    for t in tensors.values():
        parts.append(t.detach().cpu().numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Returns (network in eval mode, header dict)."""
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a bwseg checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen])
    net = UNet(UNetConfig(**header["unet"]))
    state = net.state_dict()
    off = 16 + hlen
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(entry["shape"])
        off += 4 * n
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    if off != len(blob):
        raise ValueError(f"{path}: trailing or missing tensor data")
    net.load_state_dict(state)
    net.eval()
    return net, header
