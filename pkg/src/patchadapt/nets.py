"""Segmentation network, the two domain classifiers, and checkpoint I/O."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LEAKY_SLOPE = 0.2

CHECKPOINT_MAGIC = b"PADAPTCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class Conv:
    """Convolution weights plus bias; fan-in scaled uniform init unless ``zero``."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None,
                 rng=None, zero=False, dtype=np.float64):
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        shape = (out_ch, in_ch, kernel, kernel)
        if zero:
            w = np.zeros(shape, dtype=dtype)
        else:
            rng = np.random.default_rng() if rng is None else rng
            bound = np.sqrt(6.0 / (in_ch * kernel * kernel))
            w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class _Net:
    def layers(self) -> list[Conv]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers()):
            out.append((f"{i}.weight", layer.weight))
            out.append((f"{i}.bias", layer.bias))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class SegmentationNet(_Net):
    """Conv backbone (3x3 blocks, ReLU) and a 1x1 pixel classifier head.

    Logits are bilinearly upsampled back to the input resolution.
    """

    def __init__(self, in_channels=3, n_classes=6, widths=(16, 32, 64, 64),
                 strides=(1, 2, 2, 2), rng=None, dtype=np.float64):
        if len(widths) != len(strides) or not widths:
            raise ValueError("widths and strides must be non-empty and equal length")
        self.config = dict(in_channels=in_channels, n_classes=n_classes,
                           widths=list(widths), strides=list(strides))
        self.backbone = []
        prev = in_channels
        for w, s in zip(widths, strides):
            self.backbone.append(Conv(prev, w, 3, s, 1, rng=rng, dtype=dtype))
            prev = w
        self.head = Conv(prev, n_classes, 1, 1, 0, zero=True, dtype=dtype)

    @property
    def n_classes(self) -> int:
        return self.config["n_classes"]

    @property
    def downsample(self) -> int:
        return int(np.prod(self.config["strides"]))

    @property
    def feature_channels(self) -> int:
        return self.config["widths"][-1]

    def layers(self):
        return self.backbone + [self.head]

    def features(self, x: Tensor) -> Tensor:
        for conv in self.backbone:
            x = dc.relu(conv(x))
        return x

    def __call__(self, x: Tensor):
        return forward_seg(self, x)


class DomainClassifierF(_Net):
    """Stride-1 per-location discriminator on backbone features."""

    def __init__(self, in_channels=64, widths=(16, 32, 64, 64), rng=None, dtype=np.float64):
        self.config = dict(in_channels=in_channels, widths=list(widths))
        self.convs = []
        prev = in_channels
        for w in widths:
            self.convs.append(Conv(prev, w, 3, 1, 1, rng=rng, dtype=dtype))
            prev = w
        self.final = Conv(prev, 1, 1, 1, 0, zero=True, dtype=dtype)

    def layers(self):
        return self.convs + [self.final]

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = dc.leaky_relu(conv(x), LEAKY_SLOPE)
        return dc.sigmoid(self.final(x))


class DomainClassifierE(_Net):
    """Stride-2 discriminator on entropy maps; each layer floor-halves H and W."""

    # top/left zero padding only: floor((H + 1 - 3) / 2) + 1 == floor(H / 2)
    PADDING = (1, 0, 1, 0)

    def __init__(self, in_channels=6, widths=(16, 32, 64, 64), rng=None, dtype=np.float64):
        self.config = dict(in_channels=in_channels, widths=list(widths))
        self.convs = []
        prev = in_channels
        for w in widths:
            self.convs.append(Conv(prev, w, 3, 2, self.PADDING, rng=rng, dtype=dtype))
            prev = w
        self.final = Conv(prev, 1, 1, 1, 0, zero=True, dtype=dtype)

    @property
    def min_extent(self) -> int:
        return 2 ** len(self.convs)

    def layers(self):
        return self.convs + [self.final]

    def __call__(self, x: Tensor) -> Tensor:
        return forward_de(self, x)


def forward_seg(net: SegmentationNet, batch) -> tuple[Tensor, Tensor]:
    """Return (features, logits); logits are N x C x H x W at input resolution."""
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    if batch.ndim != 4:
        raise ValueError(f"expected an NCHW batch, got shape {batch.shape}")
    h, w = batch.shape[2:]
    f = net.downsample
    if h % f or w % f:
        raise ValueError(
            f"input extent {h}x{w} must be a multiple of the backbone downsampling factor {f}"
        )
    feats = net.features(batch)
    logits = dc.upsample_bilinear(net.head(feats), (h, w))
    return feats, logits


def forward_df(d: DomainClassifierF, features: Tensor, grl_scale: float) -> Tensor:
    """Domain probability per feature location.

    The input passes through gradient reversal with ``grl_scale``; a zero
    scale detaches the features so no gradient reaches the backbone.
    """
    if grl_scale < 0:
        raise ValueError(f"grl_scale must be >= 0, got {grl_scale}")
    x = dc.grad_reverse(features, grl_scale) if grl_scale > 0 else features.detach()
    return d(x)


def forward_de(d: DomainClassifierE, entropy_map: Tensor) -> Tensor:
    h, w = entropy_map.shape[2:]
    m = d.min_extent
    if h < m or w < m:
        raise ValueError(f"entropy-level classifier needs at least {m}x{m} input, got {h}x{w}")
    x = entropy_map
    for conv in d.convs:
        x = dc.leaky_relu(conv(x), LEAKY_SLOPE)
    return dc.sigmoid(d.final(x))


@dataclass
class ModelBundle:
    seg: SegmentationNet
    df: DomainClassifierF
    de: DomainClassifierE
    stage: str = "init"
    stage_index: int = 0
    iteration: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, in_channels=3, n_classes=6, widths=(16, 32, 64, 64),
               strides=(1, 2, 2, 2), df_widths=(16, 32, 64, 64),
               de_widths=(16, 32, 64, 64), seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        seg = SegmentationNet(in_channels, n_classes, widths, strides, rng=rng, dtype=dtype)
        df = DomainClassifierF(widths[-1], df_widths, rng=rng, dtype=dtype)
        de = DomainClassifierE(n_classes, de_widths, rng=rng, dtype=dtype)
        return cls(seg, df, de)

    def nets(self) -> dict[str, _Net]:
        return {"seg": self.seg, "df": self.df, "de": self.de}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{k}.{n}", p) for k, net in self.nets().items()
                for n, p in net.named_parameters()]

    def architecture(self) -> dict:
        return {
            "seg": self.seg.config,
            "df": self.df.config,
            "de": self.de.config,
            "dtype": str(self.seg.head.weight.dtype),
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()[:16]

    def advance(self, stage: str, iterations: int) -> None:
        self.stage = stage
        self.stage_index += 1
        self.iteration += iterations
        self.history.append(stage)


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Magic, version, JSON descriptor block, then raw little-endian parameters."""
    params = bundle.named_parameters()
    dtype = np.dtype(bundle.architecture()["dtype"]).newbyteorder("<")
    descriptor = {
        "architecture": bundle.architecture(),
        "stage": bundle.stage,
        "stage_index": bundle.stage_index,
        "iteration": bundle.iteration,
        "history": list(bundle.history),
        "parameters": [[name, list(p.shape)] for name, p in params],
    }
    blob = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(np.ascontiguousarray(p.data, dtype=dtype).tobytes())


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if raw[:head] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < head + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, blob_len = struct.unpack_from("<II", raw, head)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    off = head + 8
    try:
        desc = json.loads(raw[off:off + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt descriptor block") from exc
    off += blob_len

    arch = desc["architecture"]
    dtype = np.dtype(arch["dtype"])
    seg = SegmentationNet(arch["seg"]["in_channels"], arch["seg"]["n_classes"],
                          arch["seg"]["widths"], arch["seg"]["strides"], dtype=dtype)
    df = DomainClassifierF(arch["df"]["in_channels"], arch["df"]["widths"], dtype=dtype)
    de = DomainClassifierE(arch["de"]["in_channels"], arch["de"]["widths"], dtype=dtype)
    bundle = ModelBundle(seg, df, de, desc["stage"], desc["stage_index"],
                         desc["iteration"], list(desc.get("history", [])))

    le = dtype.newbyteorder("<")
    params = bundle.named_parameters()
    if [[n, list(p.shape)] for n, p in params] != desc["parameters"]:
        raise CheckpointError(f"{path}: parameter layout does not match architecture")
    for _, p in params:
        nbytes = p.size * le.itemsize
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated parameter data")
        p.data = np.frombuffer(raw, dtype=le, count=p.size, offset=off).astype(dtype).reshape(p.shape)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return bundle
