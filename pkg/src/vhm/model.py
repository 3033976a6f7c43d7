"""Fully convolutional ResNeXt regressor for per-pixel mean and max vegetation height.

Layer graph::

    input ─┬─ entry (1x1 conv, BN, ReLU) ─ stage1 ─ stage2 ─ stage3 ─ stage4 ─┐
           └─ pixel extractor (1x1 conv, ReLU, 1x1 conv) ─────────────────────┴─ concat ─ head

The head is 1x1 conv, ReLU, 1x1 conv to two channels (mean, max). All convolutions have
stride 1, so the output has the spatial size of the input.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor


@dataclass
class ModelConfig:
    in_channels: int = 5
    groups: int = 32
    width_per_group: int = 4
    n_blocks: tuple[int, ...] = (2, 3, 5, 3)
    stage_out_channels: tuple[int, ...] = (256, 512, 1024, 2048)
    entry_channels: int = 64
    pixel_hidden: int = 128
    pixel_out: int = 256
    head_hidden: int = 512
    out_channels: int = 2
    # scales every channel count and the cardinality; 1 is the full-size network
    width_multiplier: Fraction = Fraction(1)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    init_gain: float = 6.0

    def __post_init__(self):
        self.width_multiplier = Fraction(self.width_multiplier)
        self.n_blocks = tuple(int(b) for b in self.n_blocks)
        self.stage_out_channels = tuple(int(c) for c in self.stage_out_channels)
        self.validate()

    def _scale(self, c: int, what: str) -> int:
        v = c * self.width_multiplier
        if v.denominator != 1 or v < 1:
            raise ValueError(f"{what}={c} scaled by {self.width_multiplier} is not a positive integer")
        return int(v)

    @property
    def cardinality(self) -> int:
        return self._scale(self.groups, "groups")

    def channels(self) -> dict:
        """Channel counts after applying the width multiplier."""
        card = self.cardinality
        return {
            "entry": self._scale(self.entry_channels, "entry_channels"),
            "stages": [self._scale(c, "stage_out_channels") for c in self.stage_out_channels],
            "bottleneck": [card * self.width_per_group * 2**i for i in range(len(self.stage_out_channels))],
            "pixel_hidden": self._scale(self.pixel_hidden, "pixel_hidden"),
            "pixel_out": self._scale(self.pixel_out, "pixel_out"),
            "head_hidden": self._scale(self.head_hidden, "head_hidden"),
            "groups": card,
        }

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if self.out_channels != 2:
            raise ValueError("out_channels must be 2 (mean, max)")
        if len(self.n_blocks) != len(self.stage_out_channels) or not self.n_blocks:
            raise ValueError("n_blocks and stage_out_channels must have equal nonzero length")
        if any(b < 1 for b in self.n_blocks):
            raise ValueError("every stage needs at least one block")
        soc = self.stage_out_channels
        if any(b != 2 * a for a, b in zip(soc, soc[1:])):
            raise ValueError(f"stage_out_channels must double per stage, got {soc}")
        ch = self.channels()
        g = ch["groups"]
        for c in ch["stages"] + ch["bottleneck"]:
            if c % g:
                raise ValueError(f"channel count {c} not divisible by groups={g}")

    @property
    def n_conv3x3(self) -> int:
        return sum(self.n_blocks)

    @property
    def receptive_radius(self) -> int:
        return self.n_conv3x3

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        kv = parse_kv(text)
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in kv:
                continue
            raw = kv.pop(f.name)
            if f.name in ("n_blocks", "stage_out_channels"):
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            elif f.name == "width_multiplier":
                kwargs[f.name] = Fraction(raw)
            elif f.name in ("bn_momentum", "bn_eps", "init_gain"):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        if kv:
            raise ValueError(f"unknown model config keys: {sorted(kv)}")
        return cls(**kwargs)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def tiny_config(in_channels: int = 5, n_blocks=(1, 1, 1, 1)) -> ModelConfig:
    """Desk-scale network: one eighth of the width."""
    return ModelConfig(in_channels=in_channels, n_blocks=tuple(n_blocks), width_multiplier=Fraction(1, 8))


@dataclass
class _Block:
    prefix: str
    cin: int
    cout: int
    width: int
    groups: int

    @property
    def projected(self) -> bool:
        return self.cin != self.cout


class Model:
    """Parameters plus layer graph of the height regressor."""

    def __init__(self, config: ModelConfig, params: ParamStore, blocks: list[_Block]):
        self.config = config
        self.params = params
        self.blocks = blocks

    @property
    def dtype(self):
        return self.params.dtype

    def astype(self, dtype) -> Model:
        self.params.astype(dtype)
        return self

    # -- layers -------------------------------------------------------------

    def _conv(self, x, name, groups=1, tape=None, bias=False):
        p = self.params
        b = p[f"{name}.bias"] if bias else None
        return ad.conv2d(x, p[f"{name}.weight"], b, groups=groups, tape=tape)

    def _bn(self, x, name, training, tape, inplace=False):
        p = self.params
        return ad.batchnorm(x, p[f"{name}.scale"], p[f"{name}.shift"], p[f"{name}.running_mean"],
                            p[f"{name}.running_var"], training, self.config.bn_momentum,
                            self.config.bn_eps, tape=tape, inplace=inplace)

    def resnext_block(self, x: Tensor, blk: _Block, training: bool, tape: Tape | None) -> Tensor:
        ip = tape is None
        pre = blk.prefix
        h = self._conv(x, f"{pre}.conv1", tape=tape)
        h = ad.relu(self._bn(h, f"{pre}.bn1", training, tape, ip), tape, ip)
        h = self._conv(h, f"{pre}.conv2", groups=blk.groups, tape=tape)
        h = ad.relu(self._bn(h, f"{pre}.bn2", training, tape, ip), tape, ip)
        h = self._conv(h, f"{pre}.conv3", tape=tape)
        h = self._bn(h, f"{pre}.bn3", training, tape, ip)
        if blk.projected:
            s = self._conv(x, f"{pre}.proj", tape=tape)
            s = self._bn(s, f"{pre}.proj_bn", training, tape, ip)
        else:
            s = x
        del x
        h = ad.add(h, s, tape, ip)
        return ad.relu(h, tape, ip)

    def apply(self, x: Tensor, training: bool = False, tape: Tape | None = None) -> Tensor:
        """Forward pass on a channels-last tensor ``(N, H, W, C_in)``."""
        ip = tape is None
        if x.value.shape[-1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.value.shape[-1]}")
        px = self._conv(x, "pixel.conv1", tape=tape, bias=True)
        px = ad.relu(px, tape, ip)
        px = self._conv(px, "pixel.conv2", tape=tape, bias=True)
        h = self._conv(x, "entry.conv", tape=tape)
        h = ad.relu(self._bn(h, "entry.bn", training, tape, ip), tape, ip)
        for blk in self.blocks:
            h = self.resnext_block(h, blk, training, tape)
        h = ad.concat([h, px], tape)
        del px
        h = self._conv(h, "head.conv1", tape=tape, bias=True)
        h = ad.relu(h, tape, ip)
        return self._conv(h, "head.conv2", tape=tape, bias=True)

    def forward(self, x, mode: str = "eval") -> np.ndarray:
        """Predict ``(N, 2, H, W)`` from ``(N, C_in, H, W)``: channel 0 mean, channel 1 max height."""
        if mode not in ("eval", "train"):
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(x)
        if x.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) input, got shape {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        t = Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype))
        out = self.apply(t, training=(mode == "train"), tape=None)
        return np.ascontiguousarray(out.value.transpose(0, 3, 1, 2))

    __call__ = forward

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        """Write ``<path>`` (VHMW parameters) and ``<path>.cfg`` (key=value config)."""
        path = Path(path)
        ad.save_params(self.params, path)
        Path(str(path) + ".cfg").write_text(self.config.to_text())

    @classmethod
    def load(cls, path, dtype=np.float32) -> Model:
        path = Path(path)
        config = ModelConfig.from_text(Path(str(path) + ".cfg").read_text())
        model = build(config, seed=0, dtype=dtype)
        model.params.load_state(ad.load_params(path))
        return model


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate the network with fan-in scaled uniform weights drawn from ``seed``."""
    config.validate()
    ch = config.channels()
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def conv(name, cin, cout, k=1, groups=1, bias=False):
        fan_in = (cin // groups) * k * k
        bound = np.sqrt(config.init_gain / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin // groups, k, k))
        store.add(f"{name}.weight", w.astype(dtype), kind=f"conv{k}x{k}")
        if bias:
            store.add(f"{name}.bias", np.zeros(cout, dtype=dtype), kind="bias")

    def bn(name, c):
        store.add(f"{name}.scale", np.ones(c, dtype=dtype), kind="bn_scale")
        store.add(f"{name}.shift", np.zeros(c, dtype=dtype), kind="bn_shift")
        store.add(f"{name}.running_mean", np.zeros(c, dtype=dtype), trainable=False, kind="bn_stat")
        store.add(f"{name}.running_var", np.ones(c, dtype=dtype), trainable=False, kind="bn_stat")

    cin = config.in_channels
    conv("pixel.conv1", cin, ch["pixel_hidden"], bias=True)
    conv("pixel.conv2", ch["pixel_hidden"], ch["pixel_out"], bias=True)
    conv("entry.conv", cin, ch["entry"])
    bn("entry.bn", ch["entry"])
    blocks = []
    c = ch["entry"]
    for s, (nb, cout, width) in enumerate(zip(config.n_blocks, ch["stages"], ch["bottleneck"]), 1):
        for b in range(1, nb + 1):
            blk = _Block(f"stage{s}.block{b}", c, cout, width, ch["groups"])
            conv(f"{blk.prefix}.conv1", c, width)
            bn(f"{blk.prefix}.bn1", width)
            conv(f"{blk.prefix}.conv2", width, width, k=3, groups=ch["groups"])
            bn(f"{blk.prefix}.bn2", width)
            conv(f"{blk.prefix}.conv3", width, cout)
            bn(f"{blk.prefix}.bn3", cout)
            if blk.projected:
                conv(f"{blk.prefix}.proj", c, cout)
                bn(f"{blk.prefix}.proj_bn", cout)
            blocks.append(blk)
            c = cout
    conv("head.conv1", c + ch["pixel_out"], ch["head_hidden"], bias=True)
    conv("head.conv2", ch["head_hidden"], config.out_channels, bias=True)
    return Model(config, store, blocks)


def head_input_channels(config: ModelConfig) -> int:
    ch = config.channels()
    return ch["stages"][-1] + ch["pixel_out"]
