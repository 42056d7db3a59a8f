"""Assembly of the full U-shaped network.

Contracting path: one attention residual block per level followed by 2x2
max pooling; channel width starts at base_channels and doubles per level.
Expansive path: transposed-conv upsampling, concatenation with the
attention-weighted skip features ([upsampled, weighted skip] in that
channel order), then another attention residual block. The head is a 1x1
convolution plus sigmoid, so the output is a per-pixel probability map the
same size as the input.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .attention import MecaModule, meca_apply
from .blocks import MECA_PLACEMENTS, Cadrb
from .errors import CheckpointError, ConfigError, ShapeError
from .layers import Conv2dParams, DropBlockConfig, concat_channels, conv2d, conv_transpose2d, make_conv2d, maxpool2d_2x2, sigmoid
from .tensor import Tensor

CHECKPOINT_MAGIC = "carunet-weights v1"


@dataclass
class CarUnetConfig:
    in_channels: int = 3
    base_channels: int = 16
    depth: int = 4  # number of 2x2 pooling steps
    dropblock_size: int = 7
    dropblock_rate: float = 0.15
    meca_placement: str = "post_block"
    seed: int = 1234
    dtype: str = "float32"

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.dropblock_size < 1 or self.dropblock_size % 2 == 0:
            raise ConfigError(f"dropblock_size must be odd and positive, got {self.dropblock_size}")
        if not 0.0 <= self.dropblock_rate < 1.0:
            raise ConfigError(f"dropblock_rate must be in [0, 1), got {self.dropblock_rate}")
        if self.meca_placement not in MECA_PLACEMENTS:
            raise ConfigError(f"meca_placement must be one of {MECA_PLACEMENTS}, got '{self.meca_placement}'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got '{self.dtype}'")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


class CarUnet:
    """The built network: encoder blocks, decoder blocks, skip attention, head."""

    def __init__(self, config: CarUnetConfig):
        config.validate()
        self.config = config
        dtype = config.np_dtype
        rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
        self.dropblock_cfg = DropBlockConfig(block_size=config.dropblock_size, drop_rate=config.dropblock_rate, mode="train")
        self._dropblock_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))

        def block(cin, cout):
            return Cadrb(rng, cin, cout, self.dropblock_cfg, use_meca=True, meca_placement=config.meca_placement, dtype=dtype)

        chans = [config.base_channels * (2**level) for level in range(config.depth + 1)]
        self.encoders: list[Cadrb] = []
        cin = config.in_channels
        for level in range(config.depth):
            self.encoders.append(block(cin, chans[level]))
            cin = chans[level]
        self.bottleneck = block(chans[config.depth - 1], chans[config.depth])
        self.up_convs: list[Conv2dParams] = []
        self.skip_mecas: list[MecaModule] = []
        self.decoders: list[Cadrb] = []
        for level in reversed(range(config.depth)):
            self.up_convs.append(make_conv2d(rng, chans[level + 1], chans[level], kernel=2, padding=0, dtype=dtype, stride=2))
            self.skip_mecas.append(MecaModule(rng, dtype=dtype))
            self.decoders.append(block(chans[level + 1], chans[level]))
        self.head = make_conv2d(rng, chans[0], 1, kernel=1, padding=0, dtype=dtype)
        self.mode = "train"
        self.set_mode("train")

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got '{mode}'")
        self.mode = mode
        self.dropblock_cfg.mode = mode
        for bn in self._batchnorms():
            bn.mode = mode

    def _batchnorms(self):
        for blk in [*self.encoders, self.bottleneck, *self.decoders]:
            yield from blk.batchnorms()

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.data.ndim != 4:
            raise ShapeError(f"network input must be NCHW, got shape {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise ShapeError(f"network expects {cfg.in_channels} input channels, got {x.shape[1]}")
        factor = 2**cfg.depth
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(f"input spatial size {x.shape[2]}x{x.shape[3]} must be divisible by 2^depth = {factor}")
        rng = self._dropblock_rng if self.mode == "train" else None
        skips = []
        for enc in self.encoders:
            skip = enc.forward(x, rng)
            skips.append(skip)
            x, _ = maxpool2d_2x2(skip)
        x = self.bottleneck.forward(x, rng)
        for i, dec in enumerate(self.decoders):
            level = cfg.depth - 1 - i
            up = conv_transpose2d(x, self.up_convs[i])
            weighted = meca_apply(skips[level], self.skip_mecas[i])
            x = dec.forward(concat_channels(up, weighted), rng)
        return sigmoid(conv2d(x, self.head))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, enc in enumerate(self.encoders):
            out += [(f"enc{i}.{n}", p) for n, p in enc.named_parameters()]
        out += [(f"bottleneck.{n}", p) for n, p in self.bottleneck.named_parameters()]
        for i, dec in enumerate(self.decoders):
            out += [(f"up{i}.weight", self.up_convs[i].weight), (f"up{i}.bias", self.up_convs[i].bias)]
            out += [(f"skip_meca{i}.kernel", self.skip_mecas[i].kernel)]
            out += [(f"dec{i}.{n}", p) for n, p in dec.named_parameters()]
        out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_state(self) -> list[tuple[str, np.ndarray]]:
        """All arrays a checkpoint must carry: parameters plus BN running stats."""
        out: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in self.named_parameters()]

        def bn_entries(prefix, blk):
            entries = []
            for uname, unit in (("unit1", blk.unit1), ("unit2", blk.unit2)):
                for bname, bn in (("bn1", unit.bn1), ("bn2", unit.bn2)):
                    entries.append((f"{prefix}.{uname}.{bname}.running_mean", bn.running_mean))
                    entries.append((f"{prefix}.{uname}.{bname}.running_var", bn.running_var))
            return entries

        for i, enc in enumerate(self.encoders):
            out += bn_entries(f"enc{i}", enc)
        out += bn_entries("bottleneck", self.bottleneck)
        for i, dec in enumerate(self.decoders):
            out += bn_entries(f"dec{i}", dec)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into the network in place; shapes must already match."""
        for name, arr in self.named_state():
            arr[...] = state[name].astype(arr.dtype)

    def snapshot_state(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.named_state()}


def build_network(config: CarUnetConfig) -> CarUnet:
    return CarUnet(config)


_CONFIG_FIELDS = ("in_channels", "base_channels", "depth", "dropblock_size", "dropblock_rate", "meca_placement", "seed", "dtype")


def save_weights(net: CarUnet, path) -> None:
    """Write a checkpoint: plain-text manifest, then little-endian float32 buffers.

    Each manifest line carries the tensor name, shape, byte offset into the
    binary section, and a crc32 of the exact bytes, so loads can verify
    integrity entry by entry.
    """
    entries = net.named_state()
    header = [CHECKPOINT_MAGIC]
    for name in _CONFIG_FIELDS:
        header.append(f"config {name}={getattr(net.config, name)}")
    blobs = []
    offset = 0
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        crc = zlib.crc32(raw) & 0xFFFFFFFF
        shape = ",".join(str(s) for s in arr.shape)
        header.append(f"tensor {name} {shape} {offset} {crc:08x}")
        blobs.append(raw)
        offset += len(raw)
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for raw in blobs:
            fh.write(raw)


def _parse_manifest(path):
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\nend\n")
    if nl < 0 or not data.startswith(CHECKPOINT_MAGIC.encode("ascii")):
        raise CheckpointError(f"{path}: not a recognizable checkpoint (missing magic or end marker)")
    header = data[: nl + 1].decode("ascii").splitlines()
    blob = data[nl + 5 :]
    config_kv: dict[str, str] = {}
    tensors: list[tuple[str, tuple[int, ...], int, int]] = []
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            key, _, value = rest.partition("=")
            config_kv[key] = value
        elif kind == "tensor":
            name, shape_s, offset_s, crc_s = rest.split(" ")
            shape = tuple(int(s) for s in shape_s.split(","))
            tensors.append((name, shape, int(offset_s), int(crc_s, 16)))
        else:
            raise CheckpointError(f"{path}: unrecognized manifest line '{line}'")
    return config_kv, tensors, blob


def load_weights(path) -> CarUnet:
    """Rebuild the network recorded in a checkpoint and fill in its weights."""
    config_kv, tensors, blob = _parse_manifest(path)
    try:
        config = CarUnetConfig(
            in_channels=int(config_kv["in_channels"]),
            base_channels=int(config_kv["base_channels"]),
            depth=int(config_kv["depth"]),
            dropblock_size=int(config_kv["dropblock_size"]),
            dropblock_rate=float(config_kv["dropblock_rate"]),
            meca_placement=config_kv["meca_placement"],
            seed=int(config_kv["seed"]),
            dtype=config_kv["dtype"],
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: manifest is missing config key {exc}") from None
    net = build_network(config)
    expected = dict(net.named_state())
    problems = []
    loaded: dict[str, np.ndarray] = {}
    for name, shape, offset, crc in tensors:
        if name not in expected:
            problems.append(f"unexpected tensor '{name}'")
            continue
        want = expected[name].shape
        if shape != want:
            problems.append(f"tensor '{name}': manifest shape {shape}, network expects {want}")
            continue
        nbytes = int(np.prod(shape)) * 4
        raw = blob[offset : offset + nbytes]
        if len(raw) != nbytes:
            problems.append(f"tensor '{name}': file truncated ({len(raw)} of {nbytes} bytes)")
            continue
        if (zlib.crc32(raw) & 0xFFFFFFFF) != crc:
            problems.append(f"tensor '{name}': checksum mismatch")
            continue
        loaded[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    missing = sorted(set(expected) - set(loaded) - {p.split("'")[1] for p in problems if "'" in p})
    problems += [f"tensor '{name}' missing from checkpoint" for name in missing]
    if problems:
        raise CheckpointError(f"{path}: " + "; ".join(problems))
    net.load_state(loaded)
    net.set_mode("eval")
    return net
