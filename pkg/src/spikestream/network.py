"""Network assembly: stem, staged dual-stream blocks, twin classifier heads.

Layout (all activations time-flattened to ``(T*N, C, H, W)``):

    input -> stem Conv-BN-SN -> block_1 ... block_L -> heads

The stem output seeds both streams (o_0 = a_0 = stem spikes).  The spike
head reads the global average pool of the time-summed spike map; the
accumulation head reads the global average pool of the time-averaged
accumulation map.  Forward mode "fsnn" runs the spike path only and never
touches accumulation-path layers; "dsnn" runs both.

Initialization is deterministic from a seed: He-scaled normals for convs,
identity batch norms, except the last BN of every block body whose weight
and bias start at zero so every block begins as the identity map and the
network's function at depth L equals its function at depth 0.

Checkpoints are a little-endian binary container (magic "SPKC") holding a
JSON config header plus named float32 parameter tensors and a CRC32 footer;
:func:`fuse_network` folds every BN into its conv for inference-only use.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import (
    Block,
    ConvBnUnit,
    DualStreamState,
    ForwardContext,
    GFunction,
    ProbeLog,
    check_binary,
)
from .neuron import NeuronConfig, SurrogateConfig, sn_seq
from .numerics import (
    BnParams,
    ConvParams,
    GradTape,
    ShapeError,
    Tensor,
    affine,
    fuse_conv_bn,
    linear,
    spatial_mean,
    sum_time,
)

__all__ = [
    "StageSpec",
    "NetworkConfig",
    "DualLogits",
    "LinearHead",
    "Network",
    "build",
    "fuse_network",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

_f32 = np.float32

CHECKPOINT_MAGIC = b"SPKC"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """A checkpoint file is malformed, truncated, or corrupt."""


@dataclass(frozen=True)
class StageSpec:
    """A run of same-width blocks; downsampling stages halve the grid on entry."""

    blocks: int
    channels: int
    downsample: bool = False

    def __post_init__(self) -> None:
        if self.blocks < 1:
            raise ValueError(f"stage needs at least one block, got {self.blocks}")
        if self.channels < 1:
            raise ValueError(f"stage channels must be positive, got {self.channels}")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int
    in_hw: tuple[int, int]
    t_steps: int
    num_classes: int
    block_kind: str = "logical"
    g: str | None = "or"
    stem_channels: int = 8
    stem_kernel: int = 3
    stem_stride: int = 1
    stages: tuple[StageSpec, ...] = (StageSpec(blocks=2, channels=8),)
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    residual_v_threshold: float = 1.0
    downsample_sn: bool = True
    input_kind: str = "spike"
    head_mode: str = "sum"

    def __post_init__(self) -> None:
        if self.block_kind not in ("logical", "sn_residual", "add"):
            raise ValueError(f"unknown block_kind {self.block_kind!r}")
        if self.block_kind == "logical":
            if self.g not in ("and", "iand", "or", "xor"):
                raise ValueError(f"logical networks need g in and/iand/or/xor, got {self.g!r}")
            if not self.downsample_sn:
                raise ValueError(
                    "logical combines read binary shortcuts, so the downsample spike "
                    "branch must keep its spiking neuron (downsample_sn=True)"
                )
        if self.input_kind not in ("spike", "real"):
            raise ValueError(f"input_kind must be 'spike' or 'real', got {self.input_kind!r}")
        if self.head_mode not in ("sum", "s_only", "a_only"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        if self.t_steps < 1:
            raise ValueError(f"t_steps must be >= 1, got {self.t_steps}")
        if self.num_classes < 2:
            raise ValueError(f"need at least two classes, got {self.num_classes}")
        if not self.stages:
            raise ValueError("need at least one stage")
        if not (0.0 < self.residual_v_threshold <= 1.0):
            raise ValueError(
                f"residual threshold must lie in (0, 1], got {self.residual_v_threshold}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["in_hw"] = list(self.in_hw)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["in_hw"] = tuple(d["in_hw"])
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        d["neuron"] = NeuronConfig(**d["neuron"])
        d["surrogate"] = SurrogateConfig(**d["surrogate"])
        return cls(**d)


@dataclass
class DualLogits:
    """Both heads' outputs; logits_a is None when the forward ran spike-only."""

    logits_s: Tensor
    logits_a: Tensor | None = None

    def require_accumulation(self) -> Tensor:
        if self.logits_a is None:
            raise LookupError(
                "accumulation logits are absent by construction in a spike-only forward"
            )
        return self.logits_a

    def combined(self, head_mode: str = "sum") -> np.ndarray:
        if head_mode == "s_only":
            return self.logits_s.data
        if head_mode == "a_only":
            return self.require_accumulation().data
        return self.logits_s.data + self.require_accumulation().data

    def predictions(self, head_mode: str = "sum") -> np.ndarray:
        return self.combined(head_mode).argmax(axis=1)


@dataclass
class LinearHead:
    """Classifier head with the same billing metadata as a ConvBnUnit."""

    name: str
    weight: Tensor
    bias: Tensor
    signal: str
    path: str

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if ctx.counter is not None:
            ctx.counter.record_linear(self, x.data)
        return linear(x, self.weight, self.bias, ctx.tape)


class Network:
    """A built dual-stream network; construct through :func:`build`."""

    def __init__(
        self,
        config: NetworkConfig,
        stem: ConvBnUnit,
        blocks: list[Block],
        head_s: LinearHead,
        head_a: LinearHead,
        fused: bool = False,
    ) -> None:
        self.config = config
        self.stem = stem
        self.blocks = blocks
        self.head_s = head_s
        self.head_a = head_a
        self.fused = fused

    # ---- structure ----------------------------------------------------

    def units(self) -> list[ConvBnUnit]:
        out = [self.stem]
        for b in self.blocks:
            out.extend(b.units())
        return out

    def heads(self) -> list[LinearHead]:
        return [self.head_s, self.head_a]

    def synaptic_names(self, mode: str) -> list[str]:
        """Names of every op-counted layer a forward in ``mode`` must touch."""
        names = [u.name for u in self.units() if mode == "dsnn" or u.path == "spike"]
        names.append(self.head_s.name)
        if mode == "dsnn":
            names.append(self.head_a.name)
        return names

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors by name, in a fixed construction order."""
        out: dict[str, Tensor] = {}
        for u in self.units():
            out[f"{u.name}.conv.weight"] = u.conv.weight
            if u.conv.bias is not None:
                out[f"{u.name}.conv.bias"] = u.conv.bias
            if u.bn is not None:
                out[f"{u.name}.bn.gamma"] = u.bn.gamma
                out[f"{u.name}.bn.beta"] = u.bn.beta
        for h in self.heads():
            out[f"{h.name}.weight"] = h.weight
            out[f"{h.name}.bias"] = h.bias
        return out

    def state_tensors(self) -> dict[str, Tensor]:
        """Everything a checkpoint carries: parameters plus BN running moments."""
        out = self.parameters()
        for u in self.units():
            if u.bn is not None:
                out[f"{u.name}.bn.running_mean"] = u.bn.running_mean
                out[f"{u.name}.bn.running_var"] = u.bn.running_var
        return out

    # ---- forward -------------------------------------------------------

    def forward(
        self,
        x,
        mode: str = "dsnn",
        tape: GradTape | None = None,
        training: bool = False,
        counter=None,
        probes: ProbeLog | None = None,
        check_spikes: bool = True,
    ) -> DualLogits:
        if mode not in ("fsnn", "dsnn"):
            raise ValueError(f"mode must be 'fsnn' or 'dsnn', got {mode!r}")
        if mode == "fsnn" and self.config.block_kind == "add":
            raise ValueError(
                "add-combine networks are not full-spike and cannot run in fsnn mode"
            )
        cfg = self.config
        t = cfg.t_steps
        flat = self._flatten_input(x)
        if cfg.input_kind == "spike" and check_spikes:
            check_binary(flat.data, "network input")

        ctx = ForwardContext(
            t_steps=t,
            tape=tape,
            training=training,
            counter=counter,
            probes=probes,
            check_spikes=check_spikes,
        )
        if probes is not None:
            probes.note("o", "input", flat)

        z = self.stem.forward(flat, ctx)
        o = sn_seq(z, t, cfg.neuron, cfg.surrogate, ctx.tape)
        if probes is not None:
            probes.note("o", "stem", o)
            probes.note("s", "stem", o)
        state = DualStreamState(o=o, a=o if mode == "dsnn" else None)
        for block in self.blocks:
            state = block.forward(state, ctx)

        o_sum = sum_time(state.o, t, ctx.tape)
        feat_s = spatial_mean(o_sum, ctx.tape)
        logits_s = self.head_s.forward(feat_s, ctx)

        logits_a = None
        if mode == "dsnn":
            a_mean = affine(sum_time(state.a, t, ctx.tape), 1.0 / t, 0.0, ctx.tape)
            feat_a = spatial_mean(a_mean, ctx.tape)
            logits_a = self.head_a.forward(feat_a, ctx)

        if counter is not None:
            counter.finish_pass(self.synaptic_names(mode), batch_rows=flat.shape[0] // t)
        return DualLogits(logits_s=logits_s, logits_a=logits_a)

    def _flatten_input(self, x) -> Tensor:
        cfg = self.config
        if isinstance(x, Tensor):
            data = x.data
            keep = x
        else:
            data = np.asarray(x, dtype=_f32)
            keep = None
        if data.ndim == 5:
            t, n, c, h, w = data.shape
            if t != cfg.t_steps:
                raise ShapeError(f"input has {t} time steps, network expects {cfg.t_steps}")
            flat = Tensor(data.reshape(t * n, c, h, w))
        elif data.ndim == 4:
            if data.shape[0] % cfg.t_steps:
                raise ShapeError(
                    f"flattened input rows {data.shape[0]} not divisible by T={cfg.t_steps}"
                )
            flat = keep if keep is not None else Tensor(data)
        else:
            raise ShapeError(f"input must be (T, N, C, H, W) or (T*N, C, H, W), got {data.shape}")
        c, h, w = flat.shape[1:]
        if (c, h, w) != (cfg.in_channels, *cfg.in_hw):
            raise ShapeError(
                f"input frames are {(c, h, w)}, network expects "
                f"{(cfg.in_channels, *cfg.in_hw)}"
            )
        return flat


# ---- construction -------------------------------------------------------


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> Tensor:
    std = float(np.sqrt(2.0 / (cin * k * k)))
    return Tensor(rng.standard_normal((cout, cin, k, k)).astype(_f32) * _f32(std))


def _make_unit(
    rng: np.random.Generator,
    name: str,
    cin: int,
    cout: int,
    kernel: int,
    stride: int,
    signal: str,
    path: str,
    in_hw: tuple[int, int],
    zero_bn: bool = False,
) -> ConvBnUnit:
    conv = ConvParams(
        weight=_he_conv(rng, cout, cin, kernel),
        bias=None,
        stride=stride,
        padding=kernel // 2,
    )
    bn = BnParams.identity(cout)
    if zero_bn:
        bn.gamma.data[...] = 0.0
        bn.beta.data[...] = 0.0
    out_hw = _conv_out_hw(in_hw, kernel, stride, kernel // 2)
    return ConvBnUnit(name, conv, bn, signal, path, in_hw=in_hw, out_hw=out_hw)


def _conv_out_hw(in_hw: tuple[int, int], kernel: int, stride: int, padding: int) -> tuple[int, int]:
    h, w = in_hw
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kernel or wp < kernel:
        raise ShapeError(f"spatial size {h}x{w} too small for kernel {kernel}")
    return ((hp - kernel) // stride + 1, (wp - kernel) // stride + 1)


def build(config: NetworkConfig, seed: int = 0) -> Network:
    """Deterministically construct and initialize a network from its config."""
    rng = np.random.default_rng(seed)
    residual_cfg = NeuronConfig(
        kind="if",
        v_threshold=config.residual_v_threshold,
        v_reset=0.0,
        detach_reset=config.neuron.detach_reset,
    )
    g = GFunction(config.g) if config.block_kind == "logical" else None

    stem = _make_unit(
        rng,
        "stem",
        config.in_channels,
        config.stem_channels,
        config.stem_kernel,
        config.stem_stride,
        signal=config.input_kind,
        path="spike",
        in_hw=config.in_hw,
    )
    hw = stem.out_hw
    channels = config.stem_channels
    # In add-combine networks the stream leaves the binary lattice after the
    # first block, so every later block body reads real-valued input.
    stream_signal = "spike"

    blocks: list[Block] = []
    for si, stage in enumerate(config.stages):
        for bi in range(stage.blocks):
            name = f"s{si}b{bi}"
            downsample = stage.downsample and bi == 0
            stride = 2 if downsample else 1
            cin = channels
            cout = stage.channels
            if not downsample and cin != cout:
                raise ShapeError(
                    f"stage {si} changes width {cin}->{cout} without downsampling; "
                    "widths may only change at a downsample block"
                )
            body_hw = _conv_out_hw(hw, 3, stride, 1)
            conv1 = _make_unit(
                rng, f"{name}.conv1", cin, cout, 3, stride, stream_signal, "spike", hw
            )
            conv2 = _make_unit(
                rng, f"{name}.conv2", cout, cout, 3, 1, "spike", "spike", body_hw, zero_bn=True
            )
            down_spike = down_accum = None
            if downsample:
                down_spike = _make_unit(
                    rng, f"{name}.down.spike", cin, cout, 1, 2, stream_signal, "spike", hw
                )
                down_accum = _make_unit(
                    rng, f"{name}.down.accum", cin, cout, 1, 2, "real", "accum", hw
                )
            blocks.append(
                Block(
                    name=name,
                    kind=config.block_kind,
                    conv1=conv1,
                    conv2=conv2,
                    neuron_cfg=config.neuron,
                    sg=config.surrogate,
                    g=g,
                    residual_cfg=residual_cfg,
                    down_spike=down_spike,
                    down_accum=down_accum,
                    down_sn=config.downsample_sn,
                )
            )
            hw = body_hw
            channels = cout
            if config.block_kind == "add":
                stream_signal = "real"

    def head(name: str) -> LinearHead:
        std = _f32(1.0 / np.sqrt(channels))
        return LinearHead(
            name=name,
            weight=Tensor(rng.standard_normal((config.num_classes, channels)).astype(_f32) * std),
            bias=Tensor.zeros((config.num_classes,)),
            signal="real",
            path="spike" if name == "head.spike" else "accum",
        )

    return Network(config, stem, blocks, head("head.spike"), head("head.accum"))


def fuse_network(net: Network) -> Network:
    """Fold every BatchNorm into its conv, returning an inference-only twin.

    The source network is left untouched.  Fusing an already-fused network is
    refused rather than silently double-applied.
    """
    if net.fused:
        raise ValueError("network is already fused")
    twin = build(net.config, seed=0)
    for src, dst in zip(net.units(), twin.units()):
        dst.conv = fuse_conv_bn(src.conv, src.bn)
        dst.bn = None
    for src_h, dst_h in zip(net.heads(), twin.heads()):
        dst_h.weight = src_h.weight.copy()
        dst_h.bias = src_h.bias.copy()
    twin.fused = True
    return twin


# ---- checkpoints ---------------------------------------------------------


def save_checkpoint(path, net: Network) -> None:
    """Write config + named parameter tensors; see module docstring for layout."""
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "fused": net.fused,
            "config": net.config.to_dict(),
        }
    ).encode("utf-8")
    tensors = net.state_tensors()
    body = bytearray()
    body += struct.pack("<H", CHECKPOINT_VERSION)
    body += struct.pack("<I", len(header))
    body += header
    body += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw))
        body += raw
        body += struct.pack("<B", t.ndim)
        for dim in t.shape:
            body += struct.pack("<I", dim)
        body += t.data.astype("<f4", copy=False).tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path) -> Network:
    """Rebuild a network from a checkpoint, verifying magic, CRC, and names."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, crc_stored = blob[4:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = body[off : off + n]
        off += n
        return chunk

    version = struct.unpack("<H", take(2))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(take(struct.unpack("<I", take(4))[0]).decode("utf-8"))
    config = NetworkConfig.from_dict(header["config"])
    net = build(config, seed=0)
    if header.get("fused"):
        for u in net.units():
            u.conv = ConvParams(
                weight=u.conv.weight,
                bias=Tensor.zeros((u.conv.weight.shape[0],)),
                stride=u.conv.stride,
                padding=u.conv.padding,
            )
            u.bn = None
        net.fused = True

    slots = net.state_tensors()
    n_params = struct.unpack("<I", take(4))[0]
    seen = set()
    for _ in range(n_params):
        name_len = struct.unpack("<H", take(2))[0]
        name = take(name_len).decode("utf-8")
        ndim = struct.unpack("<B", take(1))[0]
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        slot = slots.get(name)
        if slot is None:
            raise CheckpointError(f"{path}: unknown tensor {name!r} for this architecture")
        if slot.shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {shape}, architecture expects {slot.shape}"
            )
        slot.data[...] = data.astype(_f32)
        seen.add(name)
    missing = set(slots) - seen
    if missing:
        raise CheckpointError(f"{path}: checkpoint is missing tensors {sorted(missing)[:4]}")
    return net
