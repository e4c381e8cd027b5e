"""Dual-stream residual blocks.

A block carries two streams through the network.  The spike stream o stays
binary (except in ADD reference blocks) and feeds the synaptic layers; the
accumulation stream a counts, per time step, every body spike emitted at or
below the current depth: a_l = s_l + a_{l-1}.  The body of every block is
Conv-BN-SN-Conv-BN followed by a spiking neuron, so its output s is a binary
map and a stays integer-valued.

Three combine rules connect s with the shortcut:

* ``logical``: o = g(s, o_shortcut) for g in AND / IAND / OR / XOR, applied
  elementwise on the binary lattice;
* ``sn_residual``: o = IF(s + o_shortcut), one more integrate-and-fire
  neuron on the summed drive (IF with threshold in (0, 1] is enforced so the
  identity map exists);
* ``add``: o = s + o_shortcut with no re-binarization.  The result is not a
  spike map, which is the point: these blocks exist as the counting contrast,
  so downstream convolutions get billed at multiply-accumulate cost.

Blocks that downsample shrink both streams first (spike shortcut
Conv-BN(-IF), accumulation shortcut Conv-BN) and combine after, while the
body's first conv carries the same stride.

All time handling is flattened: tensors hold T groups of N rows stacked on
the leading axis, stateless layers process them as one batch, and neurons
receive the group count to roll over.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import (
    BnParams,
    ConvParams,
    GradTape,
    ShapeError,
    Tensor,
    add,
    batchnorm,
    conv2d,
)
from .neuron import NeuronConfig, SurrogateConfig, sn_seq

__all__ = [
    "GFunction",
    "SpikePurityError",
    "DualStreamState",
    "ForwardContext",
    "ProbeLog",
    "ConvBnUnit",
    "Block",
    "g_apply",
    "aap_update",
    "dual_downsample",
    "logical_residual_forward",
    "sn_residual_forward",
    "add_residual_forward",
    "check_binary",
]

_f32 = np.float32


class SpikePurityError(ValueError):
    """An operation that requires binary input received something else."""


def check_binary(data: np.ndarray, what: str) -> None:
    if not np.all((data == 0.0) | (data == 1.0)):
        bad = data[(data != 0.0) & (data != 1.0)]
        raise SpikePurityError(
            f"{what} must be binary spikes; found {bad.size} non-binary values "
            f"(first offender {bad.flat[0]!r})"
        )


class GFunction(Enum):
    """Elementwise connectives for the logical residual, with their
    real-valued arithmetic extensions used for gradients.

    AND = s*x, IAND = (1-s)*x, OR = s + x - s*x, XOR = s(1-x) + x(1-s).
    On {0,1} these reproduce the boolean truth tables exactly; off the
    lattice they are the multilinear interpolations whose partials the
    backward pass uses.
    """

    AND = "and"
    IAND = "iand"
    OR = "or"
    XOR = "xor"

    def arith(self, s: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self is GFunction.AND:
            return s * x
        if self is GFunction.IAND:
            return (1.0 - s) * x
        if self is GFunction.OR:
            return s + x - s * x
        return s + x - 2.0 * s * x

    def partials(self, s: np.ndarray, x: np.ndarray):
        """(d/ds, d/dx) of the arithmetic form, evaluated elementwise."""
        one = np.float32(1.0)
        if self is GFunction.AND:
            return x, s
        if self is GFunction.IAND:
            return -x, one - s
        if self is GFunction.OR:
            return one - x, one - s
        return one - 2.0 * x, one - 2.0 * s


def g_apply(g: GFunction, s: Tensor, x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Apply a logical residual connective elementwise.

    Both operands must be binary; the output is then binary by construction.
    The recorded gradient is the multilinear form's partials frozen at the
    lattice point.
    """
    if s.shape != x.shape:
        raise ShapeError(f"g_apply: operand shapes {s.shape} and {x.shape} differ")
    check_binary(s.data, "g_apply spike operand s")
    check_binary(x.data, "g_apply shortcut operand x")
    out = Tensor(g.arith(s.data, x.data))
    if tape is not None:
        ds, dx = g.partials(s.data, x.data)
        tape.record(out, lambda grad: [(s, grad * ds), (x, grad * dx)])
    return out


@dataclass
class DualStreamState:
    """The pair of streams between blocks; a is None in spike-only mode."""

    o: Tensor
    a: Tensor | None = None


class ProbeLog:
    """Collects named intermediate tensors ('o', 's', 'a') during a forward."""

    def __init__(self) -> None:
        self.records: dict[str, list[tuple[str, Tensor]]] = {"o": [], "s": [], "a": []}

    def note(self, stream: str, name: str, tensor: Tensor | None) -> None:
        if tensor is not None:
            self.records[stream].append((name, tensor))

    def series(self, stream: str) -> list[tuple[str, Tensor]]:
        return self.records[stream]


@dataclass
class ForwardContext:
    """Everything a forward pass threads besides the data itself."""

    t_steps: int
    tape: GradTape | None = None
    training: bool = False
    counter: object | None = None
    probes: ProbeLog | None = None
    check_spikes: bool = True


@dataclass
class ConvBnUnit:
    """A conv with (usually) its batch norm, plus static billing metadata.

    ``signal`` is the type-level kind of this unit's input ("spike" or
    "real"), fixed at build time so operation billing never depends on the
    batch that happens to flow through.  ``path`` says which stream the unit
    serves.  ``bn`` is None once the unit has been fused.
    """

    name: str
    conv: ConvParams
    bn: BnParams | None
    signal: str
    path: str
    in_hw: tuple[int, int] = (0, 0)
    out_hw: tuple[int, int] = (0, 0)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if ctx.counter is not None:
            ctx.counter.record_conv(self, x.data)
        y = conv2d(x, self.conv, ctx.tape)
        if self.bn is not None:
            y = batchnorm(y, self.bn, ctx.training, ctx.tape)
        return y


def aap_update(a_prev: Tensor, s: Tensor, tape: GradTape | None = None) -> Tensor:
    """Advance the accumulation stream: a_l = s_l + a_{l-1}, elementwise."""
    return add(s, a_prev, tape)


class Block:
    """One dual-stream block; see the module docstring for the layout."""

    def __init__(
        self,
        name: str,
        kind: str,
        conv1: ConvBnUnit,
        conv2: ConvBnUnit,
        neuron_cfg: NeuronConfig,
        sg: SurrogateConfig,
        g: GFunction | None = None,
        residual_cfg: NeuronConfig | None = None,
        down_spike: ConvBnUnit | None = None,
        down_accum: ConvBnUnit | None = None,
        down_sn: bool = True,
    ) -> None:
        if kind not in ("logical", "sn_residual", "add"):
            raise ValueError(f"unknown block kind {kind!r}")
        if kind == "logical" and g is None:
            raise ValueError("logical blocks need a g function")
        if kind == "sn_residual":
            if residual_cfg is None:
                residual_cfg = NeuronConfig(kind="if", v_threshold=1.0)
            if residual_cfg.kind != "if" or not (0.0 < residual_cfg.v_threshold <= 1.0):
                raise ValueError(
                    "residual-connection neurons must be IF with threshold in (0, 1], "
                    f"got kind={residual_cfg.kind!r} threshold={residual_cfg.v_threshold}"
                )
        if (down_spike is None) != (down_accum is None):
            raise ValueError(f"block {name}: downsample must cover both streams or neither")
        self.name = name
        self.kind = kind
        self.g = g
        self.conv1 = conv1
        self.conv2 = conv2
        self.neuron_cfg = neuron_cfg
        self.residual_cfg = residual_cfg or NeuronConfig(kind="if", v_threshold=1.0)
        self.sg = sg
        self.down_spike = down_spike
        self.down_accum = down_accum
        self.down_sn = down_sn

    @property
    def downsamples(self) -> bool:
        return self.down_spike is not None

    def body(self, o_in: Tensor, ctx: ForwardContext) -> Tensor:
        """Conv-BN-SN-Conv-BN-SN: the learned residual mapping's spike map."""
        z = self.conv1.forward(o_in, ctx)
        z = sn_seq(z, ctx.t_steps, self.neuron_cfg, self.sg, ctx.tape)
        z = self.conv2.forward(z, ctx)
        return sn_seq(z, ctx.t_steps, self.neuron_cfg, self.sg, ctx.tape)

    def forward(self, state: DualStreamState, ctx: ForwardContext) -> DualStreamState:
        if self.kind == "logical":
            return logical_residual_forward(self, state, ctx)
        if self.kind == "sn_residual":
            return sn_residual_forward(self, state, ctx)
        return add_residual_forward(self, state, ctx)

    def units(self) -> list[ConvBnUnit]:
        out = [self.conv1, self.conv2]
        if self.down_spike is not None:
            out.append(self.down_spike)
        if self.down_accum is not None:
            out.append(self.down_accum)
        return out


def dual_downsample(block: Block, state: DualStreamState, ctx: ForwardContext) -> DualStreamState:
    """Shrink both streams through their own Conv-BN branches.

    The spike branch optionally re-binarizes through an IF neuron (the
    default); the accumulation branch never does, it is a real-valued
    projection of the running count.
    """
    o = block.down_spike.forward(state.o, ctx)
    if block.down_sn:
        o = sn_seq(o, ctx.t_steps, block.residual_cfg, block.sg, ctx.tape)
    a = None
    if state.a is not None:
        a = block.down_accum.forward(state.a, ctx)
    return DualStreamState(o=o, a=a)


def _advance(block: Block, state: DualStreamState, ctx: ForwardContext):
    """Body spikes plus the (possibly downsampled) shortcut state."""
    s = block.body(state.o, ctx)
    if block.downsamples:
        state = dual_downsample(block, state, ctx)
    return s, state


def _finish(block: Block, s: Tensor, o: Tensor, shortcut: DualStreamState, ctx: ForwardContext) -> DualStreamState:
    a = None
    if shortcut.a is not None:
        a = aap_update(shortcut.a, s, ctx.tape)
    if ctx.probes is not None:
        ctx.probes.note("s", block.name, s)
        ctx.probes.note("o", block.name, o)
        ctx.probes.note("a", block.name, a)
    return DualStreamState(o=o, a=a)


def logical_residual_forward(block: Block, state: DualStreamState, ctx: ForwardContext) -> DualStreamState:
    s, shortcut = _advance(block, state, ctx)
    o = g_apply(block.g, s, shortcut.o, ctx.tape)
    return _finish(block, s, o, shortcut, ctx)


def sn_residual_forward(block: Block, state: DualStreamState, ctx: ForwardContext) -> DualStreamState:
    s, shortcut = _advance(block, state, ctx)
    drive = add(s, shortcut.o, ctx.tape)
    o = sn_seq(drive, ctx.t_steps, block.residual_cfg, block.sg, ctx.tape)
    return _finish(block, s, o, shortcut, ctx)


def add_residual_forward(block: Block, state: DualStreamState, ctx: ForwardContext) -> DualStreamState:
    s, shortcut = _advance(block, state, ctx)
    o = add(s, shortcut.o, ctx.tape)
    return _finish(block, s, o, shortcut, ctx)
