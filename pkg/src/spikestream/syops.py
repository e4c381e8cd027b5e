"""Synaptic-operation counting and the energy model built on it.

Spiking layers pay an accumulate (AC) per spike routed through a synapse;
real-valued layers pay a multiply-accumulate (MAC) per synapse regardless of
the data.  Whether a layer is AC- or MAC-billed is a static, type-level
property fixed at build time (``ConvBnUnit.signal``), never inferred from the
batch that happens to flow through.

Costs use 45nm process figures: 0.9 pJ per AC, 4.6 pJ per MAC.  Dynamic
consumption prices a measured (ac, mac) pair; estimated consumption brackets
a network from its architecture alone, between "no spikes ever" and "every
synapse fires every frame".

Counting is by actual rows processed, so stream layers are billed once per
frame (T rows per sample) and the classifier heads once per sample.  A
counter pass hard-fails if any layer the mode should touch went unrecorded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import check_binary

__all__ = [
    "EnergyModel",
    "EnergyBudget",
    "REFERENCE_BUDGETS",
    "LayerCount",
    "OpCount",
    "SyopsCounter",
    "CountingError",
    "count_ops",
    "dynamic_consumption_mj",
    "estimated_consumption_mj",
    "energy_ratio",
    "verify_reference_budgets",
    "report",
]


class CountingError(RuntimeError):
    """An op-counting pass was incomplete or inconsistent."""


@dataclass(frozen=True)
class EnergyModel:
    """Per-operation energies in picojoules (45nm defaults)."""

    ac_pj: float = 0.9
    mac_pj: float = 4.6


def dynamic_consumption_mj(ac_ops: float, mac_ops: float, model: EnergyModel = EnergyModel()) -> float:
    """Energy in millijoules for a measured operation mix."""
    return (model.ac_pj * ac_ops + model.mac_pj * mac_ops) * 1e-9


def estimated_consumption_mj(
    mac_ops: float, ac_max: float, model: EnergyModel = EnergyModel()
) -> tuple[float, float]:
    """Architecture-only energy bracket: [all silent, every synapse fires]."""
    low = model.mac_pj * mac_ops * 1e-9
    return (low, low + model.ac_pj * ac_max * 1e-9)


def energy_ratio(t_steps: int, firing_rate: float, model: EnergyModel = EnergyModel()) -> float:
    """Spiking-vs-dense cost ratio for one layer: T * rate * (AC/MAC price)."""
    return t_steps * firing_rate * model.ac_pj / model.mac_pj


@dataclass(frozen=True)
class EnergyBudget:
    """A published per-sample operation count with its quoted energy."""

    name: str
    ac_gops: float
    mac_gops: float
    expected_mj: float

    def computed_mj(self, model: EnergyModel = EnergyModel()) -> float:
        return dynamic_consumption_mj(self.ac_gops * 1e9, self.mac_gops * 1e9, model)


REFERENCE_BUDGETS: tuple[EnergyBudget, ...] = (
    EnergyBudget("budget-1", 1.69, 0.12, 2.07),
    EnergyBudget("budget-2", 3.42, 0.12, 3.63),
    EnergyBudget("budget-3", 3.14, 0.12, 3.38),
    EnergyBudget("budget-4", 0.51, 2.75, 13.11),
    EnergyBudget("budget-5", 0.86, 6.46, 30.50),
)


def verify_reference_budgets(
    model: EnergyModel = EnergyModel(), tolerance_mj: float = 0.01
) -> list[dict]:
    """Recompute every reference budget; each row reports computed vs quoted."""
    rows = []
    for b in REFERENCE_BUDGETS:
        got = b.computed_mj(model)
        rows.append(
            {
                "name": b.name,
                "ac_gops": b.ac_gops,
                "mac_gops": b.mac_gops,
                "computed_mj": round(got, 4),
                "expected_mj": b.expected_mj,
                # quoted values are rounded to two decimals, so the boundary
                # case must count as inside the tolerance despite float error
                "ok": bool(abs(got - b.expected_mj) <= tolerance_mj + 1e-9),
            }
        )
    return rows


# ---- counting ------------------------------------------------------------


_coverage_cache: dict[tuple, np.ndarray] = {}


def _coverage(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """How many conv windows cover each input cell (padding cells excluded)."""
    key = (h, w, kh, kw, stride, padding)
    cached = _coverage_cache.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    cov = np.zeros((hp, wp), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            cov[i : i + ho * stride : stride, j : j + wo * stride : stride] += 1
    cov = cov[padding : padding + h, padding : padding + w]
    cov.setflags(write=False)
    _coverage_cache[key] = cov
    return cov


@dataclass
class LayerCount:
    """Raw integer operation totals for one layer, summed over recorded rows."""

    name: str
    path: str
    signal: str
    ac: int = 0
    mac: int = 0
    ac_max: int = 0
    in_elements: int = 0
    in_nonzero: int = 0

    @property
    def input_rate(self) -> float:
        return self.in_nonzero / self.in_elements if self.in_elements else 0.0


@dataclass
class OpCount:
    """A finished count: per-layer raw integers plus per-sample aggregates."""

    layers: tuple[LayerCount, ...]
    n_samples: int

    @property
    def ac_total(self) -> int:
        return sum(l.ac for l in self.layers)

    @property
    def mac_total(self) -> int:
        return sum(l.mac for l in self.layers)

    @property
    def ac_max_total(self) -> int:
        return sum(l.ac_max for l in self.layers)

    @property
    def ac_ops(self) -> float:
        """Accumulates per sample."""
        return self.ac_total / self.n_samples

    @property
    def mac_ops(self) -> float:
        """Multiply-accumulates per sample."""
        return self.mac_total / self.n_samples

    @property
    def ac_max_ops(self) -> float:
        return self.ac_max_total / self.n_samples

    def firing_rates(self) -> dict[str, float]:
        """Input spike rate per AC-billed layer (spikes / input elements)."""
        return {l.name: l.input_rate for l in self.layers if l.signal == "spike"}

    def dynamic_consumption_mj(self, model: EnergyModel = EnergyModel()) -> float:
        return dynamic_consumption_mj(self.ac_ops, self.mac_ops, model)

    def estimated_consumption_mj(self, model: EnergyModel = EnergyModel()) -> tuple[float, float]:
        return estimated_consumption_mj(self.mac_ops, self.ac_max_ops, model)


class SyopsCounter:
    """Accumulates per-layer op counts across forward passes.

    Thread one instance through any number of forwards; each forward ends by
    calling :meth:`finish_pass` with the layer names it was supposed to hit,
    which is where incomplete coverage turns into a hard error.
    """

    def __init__(self) -> None:
        self.layers: dict[str, LayerCount] = {}
        self.n_samples = 0
        self._pass_seen: set[str] = set()

    def _layer(self, name: str, path: str, signal: str) -> LayerCount:
        lc = self.layers.get(name)
        if lc is None:
            lc = LayerCount(name=name, path=path, signal=signal)
            self.layers[name] = lc
        self._pass_seen.add(name)
        return lc

    def record_conv(self, unit, x: np.ndarray) -> None:
        lc = self._layer(unit.name, unit.path, unit.signal)
        rows, cin = x.shape[0], x.shape[1]
        cout, _, kh, kw = unit.conv.weight.shape
        h, w = x.shape[2], x.shape[3]
        cov = _coverage(h, w, kh, kw, unit.conv.stride, unit.conv.padding)
        dense_frame = cov.sum() * cin * cout
        lc.in_elements += x.size
        if unit.signal == "spike":
            check_binary(x, f"input of AC-billed layer {unit.name!r}")
            per_cell = x.sum(axis=(0, 1), dtype=np.int64)
            lc.in_nonzero += int(x.sum(dtype=np.int64))
            lc.ac += int((per_cell * cov).sum()) * cout
            lc.ac_max += int(rows * dense_frame)
        else:
            s, p = unit.conv.stride, unit.conv.padding
            ho, wo = (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1
            lc.in_nonzero += int(np.count_nonzero(x))
            lc.mac += int(rows) * ho * wo * cout * cin * kh * kw

    def record_linear(self, head, x: np.ndarray) -> None:
        lc = self._layer(head.name, head.path, head.signal)
        rows, fin = x.shape
        fout = head.weight.shape[0]
        lc.in_elements += x.size
        lc.in_nonzero += int(np.count_nonzero(x))
        if head.signal == "spike":
            check_binary(x, f"input of AC-billed layer {head.name!r}")
            lc.ac += int(np.sum(x, dtype=np.int64)) * fout
            lc.ac_max += rows * fin * fout
        else:
            lc.mac += rows * fin * fout

    def finish_pass(self, expected_names: list[str], batch_rows: int) -> None:
        expected = set(expected_names)
        missing = expected - self._pass_seen
        extra = self._pass_seen - expected
        if missing:
            raise CountingError(
                f"op count incomplete: layers never recorded this pass: {sorted(missing)}"
            )
        if extra:
            raise CountingError(
                f"op count inconsistent: unexpected layers recorded: {sorted(extra)}"
            )
        self._pass_seen = set()
        self.n_samples += batch_rows

    def result(self) -> OpCount:
        if self._pass_seen:
            raise CountingError("a counting pass was started but never finished")
        if self.n_samples == 0:
            raise CountingError("no completed counting passes")
        return OpCount(layers=tuple(self.layers.values()), n_samples=self.n_samples)


def count_ops(net, x, mode: str = "dsnn") -> OpCount:
    """Count operations for one batch; x is (T, N, C, H, W) or (T*N, C, H, W)."""
    counter = SyopsCounter()
    net.forward(x, mode=mode, counter=counter, training=False)
    return counter.result()


def report(count: OpCount, model: EnergyModel = EnergyModel(), t_steps: int | None = None) -> dict:
    """JSON-ready summary of a finished count."""
    low, high = count.estimated_consumption_mj(model)
    rates = count.firing_rates()
    out = {
        "n_samples": count.n_samples,
        "ac_ops": count.ac_ops,
        "mac_ops": count.mac_ops,
        "ac_max_ops": count.ac_max_ops,
        "dc_mj": count.dynamic_consumption_mj(model),
        "ec_mj": [low, high],
        "firing_rates": rates,
        "per_layer": [
            {
                "name": l.name,
                "path": l.path,
                "signal": l.signal,
                "ac": l.ac,
                "mac": l.mac,
                "ac_max": l.ac_max,
                "input_rate": l.input_rate,
            }
            for l in count.layers
        ],
    }
    if t_steps is not None and rates:
        mean_rate = float(np.mean(list(rates.values())))
        out["mean_input_rate"] = mean_rate
        out["energy_ratio_vs_dense"] = energy_ratio(t_steps, mean_rate, model)
    return out
