"""FLOPs / memory-access cost of (grouped) pointwise convolutions.

Costs are element counts. For a 1x1 layer on an ``H x W`` map::

    F   = H*W*C_in*C_out / g
    MAC = H*W*(C_in + C_out) + C_in*C_out / g

and for a dense layer MAC >= 2*sqrt(H*W*F) + F/(H*W), with equality exactly
when C_in == C_out.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

DEFAULT_GROUPS = 8


@dataclass(frozen=True)
class LayerCostSpec:
    H: int
    W: int
    C_in: int
    C_out: int
    g: int = 1

    def __post_init__(self):
        for name in ("H", "W", "C_in", "C_out", "g"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.C_in % self.g or self.C_out % self.g:
            raise ValueError(f"g={self.g} must divide C_in={self.C_in} and C_out={self.C_out}")


@dataclass(frozen=True)
class CostReport:
    spec: LayerCostSpec
    flops: int
    mac: int
    bound: float
    at_bound: bool
    default_g: bool = False

    def row(self) -> dict:
        d = asdict(self.spec)
        d.update(flops=self.flops, mac=self.mac, bound=self.bound, at_bound=self.at_bound,
                 default_g=self.default_g)
        return d


def flops(spec: LayerCostSpec) -> int:
    return spec.H * spec.W * spec.C_in * spec.C_out // spec.g


def mac(spec: LayerCostSpec) -> int:
    return spec.H * spec.W * (spec.C_in + spec.C_out) + spec.C_in * spec.C_out // spec.g


def mac_lower_bound(H: int, W: int, F: float) -> float:
    if F <= 0:
        raise ValueError("F must be positive")
    hw = H * W
    return 2.0 * math.sqrt(hw * F) + F / hw


def mac_from_budget(H: int, W: int, C_in: int, F: float, g: int) -> float:
    """MAC of a grouped layer expressed through its FLOPs budget."""
    return H * W * C_in + F * g / C_in + F / (H * W)


def report(spec: LayerCostSpec) -> CostReport:
    f, m = flops(spec), mac(spec)
    b = mac_lower_bound(spec.H, spec.W, f)
    return CostReport(spec, f, m, b, math.isclose(m, b, rel_tol=0.0, abs_tol=1e-9),
                      spec.g == DEFAULT_GROUPS)


def sweep(H: int, W: int, F_budget: int, g_values: Sequence[int] = (1, 2, 4, 8),
          max_channels: int = 1024, c_in: int | None = None) -> list[CostReport]:
    """Every integer (C_in, C_out, g) whose grouped FLOPs equal ``F_budget``, sorted by MAC.

    An empty list means the budget is infeasible.
    """
    hw = H * W
    rows = []
    cins: Iterable[int] = [c_in] if c_in is not None else range(1, max_channels + 1)
    for g in g_values:
        for ci in cins:
            if ci % g:
                continue
            num = F_budget * g
            if num % (hw * ci):
                continue
            co = num // (hw * ci)
            if co < 1 or co > max_channels or co % g:
                continue
            rows.append(report(LayerCostSpec(H, W, ci, co, g)))
    rows.sort(key=lambda r: (r.mac, r.spec.g, r.spec.C_in))
    return rows


COLUMNS = ("H", "W", "C_in", "C_out", "g", "flops", "mac", "bound", "at_bound", "default_g")


def format_table(rows: Sequence[CostReport]) -> str:
    cells = [list(COLUMNS)]
    for r in rows:
        d = r.row()
        cells.append([f"{d[c]:.3f}" if c == "bound" else str(d[c]) for c in COLUMNS])
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells) + "\n"


def write_csv(rows: Sequence[CostReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            d = r.row()
            w.writerow([repr(d[c]) if c == "bound" else d[c] for c in COLUMNS])
