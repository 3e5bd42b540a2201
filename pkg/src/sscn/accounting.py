"""FLOP and memory accounting for sparse layers.

Convolution cost is counted from the rule book: every ``(input, output)``
pair is one ``m x n`` vector-matrix multiply-add, so a site with ``a``
active inputs costs ``a*m*n`` multiply-adds and ``n`` output values of
memory, and inactive sites cost nothing.  Headline numbers are
multiply-adds; ``raw=True`` doubles them to count multiplies and adds
separately.
"""
import csv
import io
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .rulebook import RuleBook

CONV_KINDS = ("SSC", "SC", "DC")
LINEAR_COST_KINDS = ("BN", "ReLU", "MP", "AP", "NN")


def tally(rb: RuleBook, m, n, raw=False):
    """``(flops, memory)`` of one convolution executed with ``rb``."""
    madds = m * n * rb.n_pairs
    return (2 * madds if raw else madds), n * rb.a_out


def dense_flops(rb: RuleBook, m, n, raw=False):
    """Cost of the dense convolution with the same geometry over the full grid."""
    if rb.kind == "DC":
        coarse = rb.in_spatial_size
    else:
        coarse = rb.out_spatial_size
    madds = rb.geometry.volume * m * n * rb.batch_size * int(np.prod(coarse))
    return 2 * madds if raw else madds


def sc_equivalent_pairs(rb: RuleBook):
    """Rule pairs an SC layer with the same padded geometry would use.

    For a submanifold rule book this counts every in-grid output a given
    active input can reach, active or not; for other kinds it is the rule
    book's own pair count.
    """
    if rb.kind != "SSC" or rb.a_in == 0:
        return rb.n_pairs
    grid = (rb.batch_size,) + tuple(rb.in_spatial_size)
    coords = np.stack(np.unravel_index(rb.in_index.keys_in_order, grid), axis=1)[:, 1:]
    c = (rb.geometry.f - 1) // 2
    upper = np.array(rb.in_spatial_size)
    total = 0
    for off in rb.geometry.offsets:
        y = coords + c - off
        total += int(np.all((y >= 0) & (y < upper), axis=1).sum())
    return total


@dataclass
class LayerCost:
    name: str
    kind: str
    m: int
    n: int
    a_in: int
    a_out: int
    pairs: int
    flops: int
    memory: int
    dense_flops: int = 0
    sc_flops: int = 0


@dataclass
class CostReport:
    per_layer: List[LayerCost] = field(default_factory=list)
    raw: bool = False

    def _sum(self, attr, kinds):
        return sum(getattr(c, attr) for c in self.per_layer if c.kind in kinds)

    @property
    def conv_flops(self):
        """Headline total: convolutions and per-site hidden layers, head excluded."""
        return self._sum("flops", CONV_KINDS + ("Linear", "MLP"))

    @property
    def head_flops(self):
        return self._sum("flops", ("Head",))

    @property
    def linear_op_flops(self):
        return self._sum("flops", LINEAR_COST_KINDS)

    @property
    def memory(self):
        return self._sum("memory", CONV_KINDS + ("Linear", "MLP"))

    @property
    def dense_equivalent_flops(self):
        return self._sum("dense_flops", CONV_KINDS)

    @property
    def totals(self):
        return {"flops": self.conv_flops, "head_flops": self.head_flops,
                "linear_op_flops": self.linear_op_flops, "memory": self.memory,
                "dense_equivalent_flops": self.dense_equivalent_flops}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "m", "n", "a_in", "a_out", "pairs", "flops", "memory",
                    "dense_flops", "sc_flops"])
        for c in self.per_layer:
            w.writerow([c.name, c.kind, c.m, c.n, c.a_in, c.a_out, c.pairs, c.flops, c.memory,
                        c.dense_flops, c.sc_flops])
        for key, value in self.totals.items():
            w.writerow([f"total:{key}", "", "", "", "", "", "", value, "", "", ""])
        return buf.getvalue()

    def to_text(self):
        header = ("layer", "kind", "m", "n", "a_out", "pairs", "flops", "memory", "dense_flops")
        rows = [(c.name, c.kind, c.m, c.n, c.a_out, c.pairs, c.flops, c.memory, c.dense_flops)
                for c in self.per_layer]
        cells = [tuple(str(v) for v in r) for r in [header] + rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
        lines = []
        for r in cells:
            lines.append("  ".join(v.ljust(w) if i < 2 else v.rjust(w)
                                   for i, (v, w) in enumerate(zip(r, widths))))
        unit = "flops" if self.raw else "multiply-adds"
        lines.append("")
        lines.append(f"total ({unit}, head excluded): {self.conv_flops}")
        lines.append(f"classification head: {self.head_flops}")
        lines.append(f"pooling/bn/relu values: {self.linear_op_flops}")
        lines.append(f"memory (values): {self.memory}")
        lines.append(f"dense equivalent: {self.dense_equivalent_flops}")
        return "\n".join(lines)


def report_from_records(records, raw=False):
    rep = CostReport(raw=raw)
    for r in records:
        if r.kind in CONV_KINDS:
            flops, mem = tally(r.rulebook, r.m, r.n, raw)
            pairs = r.rulebook.n_pairs
            dflops = dense_flops(r.rulebook, r.m, r.n, raw)
            sc = r.m * r.n * sc_equivalent_pairs(r.rulebook) * (2 if raw else 1)
        elif r.kind in ("Linear", "MLP", "Head"):
            pairs = r.a_out
            flops = r.m * r.n * r.a_out * (2 if raw else 1)
            mem, dflops, sc = r.n * r.a_out, 0, 0
        else:
            pairs = r.rulebook.n_pairs if r.rulebook is not None else 0
            flops = mem = r.a_out * r.n
            dflops = sc = 0
        rep.per_layer.append(LayerCost(r.name, r.kind, r.m, r.n, r.a_in, r.a_out, pairs,
                                       flops, mem, dflops, sc))
    return rep


def network_cost(net, sample, raw=False):
    """Run one inference pass and tally every layer it executed."""
    net.forward(sample, train=False)
    return report_from_records(net.last_ctx.records, raw)
