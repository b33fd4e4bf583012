"""Analytic FLOPs accounting by shape propagation (1 MAC = 2 FLOPs)."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field


@dataclass
class FlopsReport:
    duration_s: float = 0.0
    entries: list = field(default_factory=list)  # (layer name, kind, flops)

    def add(self, name: str, kind: str, flops) -> None:
        flops = int(flops)
        if flops < 0:
            raise ValueError(f"negative FLOPs for {name}")
        self.entries.append((name, kind, flops))

    @property
    def total(self) -> int:
        return sum(f for _, _, f in self.entries)

    def by_kind(self) -> dict:
        out = defaultdict(int)
        for _, kind, f in self.entries:
            out[kind] += f
        return dict(out)

    def by_prefix(self, depth: int = 1) -> dict:
        out = defaultdict(int)
        for name, _, f in self.entries:
            out[".".join(name.split(".")[:depth])] += f
        return dict(out)

    def table(self) -> str:
        lines = [f"duration_s\t{self.duration_s:g}"]
        for mod, f in self.by_prefix().items():
            lines.append(f"{mod}\t{f}")
        for kind, f in sorted(self.by_kind().items()):
            lines.append(f"kind:{kind}\t{f}")
        lines.append(f"total\t{self.total}\t({self.total / 1e9:.3f} GFLOPs)")
        return "\n".join(lines)
