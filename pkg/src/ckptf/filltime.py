"""Checkpoint-Fill-Time Law.

The ideal time for a full-memory dump is the ratio of aggregate RAM to
aggregate storage capacity, times the time needed to fill one storage
device at its sustained write bandwidth::

    ckpt_time = (storage_ram / storage_total) * (device_size / device_bandwidth)

All sizes are decimal (1 TB = 10**12 bytes).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable

KB, MB, GB, TB, PB = 10**3, 10**6, 10**9, 10**12, 10**15

_UNITS = {"": 1, "B": 1, "KB": KB, "MB": MB, "GB": GB, "TB": TB, "PB": PB}

DEFAULT_REAL_WORLD_FACTOR = 10.0


@dataclass(frozen=True)
class SystemSpec:
    """Storage-relevant parameters of one machine.

    ``assumed`` names the fields that are estimates rather than published
    figures; they are rendered with a ``??`` marker.
    """

    name: str
    year: int | None
    storage_ram: float
    storage_total: float
    device_size: float
    device_bandwidth: float
    assumed: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        for attr in ("storage_total", "device_size", "device_bandwidth"):
            value = getattr(self, attr)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{self.name}: {attr} must be positive, got {value!r}")
        if not (self.storage_ram >= 0 and math.isfinite(self.storage_ram)):
            raise ValueError(f"{self.name}: storage_ram must be non-negative")

    @property
    def ratio(self) -> float:
        return self.storage_ram / self.storage_total


@dataclass(frozen=True)
class Prediction:
    spec: SystemSpec
    ratio: float
    single_device_fill_time: float  # minutes
    ideal_ckpt_time: float  # minutes
    real_world_estimate: float  # minutes
    flags: tuple[str, ...] = ()


def single_device_fill_time(spec: SystemSpec) -> float:
    """Minutes needed to write one full device at its sustained bandwidth."""
    return spec.device_size / spec.device_bandwidth / 60.0


def ideal_ckpt_time(
    spec: SystemSpec, real_world_factor: float = DEFAULT_REAL_WORLD_FACTOR
) -> Prediction:
    if real_world_factor <= 0:
        raise ValueError("real_world_factor must be positive")
    fill = single_device_fill_time(spec)
    ratio = spec.ratio
    ideal = ratio * fill
    flags = []
    if ratio > 1:
        flags.append("ratio>1")
    return Prediction(
        spec=spec,
        ratio=ratio,
        single_device_fill_time=fill,
        ideal_ckpt_time=ideal,
        real_world_estimate=real_world_factor * ideal,
        flags=tuple(flags),
    )


def partial_dump_time(spec: SystemSpec, dump_bytes: float) -> float:
    """Ideal minutes to write ``dump_bytes`` rather than all of RAM."""
    if not (dump_bytes > 0 and math.isfinite(dump_bytes)):
        raise ValueError("dump_bytes must be positive")
    return dump_bytes / spec.storage_total * single_device_fill_time(spec)


# Published rows. Where a column was not published, the value is chosen to
# reproduce the printed ratio and is marked as assumed.
TABLE1: tuple[SystemSpec, ...] = (
    SystemSpec("Stampede (TACC)", 2014, 205 * TB, 10 * PB, 2 * TB, 100 * MB,
               frozenset({"device_size"})),
    SystemSpec("Jaguar (ORNL)", 2009, 598 * TB, 10.7 * PB, 1 * TB, 100 * MB),
    SystemSpec("Titan (ORNL)", 2012, 710 * TB, 10.7 * PB, 1 * TB, 100 * MB),
    SystemSpec("Sunway TaihuLight", 2016, 1311 * TB, 1311 * TB / 0.05, 3 * TB, 100 * MB,
               frozenset({"storage_total", "ratio", "device_size", "ideal"})),
    SystemSpec("CCR (UB)", 2015, 1.728 * TB, 500 * TB, 4 * TB, 100 * MB),
    SystemSpec("SSD-based 4-core node", 2014, 16 * GB, 128 * GB, 128 * GB, 500 * MB),
    SystemSpec("Theoretical Exascale", 2020, 100 * PB, 1000 * PB, 4 * TB, 4 * GB,
               frozenset({"storage_ram", "storage_total", "ratio", "device_size",
                          "device_bandwidth", "ideal"})),
)

# Ideal times as printed; used only to flag rows that disagree with the law.
PUBLISHED_IDEAL = {
    "Stampede (TACC)": 6.7,
    "Jaguar (ORNL)": 9.4,
    "Titan (ORNL)": 11.0,
    "Sunway TaihuLight": 25.0,
    "CCR (UB)": 2.3,
    "SSD-based 4-core node": 4.3,
    "Theoretical Exascale": 1.6,
}

# Rounding slack of the printed table.
PUBLISHED_TOLERANCE = 0.15


def format_bytes(n: float) -> str:
    for unit, scale in (("PB", PB), ("TB", TB), ("GB", GB), ("MB", MB), ("KB", KB)):
        if n >= scale:
            return f"{n / scale:.4g} {unit}"
    return f"{n:.4g} B"


def _row(pred: Prediction) -> dict:
    spec = pred.spec
    flags = list(pred.flags)
    published = PUBLISHED_IDEAL.get(spec.name)
    if published is not None and abs(published - pred.ideal_ckpt_time) > PUBLISHED_TOLERANCE:
        flags.append("law-inconsistent")
    return {
        "name": spec.name,
        "year": spec.year,
        "storage_ram_bytes": spec.storage_ram,
        "storage_total_bytes": spec.storage_total,
        "ratio": pred.ratio,
        "device_size_bytes": spec.device_size,
        "device_bandwidth_bps": spec.device_bandwidth,
        "single_device_fill_time_min": pred.single_device_fill_time,
        "ideal_ckpt_time_min": pred.ideal_ckpt_time,
        "real_world_estimate_min": pred.real_world_estimate,
        "published_ideal_min": published,
        "assumed": sorted(spec.assumed),
        "flags": flags,
    }


HEADER = (
    "Name", "Year", "Storage_RAM", "Storage_d/S", "Ratio", "Device size",
    "Device bw", "Fill time (min)", "Ideal ckpt (min)", "Real-world (min)", "Flags",
)


def render_table(
    specs: Iterable[SystemSpec], real_world_factor: float = DEFAULT_REAL_WORLD_FACTOR
) -> tuple[str, list[dict]]:
    """Return a plain-text table and one dict per row."""
    rows = [_row(ideal_ckpt_time(s, real_world_factor)) for s in specs]

    def mark(row: dict, key: str, text: str) -> str:
        return text + " ??" if key in row["assumed"] else text

    cells = [list(HEADER)]
    for r in rows:
        flags = list(r["flags"])
        if r["ratio"] > 1:
            flags.append("??")
        cells.append([
            r["name"],
            "" if r["year"] is None else str(r["year"]),
            mark(r, "storage_ram", format_bytes(r["storage_ram_bytes"])),
            mark(r, "storage_total", format_bytes(r["storage_total_bytes"])),
            mark(r, "ratio", f"{r['ratio']:.4g}"),
            mark(r, "device_size", format_bytes(r["device_size_bytes"])),
            mark(r, "device_bandwidth", format_bytes(r["device_bandwidth_bps"]) + "/s"),
            f"{r['single_device_fill_time_min']:.1f}",
            mark(r, "ideal", f"{r['ideal_ckpt_time_min']:.2f}"),
            f"{r['real_world_estimate_min']:.1f}",
            ",".join(flags),
        ])
    widths = [max(len(row[i]) for row in cells) for i in range(len(HEADER))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines), rows


_QUANTITY = re.compile(r"^\s*([0-9.eE+-]+)\s*([A-Za-z]*)\s*(/s)?\s*$")


def parse_quantity(text: str) -> float:
    """Parse ``"205 TB"``, ``"100 MB/s"`` or a bare number of bytes."""
    m = _QUANTITY.match(text.replace(",", ""))
    if not m:
        raise ValueError(f"cannot parse quantity {text!r}")
    number, unit = float(m.group(1)), m.group(2).upper()
    if unit not in _UNITS:
        raise ValueError(f"unknown unit {m.group(2)!r} in {text!r}")
    return number * _UNITS[unit]


def parse_spec_file(text: str) -> list[SystemSpec]:
    """Parse key=value spec text. Blank lines separate machines.

    Keys: name, year, ram, storage, device_size, device_bandwidth. ``#``
    starts a comment.
    """
    specs = []
    block: dict[str, str] = {}

    def flush() -> None:
        if not block:
            return
        missing = {"ram", "storage", "device_size", "device_bandwidth"} - block.keys()
        if missing:
            raise ValueError(f"spec block missing keys: {sorted(missing)}")
        specs.append(SystemSpec(
            name=block.get("name", f"system{len(specs)}"),
            year=int(block["year"]) if "year" in block else None,
            storage_ram=parse_quantity(block["ram"]),
            storage_total=parse_quantity(block["storage"]),
            device_size=parse_quantity(block["device_size"]),
            device_bandwidth=parse_quantity(block["device_bandwidth"]),
        ))
        block.clear()

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            flush()
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in block:
            flush()
        block[key] = value
    flush()
    return specs
