"""Synthetic per-device energy and power model.

A device is described by a handful of coefficients (joules per byte sent,
joules per FLOP, awake-idle watts, ...). From those and a model architecture
we derive, for every candidate split point, the per-epoch energy split into
communication, computation and awake-idle parts plus the peak power draw.
Sleep time costs nothing, so it never appears.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from splitpriv.nn import LayeredModel
from splitpriv.storage import header_lines


@dataclass
class DeviceParams:
    joules_per_byte: float = 2.0e-7
    joules_per_flop: float = 1.0e-9
    idle_watts: float = 1.8
    comm_watts: float = 2.5
    base_watts: float = 2.0
    compute_watts: float = 6.0  # peak rise when the whole model runs on the device
    p_max: float = 10.0
    latency_s: float = 0.002  # awake wait per batch while the server works
    server_seconds_per_flop: float = 2.0e-11
    bytes_per_element: int = 8

    def validate(self):
        for name in ("joules_per_byte", "joules_per_flop", "idle_watts", "comm_watts",
                     "base_watts", "compute_watts", "p_max", "server_seconds_per_flop"):
            if getattr(self, name) <= 0:
                raise ValueError(f"device parameter {name} must be positive")
        if self.latency_s < 0:
            raise ValueError("latency_s must be non-negative")
        if self.bytes_per_element < 1:
            raise ValueError("bytes_per_element must be >= 1")
        return self


@dataclass
class EnergyPowerProfile:
    """Per-split-point energy (joules per epoch) and peak power (watts).

    Arrays are indexed by ``s - 1`` for split points ``1..s_max``.
    """

    e_comm: np.ndarray
    e_comp: np.ndarray
    e_idle: np.ndarray
    p_peak: np.ndarray
    p_max: float
    boundary_bytes: np.ndarray | None = None  # per batch
    batches_per_epoch: int = 1
    joules_per_byte: float | None = None
    comm_watts: float = 2.5
    idle_watts: float = 1.8

    def __post_init__(self):
        for name in ("e_comm", "e_comp", "e_idle", "p_peak"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(arr < 0):
                raise ValueError(f"{name} must be non-negative")
            setattr(self, name, arr)
        n = len(self.e_comm)
        if not (len(self.e_comp) == len(self.e_idle) == len(self.p_peak) == n) or n == 0:
            raise ValueError("profile arrays must be non-empty and of equal length")
        if self.boundary_bytes is not None:
            self.boundary_bytes = np.asarray(self.boundary_bytes, dtype=np.float64)

    @property
    def s_max(self) -> int:
        return len(self.e_comm)

    @property
    def e_total(self) -> np.ndarray:
        return self.e_comm + self.e_comp + self.e_idle

    @classmethod
    def from_totals(cls, e_total, p_peak, p_max) -> "EnergyPowerProfile":
        """Fixture helper: everything booked as compute energy."""
        e_total = np.asarray(e_total, dtype=np.float64)
        zeros = np.zeros_like(e_total)
        return cls(zeros, e_total, zeros.copy(), p_peak, p_max)


def prefix_flops(model: LayeredModel) -> np.ndarray:
    """Cumulative forward FLOPs per sample after each layer (index ``s - 1``)."""
    return np.cumsum([layer.flops() for layer in model.layers]).astype(np.float64)


def boundary_elements(model: LayeredModel) -> np.ndarray:
    return np.array([math.prod(layer.out_shape) for layer in model.layers], dtype=np.float64)


def build_energy_profile(device: DeviceParams, arch: LayeredModel, s_max: int,
                         batch_size: int = 32, batches_per_epoch: int = 1) -> EnergyPowerProfile:
    """Evaluate the synthetic device model at split points ``1..s_max``.

    Per epoch of ``batches_per_epoch`` batches:

    - comm: ``joules_per_byte * boundary_bytes(s) * batches``
    - compute: ``joules_per_flop * prefix_flops(s) * batch_size * batches``
    - idle (awake, waiting on the server): ``idle_watts * (latency + server time of the suffix) * batches``
    - peak power: ``base_watts + compute_watts * prefix share of total FLOPs``
    """
    device.validate()
    if not 1 <= s_max <= arch.k:
        raise ValueError(f"s_max={s_max} outside 1..{arch.k}")
    if batch_size < 1 or batches_per_epoch < 1:
        raise ValueError("batch_size and batches_per_epoch must be positive")
    cum = prefix_flops(arch)
    total = cum[-1]
    bbytes = boundary_elements(arch)[:s_max] * device.bytes_per_element * batch_size
    pre = cum[:s_max]
    suffix = total - pre
    e_comm = device.joules_per_byte * bbytes * batches_per_epoch
    e_comp = device.joules_per_flop * pre * batch_size * batches_per_epoch
    server_s = device.latency_s + device.server_seconds_per_flop * suffix * batch_size
    e_idle = device.idle_watts * server_s * batches_per_epoch
    p_peak = device.base_watts + device.compute_watts * pre / total
    return EnergyPowerProfile(
        e_comm=e_comm, e_comp=e_comp, e_idle=e_idle, p_peak=p_peak, p_max=device.p_max,
        boundary_bytes=bbytes, batches_per_epoch=batches_per_epoch,
        joules_per_byte=device.joules_per_byte, comm_watts=device.comm_watts,
        idle_watts=device.idle_watts,
    )


@dataclass(frozen=True)
class EnergyEvent:
    client_id: int
    epoch: int
    kind: str  # "comm" | "compute" | "idle-awake"
    joules: float
    watts: float


def account_turn_energy(profile: EnergyPowerProfile, s: int, boundary_bytes: float, batches: int,
                        client_id: int = 0, epoch: int = 0) -> list[EnergyEvent]:
    """Energy events for one client turn of ``batches`` batches at split ``s``.

    Compute and idle energy are the profile's per-epoch figures prorated per
    batch; comm energy is charged on the bytes actually sent. One full epoch
    at the profile's nominal byte count therefore sums to ``E_total(s)``.
    """
    if batches <= 0:
        return []
    if not 1 <= s <= profile.s_max:
        raise ValueError(f"split point {s} not covered by profile (1..{profile.s_max})")
    jpb = profile.joules_per_byte
    if jpb is None:
        # fixture profiles carry no coefficient; recover it from the table
        nominal = profile.boundary_bytes[s - 1] * profile.batches_per_epoch if profile.boundary_bytes is not None else 0
        jpb = profile.e_comm[s - 1] / nominal if nominal else 0.0
    peak = float(profile.p_peak[s - 1])
    frac = batches / profile.batches_per_epoch
    return [
        EnergyEvent(client_id, epoch, "comm", float(jpb * boundary_bytes * batches), min(profile.comm_watts, peak)),
        EnergyEvent(client_id, epoch, "compute", float(profile.e_comp[s - 1] * frac), peak),
        EnergyEvent(client_id, epoch, "idle-awake", float(profile.e_idle[s - 1] * frac), min(profile.idle_watts, peak)),
    ]


def upload_event(profile: EnergyPowerProfile, n_bytes: float, client_id: int, epoch: int) -> EnergyEvent:
    """Model upload at aggregation time (awake, radio on)."""
    jpb = profile.joules_per_byte or 0.0
    return EnergyEvent(client_id, epoch, "comm", float(jpb * n_bytes), min(profile.comm_watts, float(profile.p_peak.max())))


def write_profile(path, profile: EnergyPowerProfile, header: dict | None = None) -> None:
    lines = header_lines(header) + [f"# P_max\t{profile.p_max!r}",
             f"# batches_per_epoch\t{profile.batches_per_epoch}",
             f"# joules_per_byte\t{profile.joules_per_byte!r}",
             f"# comm_watts\t{profile.comm_watts!r}",
             f"# idle_watts\t{profile.idle_watts!r}",
             "s\tE_comm\tE_comp\tE_idle\tE_total\tp_peak\tboundary_bytes"]
    bb = profile.boundary_bytes if profile.boundary_bytes is not None else np.zeros(profile.s_max)
    for i in range(profile.s_max):
        row = [profile.e_comm[i], profile.e_comp[i], profile.e_idle[i], profile.e_total[i], profile.p_peak[i], bb[i]]
        lines.append("\t".join([str(i + 1)] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_profile(path) -> EnergyPowerProfile:
    meta, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, value = line[1:].strip().split("\t")
            meta[key] = value
        elif line.startswith("s\t") or not line.strip():
            continue
        else:
            rows.append([float(v) for v in line.split("\t")[1:]])
    if not rows or "P_max" not in meta:
        raise ValueError(f"{path}: not an energy profile table")
    arr = np.array(rows)
    jpb = meta.get("joules_per_byte", "None")
    return EnergyPowerProfile(
        e_comm=arr[:, 0], e_comp=arr[:, 1], e_idle=arr[:, 2], p_peak=arr[:, 4],
        p_max=float(meta["P_max"]), boundary_bytes=arr[:, 5],
        batches_per_epoch=int(meta.get("batches_per_epoch", 1)),
        joules_per_byte=None if jpb == "None" else float(jpb),
        comm_watts=float(meta.get("comm_watts", 2.5)),
        idle_watts=float(meta.get("idle_watts", 1.8)),
    )
