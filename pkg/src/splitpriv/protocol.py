"""Sequential split learning with per-client split points and noise levels.

Each client owns layers ``1..s_i`` of the model and trains against the
server, which owns the rest. Clients take turns in ascending id order. A turn
runs the client's prefix, adds noise to the boundary activation, and hands
the server only that activation and the labels (``BoundaryMessage``). Every
``R`` epochs the present clients upload their prefixes and the server
rebuilds layers ``1..s_max`` of the global model as the plain average of the
clients' prefixes, each padded out to depth ``s_max`` with the server's own
copy of the missing layers. Aggregated layers are not sent back.

Server-side layers ``s_max+1..k`` are shared by every client. Layers between
a client's split point and ``s_max`` are trained on a per-split-point shadow
copy; shadows are averaged into the global model and dropped at each
aggregation, and rebuilt lazily from the new global model afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from splitpriv import nn
from splitpriv.data import Dataset
from splitpriv.energy import EnergyEvent, EnergyPowerProfile, account_turn_energy, upload_event
from splitpriv.errors import ProtocolError
from splitpriv.rng import RngStream

logger = logging.getLogger(__name__)

BYTES_PER_VALUE = 8
DEFAULT_AGGREGATION_PERIOD = 5
NOISE_FAMILIES = ("laplace", "gaussian")


def inject_noise(z: np.ndarray, sigma: float, rng: RngStream | np.random.Generator | None,
                 family: str = "laplace") -> np.ndarray:
    """``z + eta`` with zero-mean i.i.d. noise of variance ``sigma**2``.

    Laplace noise uses scale ``sigma / sqrt(2)``. ``sigma == 0`` returns an
    unchanged copy without touching the generator.
    """
    if sigma < 0:
        raise ValueError("noise level must be non-negative")
    if sigma == 0:
        return np.array(z, dtype=np.float64, copy=True)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return z + sigma * unit_noise(gen, np.shape(z), family)


def unit_noise(gen: np.random.Generator, shape, family: str = "laplace") -> np.ndarray:
    """Unit-variance noise; scaling it by ``sigma`` gives variance ``sigma**2``."""
    if family == "laplace":
        return gen.laplace(0.0, 1.0 / math.sqrt(2.0), size=shape)
    if family == "gaussian":
        return gen.standard_normal(size=shape)
    raise ValueError(f"unknown noise family {family!r}; expected one of {NOISE_FAMILIES}")


@dataclass(frozen=True)
class BoundaryMessage:
    """Everything a client sends the server during a turn. Raw inputs are not part of it."""

    representation: np.ndarray
    labels: np.ndarray
    split_point: int


@dataclass
class ClientState:
    client_id: int
    prefix: nn.LayeredModel
    split_point: int
    noise_level: float
    alpha: float
    dataset: Dataset
    profile: EnergyPowerProfile | None = None
    steps: int = 0

    def __post_init__(self):
        if self.prefix.k != self.split_point:
            raise ValueError(f"client {self.client_id}: prefix has {self.prefix.k} layers, split point {self.split_point}")
        if len(self.dataset) < 1:
            raise ValueError(f"client {self.client_id}: empty dataset")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"client {self.client_id}: alpha must lie in [0, 1]")
        if self.noise_level < 0:
            raise ValueError(f"client {self.client_id}: negative noise level")


@dataclass
class ServerState:
    global_model: nn.LayeredModel
    s_max: int
    aggregation_period: int = DEFAULT_AGGREGATION_PERIOD
    noise_table: object = None
    a_min: float = 0.0
    shadows: dict[int, list[nn.Layer]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= self.s_max <= self.global_model.k:
            raise ValueError(f"s_max={self.s_max} outside 1..{self.global_model.k}")
        if self.aggregation_period < 1:
            raise ValueError("aggregation period must be positive")

    def suffix_view(self, s: int) -> nn.LayeredModel:
        """Server half for split ``s``: shadow layers ``s+1..s_max`` then shared layers."""
        if not 1 <= s <= self.s_max:
            raise ProtocolError(f"split point {s} outside 1..{self.s_max}")
        if s not in self.shadows:
            self.shadows[s] = [layer.copy() for layer in self.global_model.layers[s:self.s_max]]
        layers = self.shadows[s] + self.global_model.layers[self.s_max:]
        return nn.LayeredModel(layers, self.global_model.shape_at(s))

    def server_step(self, msg: BoundaryMessage, lr: float, l2_lambda: float = 0.0):
        """Forward the suffix, take one SGD step on it, return ``(boundary_grad, loss, logits)``."""
        suffix = self.suffix_view(msg.split_point)
        expected = self.global_model.shape_at(msg.split_point)
        if tuple(msg.representation.shape[1:]) != tuple(expected):
            raise ProtocolError(
                f"representation shape {msg.representation.shape[1:]} does not match server input {expected}")
        logits, tape = nn.forward(suffix, msg.representation, record_tape=True, train=True)
        loss, glogits = nn.cross_entropy(logits, msg.labels)
        packet = nn.backward(suffix, tape, glogits)
        nn.sgd_step(suffix, packet.param_grads, lr, l2_lambda)
        return packet.boundary_grad, loss, logits

    def reconciled_global(self) -> nn.LayeredModel:
        """Copy of the global model with shadow layers averaged in."""
        model = self.global_model.copy()
        for j in range(self.s_max):
            sources = [layers[j - s] for s, layers in sorted(self.shadows.items()) if s <= j]
            if sources:
                model.layers[j] = mean_layer(model.layers[j], sources)
        return model

    def reconcile(self) -> None:
        self.global_model = self.reconciled_global()
        self.shadows.clear()


def mean_layer(template: nn.Layer, sources: Sequence[nn.Layer]) -> nn.Layer:
    """Copy of ``template`` whose parameters and buffers are the mean over ``sources``.

    Summation runs in ``sources`` order and divides once at the end.
    """
    out = template.copy()
    n = len(sources)
    for attr in ("params", "buffers"):
        arrays = getattr(out, attr)
        for i in range(len(arrays)):
            acc = np.zeros_like(arrays[i])
            for src in sources:
                acc += getattr(src, attr)[i]
            arrays[i] = acc / n
    return out


def init_client(client_id: int, global_model: nn.LayeredModel, split_point: int, dataset: Dataset,
                noise_level: float = 0.0, alpha: float = 0.5,
                profile: EnergyPowerProfile | None = None) -> ClientState:
    """Give a client its own copy of layers ``1..s`` of the global model."""
    prefix = nn.LayeredModel([layer.copy() for layer in global_model.layers[:split_point]], global_model.input_shape)
    return ClientState(client_id, prefix, split_point, noise_level, alpha, dataset, profile)


def set_split_point(c: ClientState, global_model: nn.LayeredModel, s: int) -> None:
    """Re-cut a client at ``s``, keeping its own layers where it has them."""
    own = c.prefix.layers[:s]
    extra = [layer.copy() for layer in global_model.layers[len(own):s]]
    c.prefix = nn.LayeredModel(own + extra, global_model.input_shape)
    c.split_point = s


@dataclass
class TurnMetrics:
    loss: float
    boundary_bytes: int
    client_flops: int
    samples: int


def client_turn(c: ClientState, srv: ServerState, batch, rng, lr: float = 0.05, l2_lambda: float = 0.0,
                noise_family: str = "laplace"):
    """One minibatch of split training. Returns ``(c, srv, TurnMetrics)``; states are updated in place."""
    x, y = batch
    if c.prefix.k != c.split_point:
        raise ProtocolError(f"client {c.client_id} prefix depth {c.prefix.k} != split point {c.split_point}")
    z, tape = nn.forward(c.prefix, x, record_tape=True, train=True)
    z_sent = inject_noise(z, c.noise_level, rng, noise_family)
    msg = BoundaryMessage(representation=z_sent, labels=np.asarray(y), split_point=c.split_point)
    boundary_grad, loss, _ = srv.server_step(msg, lr, l2_lambda)
    packet = nn.backward(c.prefix, tape, boundary_grad)
    nn.sgd_step(c.prefix, packet.param_grads, lr, l2_lambda)
    c.steps += 1
    flops = int(sum(layer.flops() for layer in c.prefix.layers)) * len(y)
    return c, srv, TurnMetrics(loss, z_sent.size * BYTES_PER_VALUE, flops, len(y))


def aggregated_prefix_layers(global_model: nn.LayeredModel, clients: Sequence[ClientState], s_max: int) -> list[nn.Layer]:
    """Layers ``1..s_max`` after averaging padded client prefixes (no mutation)."""
    out = []
    for j in range(s_max):
        sources = [c.prefix.layers[j] if j < c.split_point else global_model.layers[j] for c in clients]
        out.append(mean_layer(global_model.layers[j], sources))
    return out


def aggregate(srv: ServerState, clients: Sequence[ClientState]) -> ServerState:
    """Rebuild global layers ``1..s_max`` from the clients' prefixes; deeper layers are kept."""
    clients = list(clients)
    if not clients:
        srv.warnings.append("aggregate called with no clients; global model unchanged")
        logger.warning("aggregate called with no clients")
        return srv
    for c in clients:
        if c.split_point > srv.s_max:
            raise ProtocolError(f"client {c.client_id} split point {c.split_point} exceeds s_max={srv.s_max}")
    srv.reconcile()
    new_layers = aggregated_prefix_layers(srv.global_model, clients, srv.s_max)
    srv.global_model = nn.LayeredModel(new_layers + srv.global_model.layers[srv.s_max:], srv.global_model.input_shape)
    return srv


def composite_model(srv: ServerState, clients: Sequence[ClientState]) -> nn.LayeredModel:
    """The model the server would hold right after aggregating ``clients`` (a copy)."""
    base = srv.reconciled_global()
    clients = list(clients)
    if not clients:
        return base
    layers = aggregated_prefix_layers(base, clients, srv.s_max)
    return nn.LayeredModel(layers + base.layers[srv.s_max:], base.input_shape)


def evaluate_global(srv: ServerState, clients: Sequence[ClientState], test_set: Dataset,
                    batch_size: int = 512) -> float:
    """Accuracy of the aggregated composite model on ``test_set``."""
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    model = composite_model(srv, clients)
    pred = nn.predict(model, test_set.x, batch_size)
    return float(np.mean(pred == test_set.y))


@dataclass
class AttendanceSchedule:
    """Which clients are connected in each epoch: ``(start, end, ids)`` with inclusive epochs."""

    ranges: list[tuple[int, int, tuple[int, ...]]]

    def present(self, epoch: int) -> set[int]:
        ids: set[int] = set()
        for start, end, members in self.ranges:
            if start <= epoch <= end:
                ids.update(members)
        return ids

    def validate(self, roster: Iterable[int]) -> "AttendanceSchedule":
        roster = set(roster)
        for start, end, members in self.ranges:
            if start < 1 or end < start:
                raise ValueError(f"bad epoch range {start}..{end}")
            unknown = set(members) - roster
            if unknown:
                raise ValueError(f"schedule names unknown clients {sorted(unknown)}")
        return self

    @classmethod
    def parse(cls, text: str) -> "AttendanceSchedule":
        ranges = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"schedule line {lineno}: expected 'epoch_start epoch_end client_ids...'")
            try:
                start, end, *ids = (int(p) for p in parts)
            except ValueError as exc:
                raise ValueError(f"schedule line {lineno}: {exc}") from None
            ranges.append((start, end, tuple(ids)))
        return cls(ranges)

    @classmethod
    def load(cls, path) -> "AttendanceSchedule":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        return "".join(f"{s} {e} {' '.join(map(str, ids))}\n".replace(" \n", "\n") for s, e, ids in self.ranges)


@dataclass
class EpochRecord:
    epoch: int
    accuracy: float
    clients: dict[int, dict[str, float]]
    aggregated: bool
    present: list[int]
    mean_loss: float | None = None

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "A_t": self.accuracy,
            "aggregated": self.aggregated,
            "present": self.present,
            "mean_loss": self.mean_loss,
            "clients": {str(cid): v for cid, v in sorted(self.clients.items())},
        }


@dataclass
class TrainingRecord:
    epochs: list[EpochRecord] = field(default_factory=list)
    events: list[EnergyEvent] = field(default_factory=list)

    @property
    def accuracies(self) -> list[float]:
        return [e.accuracy for e in self.epochs]

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].accuracy if self.epochs else float("nan")

    def client_energy(self, client_id: int) -> float:
        return sum(e.joules for e in self.events if e.client_id == client_id)

    def mean_epoch_energy(self) -> float:
        """Mean over epochs of the energy used by all devices in that epoch."""
        if not self.epochs:
            return 0.0
        total = sum(v["comm_J"] + v["comp_J"] + v["idle_J"] for e in self.epochs for v in e.clients.values())
        return total / len(self.epochs)

    def to_records(self) -> list[dict]:
        return [e.to_json() for e in self.epochs]


def _batches(n: int, batch_size: int, gen: np.random.Generator):
    order = gen.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def run_training(clients: Sequence[ClientState], srv: ServerState, schedule: AttendanceSchedule | None,
                 epochs: int, rng: RngStream, test_set: Dataset, lr: float = 0.05, batch_size: int = 32,
                 l2_lambda: float = 0.0, noise_family: str = "laplace") -> TrainingRecord:
    """Train for ``epochs`` epochs; aggregate every ``srv.aggregation_period`` epochs."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    by_id = {c.client_id: c for c in clients}
    if len(by_id) != len(clients):
        raise ValueError("duplicate client ids")
    if schedule is not None:
        schedule.validate(by_id)
    record = TrainingRecord()
    for t in range(1, epochs + 1):
        present = sorted(by_id) if schedule is None else sorted(schedule.present(t))
        per_client: dict[int, dict[str, float]] = {}
        losses = []
        for cid in present:
            c = by_id[cid]
            gen = rng.child("batches", cid, t).generator()
            batches = _batches(len(c.dataset), batch_size, gen)
            for b, idx in enumerate(batches):
                _, _, metrics = client_turn(c, srv, (c.dataset.x[idx], c.dataset.y[idx]),
                                            rng.child("noise", cid, t, b), lr, l2_lambda, noise_family)
                losses.append(metrics.loss)
            if c.profile is not None:
                nominal = c.profile.boundary_bytes[c.split_point - 1] if c.profile.boundary_bytes is not None else 0.0
                events = account_turn_energy(c.profile, c.split_point, nominal, len(batches), cid, t)
                record.events.extend(events)
                per_client[cid] = _fold(events)
        aggregated = t % srv.aggregation_period == 0
        if aggregated:
            uploaders = [by_id[cid] for cid in present]
            aggregate(srv, uploaders)
            for c in uploaders:
                if c.profile is not None:
                    n_bytes = sum(p.size for p in c.prefix.parameters()) * BYTES_PER_VALUE
                    ev = upload_event(c.profile, n_bytes, c.client_id, t)
                    record.events.append(ev)
                    per_client[c.client_id] = _fold([ev], per_client.get(c.client_id))
        trained = [c for c in clients if c.steps > 0]
        acc = evaluate_global(srv, trained, test_set)
        record.epochs.append(EpochRecord(t, acc, per_client, aggregated, present,
                                         float(np.mean(losses)) if losses else None))
    return record


def _fold(events: Sequence[EnergyEvent], into: dict | None = None) -> dict[str, float]:
    out = into or {"comm_J": 0.0, "comp_J": 0.0, "idle_J": 0.0, "peak_W": 0.0}
    keys = {"comm": "comm_J", "compute": "comp_J", "idle-awake": "idle_J"}
    for ev in events:
        out[keys[ev.kind]] += ev.joules
        out["peak_W"] = max(out["peak_W"], ev.watts)
    return out


def centralized_step(model: nn.LayeredModel, batch, lr: float, l2_lambda: float = 0.0) -> float:
    """Reference: one SGD step on the whole model, no split, no noise."""
    x, y = batch
    logits, tape = nn.forward(model, x, record_tape=True, train=True)
    loss, g = nn.cross_entropy(logits, y)
    packet = nn.backward(model, tape, g)
    nn.sgd_step(model, packet.param_grads, lr, l2_lambda)
    return loss


def train_centralized(model: nn.LayeredModel, data: Dataset, epochs: int, rng: RngStream,
                      lr: float = 0.05, batch_size: int = 32, l2_lambda: float = 0.0) -> nn.LayeredModel:
    for t in range(1, epochs + 1):
        gen = rng.child("batches", "central", t).generator()
        for idx in _batches(len(data), batch_size, gen):
            centralized_step(model, (data.x[idx], data.y[idx]), lr, l2_lambda)
    return model
