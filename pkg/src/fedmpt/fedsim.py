"""Federated training: local SGD on private shards, FedAvg on the server.

The only object that crosses a client boundary is a :class:`ParameterBundle`
(an immutable name -> array snapshot).  Clients own their model instance and
their shard; the server owns the global bundle and an evaluation model.
"""

from __future__ import annotations

import base64
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import Tape, sgd_step
from .objectives import f1_scores, mean_average_precision

SCHEMA_VERSION = 1


class ProtocolError(ValueError):
    """Bundles that cannot be aggregated together."""


class RunFailure(RuntimeError):
    def __init__(self, round_idx: int, cause: BaseException):
        super().__init__(f"run failed in round {round_idx}: {cause}")
        self.round_idx = round_idx
        self.cause = cause


@dataclass(frozen=True)
class ParameterBundle:
    entries: dict[str, np.ndarray]
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        frozen = {}
        for name, value in self.entries.items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "entries", frozen)

    def keys(self):
        return self.entries.keys()

    def to_wire(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "entries": [
                {
                    "name": name,
                    "shape": list(value.shape),
                    "values": base64.b64encode(value.astype("<f8").tobytes()).decode("ascii"),
                }
                for name, value in self.entries.items()
            ],
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_wire(), separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_wire(cls, doc: dict) -> "ParameterBundle":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ProtocolError(f"unsupported bundle schema_version {doc.get('schema_version')!r}")
        entries = {}
        for e in doc["entries"]:
            raw = np.frombuffer(base64.b64decode(e["values"]), dtype="<f8")
            entries[e["name"]] = raw.reshape(e["shape"]).astype(np.float64)
        return cls(entries)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParameterBundle":
        return cls.from_wire(json.loads(data))


@dataclass(frozen=True)
class FedConfig:
    K: int = 1
    rounds: int = 10
    participation: float = 1.0
    weighting: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.participation <= 1.0:
            raise ValueError(f"participation must lie in (0, 1], got {self.participation}")
        if self.weighting not in ("uniform", "size_weighted"):
            raise ValueError(f"weighting must be 'uniform' or 'size_weighted', got {self.weighting!r}")
        if self.K < 1 or self.rounds < 0:
            raise ValueError("need K >= 1 and rounds >= 0")

    @property
    def per_round(self) -> int:
        return max(1, math.ceil(self.participation * self.K - 1e-9))


@dataclass
class ClientState:
    client_id: int
    patches: np.ndarray  # frozen visual features of the shard, (S, M, D)
    labels: np.ndarray  # (S, C)
    model: object
    seed: int
    lr: float = 0.001
    batch: int = 32
    local_epochs: int = 1
    last_loss: float = float("nan")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class RoundRecord:
    round_idx: int
    participants: list[int]
    mean_train_loss: float


@dataclass
class RunReport:
    records: list[dict] = field(default_factory=list)
    round_seconds: list[float] = field(default_factory=list)
    final_bundle: ParameterBundle | None = None


def local_train(client: ClientState, epochs: int | None = None, round_idx: int = 0) -> ParameterBundle:
    """Mini-batch SGD over the client's shard; returns the updated bundle."""
    if len(client) == 0:
        raise ValueError(f"client {client.client_id} has an empty shard")
    epochs = client.local_epochs if epochs is None else epochs
    model = client.model
    params = model.parameters()
    losses = []
    for epoch in range(epochs):
        order = np.random.default_rng([client.seed, round_idx, epoch]).permutation(len(client))
        for start in range(0, len(order), client.batch):
            idx = order[start : start + client.batch]
            with Tape() as tape:
                loss = model.loss(client.patches[idx], client.labels[idx])
            if not np.isfinite(loss.data).all():
                raise FloatingPointError(f"non-finite loss on client {client.client_id}")
            tape.backward(loss)
            sgd_step(params, client.lr)
            losses.append(loss.item())
    client.last_loss = float(np.mean(losses)) if losses else float("nan")
    return ParameterBundle(model.state())


def fed_average(bundles: Sequence[ParameterBundle], weights=None) -> ParameterBundle:
    """Element-wise weighted sum of bundles (uniform weights by default)."""
    if not bundles:
        raise ProtocolError("fed_average needs at least one bundle")
    if weights is None:
        weights = np.full(len(bundles), 1.0 / len(bundles))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(bundles),) or (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-9:
        raise ProtocolError(f"weights must be {len(bundles)} non-negative values summing to 1")
    ref = bundles[0]
    for i, b in enumerate(bundles[1:], start=1):
        missing, extra = set(ref.keys()) - set(b.keys()), set(b.keys()) - set(ref.keys())
        if missing or extra:
            raise ProtocolError(f"bundle {i}: missing keys {sorted(missing)}, unexpected keys {sorted(extra)}")
        for name in ref.keys():
            if b.entries[name].shape != ref.entries[name].shape:
                raise ProtocolError(
                    f"bundle {i}: shape of {name} is {b.entries[name].shape}, expected {ref.entries[name].shape}"
                )
    out = {}
    for name in ref.keys():
        acc = np.zeros_like(ref.entries[name])
        for w, b in zip(weights, bundles):
            acc += w * b.entries[name]
        out[name] = acc
    return ParameterBundle(out)


def sample_participants(cfg: FedConfig, round_idx: int) -> list[int]:
    rng = np.random.default_rng([cfg.seed, round_idx, 0xFED])
    return sorted(int(k) for k in rng.choice(cfg.K, size=cfg.per_round, replace=False))


class Server:
    def __init__(self, model, cfg: FedConfig):
        self.model = model
        self.cfg = cfg
        self.bundle = ParameterBundle(model.state())

    def evaluate(self, patches: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> dict:
        self.model.load_state(self.bundle.entries)
        scores = self.model.predict(patches)
        cf1, of1 = f1_scores(scores, labels, threshold)
        return {"mAP": mean_average_precision(scores, labels), "CF1": cf1, "OF1": of1}


def run_round(server: Server, clients: Sequence[ClientState], cfg: FedConfig, round_idx: int) -> RoundRecord:
    """Broadcast, train the sampled clients, aggregate, redistribute."""
    if not 0 <= round_idx < cfg.rounds:
        raise ValueError(f"round {round_idx} outside schedule of {cfg.rounds}")
    chosen = sample_participants(cfg, round_idx)
    bundles, sizes, losses = [], [], []
    for k in chosen:
        client = clients[k]
        client.model.load_state(server.bundle.entries)
        bundles.append(local_train(client, round_idx=round_idx))
        sizes.append(len(client))
        losses.append(client.last_loss)
    if cfg.weighting == "size_weighted":
        weights = np.asarray(sizes, dtype=np.float64) / sum(sizes)
    else:
        weights = None
    server.bundle = fed_average(bundles, weights)
    for client in clients:
        client.model.load_state(server.bundle.entries)
    return RoundRecord(round_idx, chosen, float(np.mean(losses)))


def run_experiment(
    cfg: FedConfig,
    server: Server,
    clients: Sequence[ClientState],
    eval_patches: np.ndarray,
    eval_labels: np.ndarray,
    eval_interval: int = 1,
    threshold: float = 0.5,
    on_record: Callable[[dict], None] | None = None,
) -> RunReport:
    """Run ``cfg.rounds`` rounds, evaluating the global model at round 0 and every ``eval_interval``."""
    if len(clients) != cfg.K:
        raise ValueError(f"config says K={cfg.K} but {len(clients)} clients were given")
    if eval_interval < 1:
        raise ValueError("eval_interval must be >= 1")
    report = RunReport()

    def emit(round_idx: int, loss: float | None, participants: list[int]) -> None:
        rec = {"round": round_idx, **server.evaluate(eval_patches, eval_labels, threshold)}
        rec["mean_train_loss"] = loss
        rec["participants"] = participants
        report.records.append(rec)
        if on_record is not None:
            on_record(rec)

    try:
        emit(0, None, [])
    except ArithmeticError as exc:
        raise RunFailure(0, exc) from exc
    for r in range(cfg.rounds):
        start = time.perf_counter()
        try:
            record = run_round(server, clients, cfg, r)
            report.round_seconds.append(time.perf_counter() - start)
            if (r + 1) % eval_interval == 0:
                emit(r + 1, record.mean_train_loss, record.participants)
        except ArithmeticError as exc:
            raise RunFailure(r, exc) from exc
    report.final_bundle = server.bundle
    return report
