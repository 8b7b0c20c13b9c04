"""Federated pretraining loop: local epochs, averaging, wire messages.

Each round every client starts from the freshly broadcast global
parameters, runs its local epochs over its own zero-filled rows, and ships
back exactly one flat parameter vector. The server averages the vectors
(plain mean by default) and broadcasts again. Only model parameters ever
cross the wire; the audit helpers below check that.

Clients draw all randomness from streams keyed by (seed, silo, round,
purpose), so results are independent of execution order: serial and
thread-parallel schedules produce bit-identical models.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, make_views
from .errors import ConfigError, ShapeError, TrainingDivergenceError
from .losses import LossConfig, total_loss
from .mlp import (
    MlpParams,
    OptState,
    backward_views,
    flatten,
    forward_traced,
    init_params,
    opt_step,
    parameter_count,
    unflatten,
)
from .numerics import RngStream
from .silos import SiloView

__all__ = [
    "TrainConfig",
    "ParamMessage",
    "ClientState",
    "RoundLog",
    "CflResult",
    "PrivacyReport",
    "client_update",
    "server_aggregate",
    "run_cfl",
    "privacy_audit",
    "audit_row_invariance",
]


@dataclass(frozen=True)
class TrainConfig:
    """Everything the federation loop needs to train.

    ``epochs`` is the number of federated rounds; each round every client
    runs ``local_epochs_per_round`` passes over its rows (default 1, so
    aggregation happens once per local epoch). ``parallel`` runs clients
    on a thread pool; results are identical either way.
    """

    hidden: int = 256
    embed: int = 256
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    local_epochs_per_round: int = 1
    parallel: bool = False
    weighted_average: bool = False
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 (contrastive pairs)")
        if self.local_epochs_per_round < 0:
            raise ConfigError("local_epochs_per_round must be >= 0")


@dataclass(eq=False)
class ParamMessage:
    """One client-to-server update: flat parameters plus routing fields.

    The payload is the model parameter vector and nothing else; there is
    deliberately no field that could carry feature rows. ``sample_weight``
    is an optional aggregation weight (defaults to 1, which makes the
    server's weighted path coincide with the plain mean).
    """

    silo_id: int
    round: int
    params: np.ndarray
    sample_weight: float = 1.0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).ravel()

    @property
    def count(self) -> int:
        return int(self.params.shape[0])

    def to_bytes(self) -> bytes:
        """JSON header line, then the payload as little-endian float64."""
        header = {
            "silo_id": self.silo_id,
            "round": self.round,
            "count": self.count,
            "sample_weight": self.sample_weight,
        }
        return (json.dumps(header, sort_keys=True).encode() + b"\n"
                + self.params.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamMessage":
        head, _, payload = blob.partition(b"\n")
        try:
            header = json.loads(head.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ShapeError(f"unreadable message header: {exc}") from None
        params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        msg = cls(
            silo_id=int(header["silo_id"]),
            round=int(header["round"]),
            params=params,
            sample_weight=float(header.get("sample_weight", 1.0)),
        )
        if msg.count != int(header["count"]):
            raise ShapeError(
                f"message payload has {msg.count} floats, header says "
                f"{header['count']}")
        return msg


@dataclass(eq=False)
class ClientState:
    """Mutable per-client trainer state.

    ``params`` is replaced wholesale by every broadcast; the optimizer
    state is rebuilt at each round start so a round is a pure function of
    (broadcast params, silo data, stream key).
    """

    silo_id: int
    view: SiloView
    params: MlpParams
    stream: RngStream


@dataclass(frozen=True)
class RoundLog:
    """Mean training losses of one client over one round, plus wall time."""

    round: int
    silo_id: int
    l_total: float
    l_recon: float
    l_contrastive: float
    l_distance: float
    seconds: float


def _batches(n_rows: int, batch_size: int, g: np.random.Generator):
    """Shuffled minibatch index blocks; a trailing singleton is dropped
    because the contrastive term needs at least two rows."""
    perm = g.permutation(n_rows)
    for lo in range(0, n_rows, batch_size):
        chunk = perm[lo:lo + batch_size]
        if chunk.shape[0] >= 2:
            yield chunk


def client_update(state: ClientState, cfg: TrainConfig,
                  round_index: int = 0) -> tuple[ParamMessage, RoundLog]:
    """Run one round of local training and package the result.

    Trains on all of the silo's rows, zero-filled ones included; row
    presence never changes between epochs, only the shuffle order does.
    With ``local_epochs_per_round=0`` the broadcast parameters are
    returned unchanged.
    """
    t0 = time.perf_counter()
    params = state.params
    d_in, hidden, embed = params.dims
    if state.view.d != d_in:
        raise ShapeError(
            f"silo {state.silo_id} has {state.view.d} features, model "
            f"expects {d_in}")
    opt = OptState(learning_rate=cfg.learning_rate, kind=cfg.optimizer)
    rows = state.view.features
    sums = np.zeros(4)
    n_batches = 0
    for local_epoch in range(cfg.local_epochs_per_round):
        shuffle_g = state.stream.child(
            round=round_index, tag=f"shuffle-{local_epoch}").generator()
        augment_g = state.stream.child(
            round=round_index, tag=f"augment-{local_epoch}").generator()
        for idx in _batches(rows.shape[0], cfg.batch_size, shuffle_g):
            batch = rows[idx]
            v1, v2 = make_views(batch, cfg.augment, augment_g)
            tr1 = forward_traced(params, v1)
            tr2 = forward_traced(params, v2)
            bd = total_loss(tr1.reconstruction, tr2.reconstruction,
                            tr1.embedding, tr2.embedding, batch, cfg.loss)
            if not np.isfinite(bd.total):
                raise TrainingDivergenceError(
                    f"silo {state.silo_id} round {round_index}: non-finite "
                    f"loss {bd.total}")
            grads = backward_views(params, tr1, tr2, bd.d_embed1, bd.d_embed2,
                                   bd.d_recon1, bd.d_recon2)
            params = opt_step(params, grads, opt)
            sums += (bd.total, bd.recon, bd.contrastive, bd.distance)
            n_batches += 1
    state.params = params
    means = sums / n_batches if n_batches else sums
    log = RoundLog(
        round=round_index,
        silo_id=state.silo_id,
        l_total=float(means[0]),
        l_recon=float(means[1]),
        l_contrastive=float(means[2]),
        l_distance=float(means[3]),
        seconds=time.perf_counter() - t0,
    )
    msg = ParamMessage(
        silo_id=state.silo_id,
        round=round_index,
        params=flatten(params),
        sample_weight=float(state.view.n_present),
    )
    return msg, log


def server_aggregate(messages: list[ParamMessage],
                     weighted: bool = False) -> np.ndarray:
    """Average client parameter vectors.

    Messages are reduced in a canonical order (silo id, round, payload
    bytes), so any permutation of the input list yields a bit-identical
    result. The default is the unweighted mean; ``weighted`` switches to
    sample-weighted averaging.
    """
    if not messages:
        raise ConfigError("cannot aggregate zero messages")
    counts = {m.count for m in messages}
    if len(counts) != 1:
        raise ShapeError(f"mixed parameter counts in aggregation: {sorted(counts)}")
    ordered = sorted(
        messages, key=lambda m: (m.silo_id, m.round, m.params.tobytes()))
    stack = np.stack([m.params for m in ordered])
    if not weighted:
        return stack.mean(axis=0)
    weights = np.array([m.sample_weight for m in ordered], dtype=np.float64)
    total = weights.sum()
    if total <= 0.0:
        raise ConfigError("sample weights sum to zero")
    return (stack * weights[:, None]).sum(axis=0) / total


@dataclass(frozen=True)
class MessageStat:
    """Size record kept for every exchanged message."""

    silo_id: int
    round: int
    count: int
    n_bytes: int


@dataclass(eq=False)
class CflResult:
    """Final global parameters (use the encoder half downstream), logs,
    and the per-message size trail for auditing."""

    params: MlpParams
    logs: list[RoundLog]
    message_stats: list[MessageStat]
    messages: list[ParamMessage] | None = None


def run_cfl(views: list[SiloView], cfg: TrainConfig, stream: RngStream,
            collect_messages: bool = False) -> CflResult:
    """Federated contrastive pretraining over prepared silo views.

    All silos must expose the same feature width (the global model is a
    single architecture). One client is plain local training: the mean of
    one update is that update.
    """
    if not views:
        raise ConfigError("need at least one silo view")
    widths = {v.d for v in views}
    if len(widths) != 1:
        raise ConfigError(
            f"heterogeneous silo widths {sorted(widths)}; the global model "
            f"needs equal feature counts")
    d_in = views[0].d
    global_params = init_params(d_in, cfg.hidden, cfg.embed,
                                stream.child(silo=0, round=0, tag="init"))
    states = [
        ClientState(silo_id=v.silo_id, view=v, params=global_params.copy(),
                    stream=stream.child(silo=v.silo_id))
        for v in views
    ]

    logs: list[RoundLog] = []
    stats: list[MessageStat] = []
    kept: list[ParamMessage] = []
    for r in range(1, cfg.epochs + 1):
        flat_global = flatten(global_params)
        for st in states:
            st.params = unflatten(flat_global, d_in, cfg.hidden, cfg.embed)

        def one(st: ClientState):
            return client_update(st, cfg, round_index=r)

        if cfg.parallel and len(states) > 1:
            with ThreadPoolExecutor(max_workers=len(states)) as pool:
                results = list(pool.map(one, states))
        else:
            results = [one(st) for st in states]

        messages = [m for m, _ in results]
        logs.extend(log for _, log in results)
        for m in messages:
            stats.append(MessageStat(silo_id=m.silo_id, round=m.round,
                                     count=m.count, n_bytes=len(m.to_bytes())))
        if collect_messages:
            kept.extend(messages)
        new_flat = server_aggregate(messages, weighted=cfg.weighted_average)
        global_params = unflatten(new_flat, d_in, cfg.hidden, cfg.embed)

    return CflResult(params=global_params, logs=logs, message_stats=stats,
                     messages=kept if collect_messages else None)


@dataclass(frozen=True)
class PrivacyReport:
    passed: bool
    expected_count: int
    n_messages: int
    issues: tuple[str, ...]


def privacy_audit(messages: list[ParamMessage],
                  expected_count: int) -> PrivacyReport:
    """Check that every exchanged payload is exactly one parameter vector.

    A message whose length differs from the model's parameter count (for
    example one padded with extra floats) fails the audit, as does a
    payload whose byte serialization disagrees with its own header.
    """
    issues = []
    for m in messages:
        if m.count != expected_count:
            issues.append(
                f"silo {m.silo_id} round {m.round}: payload length "
                f"{m.count} != parameter count {expected_count}")
        decoded = ParamMessage.from_bytes(m.to_bytes())
        if decoded.count != m.count:
            issues.append(
                f"silo {m.silo_id} round {m.round}: serialization changed "
                f"payload length")
    return PrivacyReport(
        passed=not issues,
        expected_count=expected_count,
        n_messages=len(messages),
        issues=tuple(issues),
    )


def audit_row_invariance(make_views_fn, cfg: TrainConfig, stream: RngStream,
                         factor: int = 2) -> tuple[bool, dict]:
    """Verify message sizes do not leak row counts.

    ``make_views_fn(scale)`` must build the same federation with row count
    scaled by ``scale``. Runs the loop at scale 1 and ``factor`` and
    compares the byte length of every exchanged message.
    """
    base = run_cfl(make_views_fn(1), cfg, stream)
    scaled = run_cfl(make_views_fn(factor), cfg, stream)
    base_sizes = sorted((s.silo_id, s.round, s.n_bytes) for s in base.message_stats)
    scaled_sizes = sorted((s.silo_id, s.round, s.n_bytes) for s in scaled.message_stats)
    same = base_sizes == scaled_sizes
    return same, {"base": base_sizes, "scaled": scaled_sizes}
