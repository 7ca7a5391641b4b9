"""Split training protocol and the centralized reference trainer.

Both trainers execute literally the same computation: every random draw
(weight samples, dropout masks, DP noise, batch sampling) comes from a
stream keyed by master seed, purpose, layer name, and round, so with the
defense off the per-epoch losses and the parameter trajectories agree to
the last bit.  The difference is only where tensors live: the federated
trainer cuts the graph at the embeddings, ships them as messages, and
splices the server's embedding gradients back into each client's tape.

With the defense on, clients clip and perturb every embedding they ever
transmit, including evaluation-time ones: the server never observes a
clean representation.  The centralized trainer mirrors the training-time
perturbation (for the privacy-utility comparison) but evaluates clean,
since a data owner running everything locally has no transmission to
protect.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import AdamW, Tape, Tensor
from ..data import Dataset
from ..metrics import MetricUndefinedError, concordance, risk_from_survival
from ..model import (ModelBundle, aux_loss, build_bundle, combine_loss_taped,
                     predict_hazards)
from ..privacy import (PrivacyParams, clip_l2, clip_rows_taped, perturb,
                       perturb_taped)
from ..rng import NoiseRouter, stream
from ..survival import TimeGrid, build_targets, hazards_to_survival, nll_taped
from .messages import ControlMessage, EmbeddingMessage, GradientMessage

__all__ = ["PrivacySettings", "TrainSettings", "RoundPlan", "ProtocolError",
           "TrainResult", "ClientState", "ServerState", "round_plan",
           "run_centralized_training", "run_vfl_training",
           "run_vfl_server_tcp", "run_vfl_client_tcp", "evaluate_bundle"]


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class PrivacySettings:
    """Budget knobs; the noise multiplier derives from the run shape."""

    epsilon: float
    delta: float = 1e-5
    clip_bound: float = 1.0
    c2: float = 1.0


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    master_seed: int = 0
    intervals: int = 30
    privacy: PrivacySettings | None = None
    bayesian: bool = True            # False = deterministic ablation, KL off
    early_stopping_patience: int = 10
    model_overrides: dict = field(default_factory=dict)
    capture_embeddings: bool = False
    # loss-side KL denominator override (defaults to the training-set size);
    # a shadow run uses it to mimic another run's objective exactly
    kl_denominator: int | None = None

    def mode(self) -> str:
        return "sample" if self.bayesian else "mean"


@dataclass(frozen=True)
class RoundPlan:
    epoch: int
    batch_index: int
    positions: np.ndarray      # rows into the aligned dataset arrays
    subject_ids: tuple[int, ...]


def round_plan(master_seed: int, epoch: int, batch_index: int,
               train_positions: np.ndarray, ids: np.ndarray,
               batch_size: int) -> RoundPlan:
    """Uniform with-replacement batch; identical for every party that
    shares the master seed."""
    draw = stream(master_seed, "batch-sample", epoch, batch_index)
    picks = draw.integers(0, train_positions.size, size=batch_size)
    positions = train_positions[picks]
    return RoundPlan(epoch=epoch, batch_index=batch_index, positions=positions,
                     subject_ids=tuple(int(i) for i in ids[positions]))


def _derive_privacy(settings: TrainSettings, n_train: int,
                    batches_per_epoch: int) -> PrivacyParams | None:
    if settings.privacy is None:
        return None
    ps = settings.privacy
    return PrivacyParams(epsilon=ps.epsilon, delta=ps.delta,
                         sample_rate=min(1.0, settings.batch_size / n_train),
                         steps=settings.epochs * batches_per_epoch,
                         clip_bound=ps.clip_bound, c2=ps.c2)


def _client_half(bundle: ModelBundle, name: str, client_idx: int,
                 x_batch: np.ndarray, router: NoiseRouter,
                 settings: TrainSettings, privacy: PrivacyParams | None):
    """Extractor forward, defense, local KL; shared by both trainers so the
    tape record order is identical."""
    e = bundle.extractor_forward(name, x_batch, settings.mode(), router, True)
    if privacy is not None:
        e = clip_rows_taped(e, privacy.clip_bound)
        e = perturb_taped(e, privacy.sigma, privacy.clip_bound,
                          router.stream("dp-noise", client_idx))
    kl = bundle.client_kl(name) if settings.bayesian else None
    return e, kl


def _server_half(bundle: ModelBundle, embs: list[Tensor], targets,
                 kl_terms: list[Tensor], router: NoiseRouter,
                 settings: TrainSettings, n_train: int):
    hazards, _, _ = bundle.fuse_and_predict(embs, settings.mode(), router, True)
    nll_t = nll_taped(hazards, targets)
    aux_t = aux_loss(embs)
    terms = list(kl_terms)
    if settings.bayesian:
        terms.append(bundle.server_kl())
    return combine_loss_taped(nll_t, terms, n_train, aux_t)


class ClientState:
    """One party's extractor plus its optimizer and in-flight activations.

    Holds only features and coordination metadata (ids, split membership);
    outcome labels never enter this object.
    """

    def __init__(self, index: int, name: str, bundle: ModelBundle,
                 matrix: np.ndarray, settings: TrainSettings,
                 privacy: PrivacyParams | None):
        self.index = index
        self.name = name
        self.bundle = bundle
        self.matrix = matrix
        self.settings = settings
        self.privacy = privacy
        self.opt = AdamW(bundle.client_parameters(name),
                         lr=settings.learning_rate,
                         weight_decay=settings.weight_decay)
        self._pending = None  # (round, tape, emb, kl)

    def training_message(self, round_no: int, plan: RoundPlan) -> EmbeddingMessage:
        router = NoiseRouter(self.settings.master_seed,
                             ("round", plan.epoch, plan.batch_index))
        with Tape() as tape:
            emb, kl = _client_half(self.bundle, self.name, self.index,
                                   self.matrix[plan.positions], router,
                                   self.settings, self.privacy)
        self._pending = (round_no, tape, emb, kl)
        return EmbeddingMessage(round=round_no, client=self.index,
                                subjects=plan.subject_ids,
                                rows=emb.data.copy(),
                                kl=float(kl.data) if kl is not None else 0.0)

    def apply_gradient(self, msg: GradientMessage, n_train: int) -> None:
        if self._pending is None or self._pending[0] != msg.round:
            raise ProtocolError(f"client {self.index}: gradient for unknown "
                                f"round {msg.round}")
        _, tape, emb, kl = self._pending
        self._pending = None
        seeds = {emb: msg.rows}
        if kl is not None:
            seeds[kl] = np.full((), 1.0 / n_train)
        grads = tape.gradients(seeds=seeds)
        self.opt.step(grads)

    def eval_message(self, round_no: int, positions: np.ndarray,
                     ids: np.ndarray, scope: tuple) -> EmbeddingMessage:
        """Evaluation-time embeddings: deterministic forward, defense still
        applied when privacy is on (the server never sees clean rows)."""
        router = NoiseRouter(self.settings.master_seed, scope)
        emb = self.bundle.extractor_forward(self.name, self.matrix[positions],
                                            "mean", router, False)
        rows = emb.data
        if self.privacy is not None:
            rows = clip_l2(rows, self.privacy.clip_bound)
            rows = perturb(rows, self.privacy.sigma, self.privacy.clip_bound,
                           router.stream("dp-noise", self.index))
        return EmbeddingMessage(round=round_no, client=self.index,
                                subjects=tuple(int(i) for i in ids[positions]),
                                rows=rows.copy(), kl=0.0)


class ServerState:
    """Label owner: fusion, head, risk layer, loss, and the optimizer for
    the server-side parameters."""

    def __init__(self, bundle: ModelBundle, labels: dict[int, tuple[float, int]],
                 grid: TimeGrid, settings: TrainSettings, n_train: int,
                 n_clients: int):
        self.bundle = bundle
        self.labels = labels
        self.grid = grid
        self.settings = settings
        self.n_train = n_train
        self.n_clients = n_clients
        self.opt = AdamW(bundle.server_parameters(),
                         lr=settings.learning_rate,
                         weight_decay=settings.weight_decay)
        self.captured: list[tuple[int, int, tuple, np.ndarray]] = []
        self.captured_eval: list[tuple[int, int, tuple, np.ndarray]] = []
        self._eval_epoch = 0

    def _validate(self, msgs: list[EmbeddingMessage]) -> None:
        if len(msgs) != self.n_clients:
            raise ProtocolError(f"expected {self.n_clients} embedding "
                                f"messages, got {len(msgs)}")
        rounds = {m.round for m in msgs}
        if len(rounds) != 1:
            raise ProtocolError(f"round number mismatch: {sorted(rounds)}")
        subj = {m.subjects for m in msgs}
        if len(subj) != 1:
            raise ProtocolError("subject index lists disagree across clients")
        if sorted(m.client for m in msgs) != list(range(self.n_clients)):
            raise ProtocolError("client indices must cover every client once")

    def _targets_for(self, subjects) -> tuple:
        times = np.array([self.labels[s][0] for s in subjects])
        events = np.array([self.labels[s][1] for s in subjects])
        return times, events

    def process_training_round(self, msgs: list[EmbeddingMessage],
                               plan: RoundPlan):
        self._validate(msgs)
        msgs = sorted(msgs, key=lambda m: m.client)
        times, events = self._targets_for(msgs[0].subjects)
        targets = build_targets(times, events, self.grid)
        router = NoiseRouter(self.settings.master_seed,
                             ("round", plan.epoch, plan.batch_index))
        if self.settings.capture_embeddings:
            for m in msgs:
                self.captured.append((plan.epoch, m.client, m.subjects,
                                      m.rows.copy()))
        with Tape() as tape:
            leaves = [Tensor(m.rows, requires_grad=True) for m in msgs]
            kl_values = ([Tensor(np.asarray(m.kl)) for m in msgs]
                         if self.settings.bayesian else [])
            loss = _server_half(self.bundle, leaves, targets, kl_values,
                                router, self.settings, self.n_train)
        grads = tape.gradients(loss)
        self.opt.step(grads)
        replies = [GradientMessage(round=m.round, client=m.client,
                                   subjects=m.subjects,
                                   rows=grads.get(leaf))
                   for m, leaf in zip(msgs, leaves)]
        return float(loss.data), replies

    def process_eval_round(self, msgs: list[EmbeddingMessage], scope: tuple):
        self._validate(msgs)
        msgs = sorted(msgs, key=lambda m: m.client)
        if self.settings.capture_embeddings:
            for m in msgs:
                self.captured_eval.append((self._eval_epoch, m.client,
                                           m.subjects, m.rows.copy()))
            self._eval_epoch += 1
        times, events = self._targets_for(msgs[0].subjects)
        targets = build_targets(times, events, self.grid)
        router = NoiseRouter(self.settings.master_seed, scope)
        embs = [Tensor(m.rows) for m in msgs]
        hazards, _, _ = self.bundle.fuse_and_predict(embs, "mean", router, False)
        loss = float(nll_taped(hazards, targets).data
                     + 0.05 * aux_loss(embs).data)
        surv = hazards_to_survival(hazards.data)
        try:
            cindex = concordance(risk_from_survival(surv), times, events)
        except MetricUndefinedError:
            cindex = float("nan")
        return loss, cindex


@dataclass
class TrainResult:
    bundle: ModelBundle
    grid: TimeGrid
    history: list[dict]
    resolved: dict
    best_epoch: int
    privacy: PrivacyParams | None
    captured: list = field(default_factory=list)
    captured_eval: list = field(default_factory=list)

    def history_tsv(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss\tval_cindex"]
        for row in self.history:
            lines.append(f"{row['epoch']}\t{row['train_loss']:.10g}"
                         f"\t{row['val_loss']:.10g}\t{row['val_cindex']:.10g}")
        return "\n".join(lines) + "\n"


def _setup(dataset: Dataset, settings: TrainSettings):
    train_positions = np.where(dataset.split == "train")[0]
    if train_positions.size == 0:
        raise ValueError("dataset has no training split")
    t_max = float(dataset.times[train_positions].max())
    grid = TimeGrid(intervals=settings.intervals, t_max=t_max)
    batches = max(1, int(np.ceil(train_positions.size / settings.batch_size)))
    privacy = _derive_privacy(settings, train_positions.size, batches)
    cfg = dataset.model_config(settings.intervals, **settings.model_overrides)
    bundle = build_bundle(cfg, settings.master_seed)
    labels = {int(i): (float(t), int(e)) for i, t, e in
              zip(dataset.ids, dataset.times, dataset.events)}
    kl_denom = settings.kl_denominator or int(train_positions.size)
    resolved = {
        "intervals": settings.intervals,
        "t_max": t_max,
        "batches_per_epoch": batches,
        "n_train": int(train_positions.size),
        "kl_denominator": kl_denom,
        "learning_rate": settings.learning_rate,
        "weight_decay": settings.weight_decay,
        "batch_size": settings.batch_size,
        "epochs": settings.epochs,
        "master_seed": settings.master_seed,
        "bayesian": settings.bayesian,
        "hidden_activation": "relu",
        "extractor_output_activation": "identity",
        "attention_score_kl_included": True,
        "eval_forward_mode": "mean",
        "val_loss_terms": "nll+0.05*aux",
        "early_stopping": f"patience={settings.early_stopping_patience},no-restore",
    }
    if privacy is not None:
        resolved.update({"privacy.epsilon": privacy.epsilon,
                         "privacy.delta_target": privacy.delta,
                         "privacy.sigma": privacy.sigma,
                         "privacy.clip_bound": privacy.clip_bound,
                         "privacy.c2": privacy.c2,
                         "privacy.sample_rate": privacy.sample_rate,
                         "privacy.steps": privacy.steps})
    return train_positions, grid, batches, privacy, bundle, labels, resolved


def _split_positions(dataset: Dataset, which: str) -> np.ndarray:
    return np.where(dataset.split == which)[0]


def evaluate_bundle(bundle: ModelBundle, dataset: Dataset, grid: TimeGrid,
                    positions: np.ndarray, master_seed: int, scope: tuple,
                    privacy: PrivacyParams | None = None):
    """Deterministic evaluation pass; returns (loss, cindex, hazards).

    ``privacy`` non-None perturbs the embeddings exactly as a federated
    transmission would.
    """
    router = NoiseRouter(master_seed, scope)
    embs = []
    for k, name in enumerate(bundle.modality_names()):
        e = bundle.extractor_forward(name, dataset.modalities[name][positions],
                                     "mean", router, False)
        if privacy is not None:
            rows = clip_l2(e.data, privacy.clip_bound)
            rows = perturb(rows, privacy.sigma, privacy.clip_bound,
                           router.stream("dp-noise", k))
            e = Tensor(rows)
        embs.append(e)
    hazards, _, _ = bundle.fuse_and_predict(embs, "mean", router, False)
    times = dataset.times[positions]
    events = dataset.events[positions]
    targets = build_targets(times, events, grid)
    loss = float(nll_taped(hazards, targets).data + 0.05 * aux_loss(embs).data)
    surv = hazards_to_survival(hazards.data)
    try:
        cindex = concordance(risk_from_survival(surv), times, events)
    except MetricUndefinedError:
        cindex = float("nan")
    return loss, cindex, hazards.data


def run_centralized_training(dataset: Dataset, settings: TrainSettings,
                             dp_during_training: bool = True) -> TrainResult:
    """Single joined autodiff graph per batch; the reference computation."""
    (train_positions, grid, batches, privacy, bundle, labels,
     resolved) = _setup(dataset, settings)
    resolved["mode"] = "centralized"
    kl_denom = settings.kl_denominator or int(train_positions.size)
    names = bundle.modality_names()
    opt = AdamW(bundle.parameters(), lr=settings.learning_rate,
                weight_decay=settings.weight_decay)
    val_positions = _split_positions(dataset, "val")
    history = []
    best = (float("inf"), -1)
    train_privacy = privacy if dp_during_training else None
    for epoch in range(settings.epochs):
        losses = []
        for b in range(batches):
            plan = round_plan(settings.master_seed, epoch, b, train_positions,
                              dataset.ids, settings.batch_size)
            router = NoiseRouter(settings.master_seed,
                                 ("round", epoch, b))
            times, events = (dataset.times[plan.positions],
                             dataset.events[plan.positions])
            targets = build_targets(times, events, grid)
            with Tape() as tape:
                embs, kls = [], []
                for k, name in enumerate(names):
                    e, kl = _client_half(bundle, name, k,
                                         dataset.modalities[name][plan.positions],
                                         router, settings, train_privacy)
                    embs.append(e)
                    if kl is not None:
                        kls.append(kl)
                loss = _server_half(bundle, embs, targets, kls, router,
                                    settings, kl_denom)
            grads = tape.gradients(loss)
            opt.step(grads)
            losses.append(float(loss.data))
        # centralized owner evaluates on clean embeddings
        val_loss, val_ci, _ = evaluate_bundle(
            bundle, dataset, grid, val_positions, settings.master_seed,
            ("eval", epoch, "val"), privacy=None)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_loss": val_loss, "val_cindex": val_ci})
        if val_loss < best[0]:
            best = (val_loss, epoch)
        elif epoch - best[1] >= settings.early_stopping_patience:
            break
    return TrainResult(bundle=bundle, grid=grid, history=history,
                       resolved=resolved, best_epoch=best[1], privacy=privacy)


def run_vfl_training(dataset: Dataset, settings: TrainSettings) -> TrainResult:
    """In-process federated training: same math as the centralized trainer,
    but with the graph cut at the embeddings and spliced by messages."""
    (train_positions, grid, batches, privacy, bundle, labels,
     resolved) = _setup(dataset, settings)
    resolved["mode"] = "vfl"
    kl_denom = settings.kl_denominator or int(train_positions.size)
    names = bundle.modality_names()
    clients = [ClientState(k, name, bundle, dataset.modalities[name],
                           settings, privacy)
               for k, name in enumerate(names)]
    server = ServerState(bundle, labels, grid, settings,
                         kl_denom, len(names))
    val_positions = _split_positions(dataset, "val")
    history = []
    best = (float("inf"), -1)
    round_no = 0
    for epoch in range(settings.epochs):
        losses = []
        for b in range(batches):
            plan = round_plan(settings.master_seed, epoch, b, train_positions,
                              dataset.ids, settings.batch_size)
            msgs = [c.training_message(round_no, plan) for c in clients]
            loss, replies = server.process_training_round(msgs, plan)
            for c, g in zip(clients, replies):
                c.apply_gradient(g, kl_denom)
            losses.append(loss)
            round_no += 1
        emsgs = [c.eval_message(round_no, val_positions, dataset.ids,
                                ("eval", epoch, "val")) for c in clients]
        val_loss, val_ci = server.process_eval_round(emsgs,
                                                     ("eval", epoch, "val"))
        round_no += 1
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_loss": val_loss, "val_cindex": val_ci})
        if val_loss < best[0]:
            best = (val_loss, epoch)
        elif epoch - best[1] >= settings.early_stopping_patience:
            break
    return TrainResult(bundle=bundle, grid=grid, history=history,
                       resolved=resolved, best_epoch=best[1], privacy=privacy,
                       captured=server.captured,
                       captured_eval=server.captured_eval)


# ---------------------------------------------------------------------------
# socket deployment mode
# ---------------------------------------------------------------------------

def run_vfl_server_tcp(dataset: Dataset, settings: TrainSettings,
                       host: str, port: int, digest: str) -> TrainResult:
    """Drive federated training over TCP channels; returns like the
    in-process trainer.  The server's history reflects what it computed
    from the (32-bit) wire payloads."""
    from .transport import serve_clients

    (train_positions, grid, batches, privacy, bundle, labels,
     resolved) = _setup(dataset, settings)
    resolved["mode"] = "vfl-tcp"
    kl_denom = settings.kl_denominator or int(train_positions.size)
    names = bundle.modality_names()
    channels, hellos, bound = serve_clients(host, port, len(names))
    for hello in hellos:
        if hello.digest != digest:
            for ch in channels:
                ch.server_send(ControlMessage("stop", digest=digest))
            raise ProtocolError("client config digest disagrees with server")
    for ch in channels:
        ch.server_send(ControlMessage("start", digest=digest))
    server = ServerState(bundle, labels, grid, settings,
                         kl_denom, len(names))
    val_positions = _split_positions(dataset, "val")
    history = []
    best = (float("inf"), -1)
    round_no = 0
    stopped = False
    for epoch in range(settings.epochs):
        if stopped:
            break
        losses = []
        for b in range(batches):
            plan = round_plan(settings.master_seed, epoch, b, train_positions,
                              dataset.ids, settings.batch_size)
            msgs = [ch.server_recv() for ch in channels]
            loss, replies = server.process_training_round(msgs, plan)
            for ch, g in zip(channels, replies):
                ch.server_send(g)
            losses.append(loss)
            round_no += 1
        emsgs = [ch.server_recv() for ch in channels]
        val_loss, val_ci = server.process_eval_round(emsgs,
                                                     ("eval", epoch, "val"))
        round_no += 1
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_loss": val_loss, "val_cindex": val_ci})
        if val_loss < best[0]:
            best = (val_loss, epoch)
        stopping = (epoch - best[1] >= settings.early_stopping_patience
                    or epoch == settings.epochs - 1)
        for ch in channels:
            ch.server_send(ControlMessage("stop" if stopping else "ack",
                                          digest=digest))
        stopped = stopping
    for ch in channels:
        ch.close()
    return TrainResult(bundle=bundle, grid=grid, history=history,
                       resolved=resolved, best_epoch=best[1], privacy=privacy,
                       captured=server.captured,
                       captured_eval=server.captured_eval)


def run_vfl_client_tcp(dataset: Dataset, settings: TrainSettings, index: int,
                       host: str, port: int, digest: str,
                       retries: int = 20) -> None:
    """One client party over TCP.  Uses only features and coordination
    metadata from the dataset; label values are never read."""
    from .transport import TcpClientChannel

    train_positions = np.where(dataset.split == "train")[0]
    batches = max(1, int(np.ceil(train_positions.size / settings.batch_size)))
    privacy = _derive_privacy(settings, train_positions.size, batches)
    cfg = dataset.model_config(settings.intervals, **settings.model_overrides)
    bundle = build_bundle(cfg, settings.master_seed)
    name = bundle.modality_names()[index]
    client = ClientState(index, name, bundle, dataset.modalities[name],
                         settings, privacy)
    chan = None
    for attempt in range(retries):
        try:
            chan = TcpClientChannel(host, port)
            break
        except OSError:
            time.sleep(0.25)
    if chan is None:
        raise ProtocolError(f"client {index}: cannot reach server")
    chan.send(ControlMessage("start", client=index, digest=digest))
    hello = chan.recv()
    if not isinstance(hello, ControlMessage) or hello.kind != "start":
        chan.close()
        raise ProtocolError(f"client {index}: server rejected the handshake")
    val_positions = np.where(dataset.split == "val")[0]
    round_no = 0
    try:
        for epoch in range(settings.epochs):
            for b in range(batches):
                plan = round_plan(settings.master_seed, epoch, b,
                                  train_positions, dataset.ids,
                                  settings.batch_size)
                chan.send(client.training_message(round_no, plan))
                reply = chan.recv()
                if isinstance(reply, ControlMessage):
                    return
                client.apply_gradient(reply, settings.kl_denominator
                                      or int(train_positions.size))
                round_no += 1
            chan.send(client.eval_message(round_no, val_positions, dataset.ids,
                                          ("eval", epoch, "val")))
            reply = chan.recv()
            round_no += 1
            if isinstance(reply, ControlMessage) and reply.kind == "stop":
                return
    finally:
        chan.close()
