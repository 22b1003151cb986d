"""Federated meta-learning over multimodal clients, plus the centralized muted-branch baseline.

A round: the server samples ``m`` clients and sends them the global
parameters. Each client adapts a copy on its (possibly modality-masked)
support set with plain SGD and returns the full-modality query-set gradient at
the adapted parameters (first-order MAML). The server subtracts ``beta`` times
the sum (or mean) of those gradients.

The trainers only need a *learner* object with

    init_params(seed) -> ParamSet
    loss_and_grad(params, batch, mask) -> (mean loss, ParamSet grad, n_correct)
    logits(params, batch, mask) -> ndarray [N, K]

so tests can drive them with toy models.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import (AlignedDataset, ClientShard, apply_scenario, partition_clients, read_manifest,
                   read_tensor_file, scenario_mask, split_shards, train_test_split, write_manifest,
                   write_tensor_file)
from .errors import ConfigError, DivergenceError
from .model import FULL, ModalityMask
from .tensor_core import ParamSet, log_softmax, sgd_step

log = logging.getLogger(__name__)

# Stream tags keep the different random draws of a run independent of each other.
_SAMPLING = 1
_BATCHES = 2
_BASELINE = 3


class Learner(Protocol):
    def init_params(self, seed: int) -> ParamSet: ...

    def loss_and_grad(self, params: ParamSet, batch, mask: ModalityMask) -> tuple[float, ParamSet, int]: ...

    def logits(self, params: ParamSet, batch, mask: ModalityMask) -> np.ndarray: ...


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 1e-5
    outer_lr: float = 1e-3
    rounds: int = 50
    local_epochs: int = 5
    clients_total: int = 3
    clients_per_round: int | None = None
    scenario: str = "full"
    aggregation: str = "sum"
    seed: int = 0
    batch_size: int = 32
    support_fraction: float = 0.2
    test_fraction: float = 0.2
    eval_chunk: int = 128

    @property
    def m(self) -> int:
        return self.clients_total if self.clients_per_round is None else self.clients_per_round

    def validate(self) -> "MetaConfig":
        if not self.inner_lr >= 0 or not math.isfinite(self.inner_lr):
            raise ConfigError(f"inner_lr must be >= 0, got {self.inner_lr}")
        if not self.outer_lr > 0 or not math.isfinite(self.outer_lr):
            raise ConfigError(f"outer_lr must be > 0, got {self.outer_lr}")
        for name in ("local_epochs", "clients_total", "batch_size", "eval_chunk"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if not 1 <= self.m <= self.clients_total:
            raise ConfigError(f"clients_per_round must be in [1, {self.clients_total}], got {self.m}")
        if self.aggregation not in ("sum", "mean"):
            raise ConfigError(f"aggregation must be 'sum' or 'mean', got {self.aggregation!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        scenario_mask(self.scenario)
        if self.inner_lr >= self.outer_lr:
            log.info("inner_lr %g >= outer_lr %g; the usual setting keeps inner < outer",
                     self.inner_lr, self.outer_lr)
        return self


@dataclass(frozen=True)
class BaselineConfig:
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 32
    scenario: str = "full"
    seed: int = 0
    test_fraction: float = 0.2
    eval_chunk: int = 128

    def validate(self) -> "BaselineConfig":
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.eval_chunk < 1:
            raise ConfigError("batch_size and eval_chunk must be >= 1")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        scenario_mask(self.scenario)
        return self


@dataclass
class ClientResult:
    client_id: int
    grad: ParamSet
    support_loss: float
    query_loss: float
    query_correct: int
    query_size: int


@dataclass
class RoundReport:
    round: int
    clients: list[int] = field(default_factory=list)
    support_loss: dict[int, float] = field(default_factory=dict)
    query_loss: dict[int, float] = field(default_factory=dict)
    train_loss: float = float("nan")
    train_acc: float = float("nan")
    test_loss: float = float("nan")
    test_acc: float = float("nan")
    update: ParamSet | None = field(default=None, repr=False)


@dataclass
class GlobalState:
    round: int
    theta: ParamSet
    history: list[RoundReport] = field(default_factory=list)


def _check_finite(value: float, what: str, round=None, client=None):
    if not math.isfinite(value):
        raise DivergenceError(f"{what} is {value}", round=round, client=client)


def mean_loss_and_grad(learner: Learner, params: ParamSet, data: AlignedDataset, mask: ModalityMask,
                       chunk: int) -> tuple[float, ParamSet, int]:
    """Whole-set mean loss and gradient, accumulated over chunks weighted by size."""
    n = len(data)
    if n <= chunk:
        return learner.loss_and_grad(params, data, mask)
    loss_total = 0.0
    grad_total = None
    correct = 0
    for batch in data.batches(chunk):
        w = len(batch) / n
        loss, grad, ok = learner.loss_and_grad(params, batch, mask)
        loss_total += w * loss
        grad = grad.scale(w)
        grad_total = grad if grad_total is None else grad_total + grad
        correct += ok
    return loss_total, grad_total, correct


def adapt(learner: Learner, theta: ParamSet, support: AlignedDataset, mask: ModalityMask, inner_lr: float,
          epochs: int, batch_size: int, rng: np.random.Generator) -> tuple[ParamSet, float]:
    """Inner loop: ``epochs`` shuffled passes of SGD over the support set.

    Returns the adapted parameters and the mean pre-step batch loss.
    """
    theta_u = theta
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(support))
        for batch in support.batches(batch_size, order):
            loss, grad, _ = learner.loss_and_grad(theta_u, batch, mask)
            losses.append(loss)
            theta_u = sgd_step(theta_u, grad, inner_lr)
    return theta_u, float(np.mean(losses)) if losses else float("nan")


def local_training(learner: Learner, theta: ParamSet, shard: ClientShard, inner_lr: float, epochs: int,
                   batch_size: int, rng: np.random.Generator, eval_chunk: int = 128,
                   round: int | None = None) -> ClientResult:
    """One client's contribution: adapt on support (masked), gradient on query (full) at the adapted point."""
    if shard.support is None or shard.query is None or not len(shard.support) or not len(shard.query):
        raise ConfigError(f"client {shard.client_id} needs non-empty support and query sets")
    theta_u, support_loss = adapt(learner, theta, shard.support, shard.mask, inner_lr, epochs, batch_size, rng)
    _check_finite(support_loss, "support loss", round, shard.client_id)
    query_loss, g_u, correct = mean_loss_and_grad(learner, theta_u, shard.query, shard.query_mask, eval_chunk)
    _check_finite(query_loss, "query loss", round, shard.client_id)
    if not g_u.all_finite():
        raise DivergenceError("query gradient is not finite", round=round, client=shard.client_id)
    return ClientResult(shard.client_id, g_u, support_loss, query_loss, correct, len(shard.query))


def sample_clients(cfg: MetaConfig, t: int) -> list[int]:
    rng = np.random.default_rng([cfg.seed, _SAMPLING, t])
    return sorted(int(c) for c in rng.choice(cfg.clients_total, size=cfg.m, replace=False))


def aggregate(results: Sequence[ClientResult], cfg: MetaConfig) -> ParamSet:
    """The server step beta * (sum or mean of g_u), summed in ascending client id."""
    ordered = sorted(results, key=lambda r: r.client_id)
    total = ordered[0].grad.copy()
    for r in ordered[1:]:
        total = total + r.grad
    if cfg.aggregation == "mean":
        total = total.scale(1.0 / len(ordered))
    return total.scale(cfg.outer_lr)


def evaluate(learner: Learner, theta: ParamSet, data: AlignedDataset, mask: ModalityMask = FULL,
             chunk: int = 128, return_predictions: bool = False):
    """Accuracy (argmax, ties to the lowest class) and mean cross-entropy."""
    if not len(data):
        raise ConfigError("cannot evaluate on an empty set")
    preds = []
    loss_sum = 0.0
    for batch in data.batches(chunk):
        z = learner.logits(theta, batch, mask)
        preds.append(np.argmax(z, axis=1))
        logp = log_softmax(z)
        loss_sum += -logp[np.arange(len(batch)), batch.labels].sum()
    preds = np.concatenate(preds)
    acc = float(np.mean(preds == data.labels))
    loss = loss_sum / len(data)
    if return_predictions:
        return acc, loss, preds
    return acc, loss


def server_round(learner: Learner, state: GlobalState, shards: Sequence[ClientShard], cfg: MetaConfig,
                 test: AlignedDataset | None = None, client_order: Sequence[int] | None = None) -> GlobalState:
    """Run round ``state.round + 1`` and return the new state (``state`` is left untouched).

    ``client_order`` only changes the order in which sampled clients are
    visited; the result does not depend on it.
    """
    if len(shards) != cfg.clients_total:
        raise ConfigError(f"expected {cfg.clients_total} shards, got {len(shards)}")
    by_id = {s.client_id: s for s in shards}
    t = state.round + 1
    sampled = sample_clients(cfg, t)
    visit = sampled if client_order is None else [c for c in client_order if c in sampled]
    results = []
    for cid in visit:
        rng = np.random.default_rng([cfg.seed, _BATCHES, t, cid])
        results.append(local_training(learner, state.theta, by_id[cid], cfg.inner_lr, cfg.local_epochs,
                                       cfg.batch_size, rng, cfg.eval_chunk, round=t))
    update = aggregate(results, cfg)
    theta = state.theta - update
    if not theta.all_finite():
        raise DivergenceError("global parameters became non-finite", round=t)
    results.sort(key=lambda r: r.client_id)
    n_query = sum(r.query_size for r in results)
    report = RoundReport(
        round=t,
        clients=sampled,
        support_loss={r.client_id: r.support_loss for r in results},
        query_loss={r.client_id: r.query_loss for r in results},
        train_loss=sum(r.query_loss * r.query_size for r in results) / n_query,
        train_acc=sum(r.query_correct for r in results) / n_query,
        update=update,
    )
    if test is not None:
        report.test_acc, report.test_loss = evaluate(learner, theta, test, FULL, cfg.eval_chunk)
    return GlobalState(t, theta, state.history + [report])


def build_shards(train: AlignedDataset, cfg: MetaConfig) -> list[ClientShard]:
    shards = partition_clients(train, cfg.clients_total, cfg.seed)
    shards = split_shards(shards, cfg.support_fraction, cfg.seed)
    return apply_scenario(shards, cfg.scenario)


def run_3mf(dataset: AlignedDataset, learner: Learner, cfg: MetaConfig, *, resume: GlobalState | None = None,
            checkpoint_dir=None, test: AlignedDataset | None = None,
            callback=None) -> tuple[GlobalState, list[RoundReport]]:
    """Split, shard, initialize and run ``cfg.rounds`` server rounds.

    ``test`` overrides the held-out set; by default a stratified split of
    ``dataset`` is used. With ``resume`` the run continues from that state's
    round and only the new rounds are reported. ``callback`` is called with
    every report as soon as it exists.
    """
    cfg.validate()
    if test is None:
        train, test = train_test_split(dataset, cfg.test_fraction, cfg.seed)
    else:
        train = dataset
    shards = build_shards(train, cfg)
    if resume is None:
        state = GlobalState(0, learner.init_params(cfg.seed))
        first = RoundReport(round=0)
        query = AlignedDataset.concat([s.query for s in shards])
        first.train_acc, first.train_loss = evaluate(learner, state.theta, query, FULL, cfg.eval_chunk)
        first.test_acc, first.test_loss = evaluate(learner, state.theta, test, FULL, cfg.eval_chunk)
        state.history.append(first)
        if callback is not None:
            callback(first)
    else:
        state = GlobalState(resume.round, resume.theta.copy())
    while state.round < cfg.rounds:
        state = server_round(learner, state, shards, cfg, test)
        r = state.history[-1]
        log.info("round %d: train loss %.4f acc %.4f | test loss %.4f acc %.4f",
                 r.round, r.train_loss, r.train_acc, r.test_loss, r.test_acc)
        if callback is not None:
            callback(r)
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, state, cfg)
    return state, state.history


def train_baseline(dataset: AlignedDataset, learner: Learner, cfg: BaselineConfig,
                   test: AlignedDataset | None = None, callback=None) -> tuple[ParamSet, list[RoundReport]]:
    """Centralized mini-batch SGD with the scenario's branches muted; tested on full modality.

    Train metrics are measured under the training mask, test metrics under
    the full mask. Entry 0 is the untrained model.
    """
    cfg.validate()
    if test is None:
        train, test = train_test_split(dataset, cfg.test_fraction, cfg.seed)
    else:
        train = dataset
    mask = scenario_mask(cfg.scenario)
    theta = learner.init_params(cfg.seed)
    history = []

    def record(epoch):
        r = RoundReport(round=epoch)
        r.train_acc, r.train_loss = evaluate(learner, theta, train, mask, cfg.eval_chunk)
        r.test_acc, r.test_loss = evaluate(learner, theta, test, FULL, cfg.eval_chunk)
        history.append(r)
        if callback is not None:
            callback(r)

    record(0)
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, _BASELINE, epoch])
        for batch in train.batches(cfg.batch_size, rng.permutation(len(train))):
            loss, grad, _ = learner.loss_and_grad(theta, batch, mask)
            _check_finite(loss, "baseline training loss", round=epoch)
            theta = sgd_step(theta, grad, cfg.lr)
        record(epoch)
        log.info("epoch %d: test acc %.4f", epoch, history[-1].test_acc)
    return theta, history


# ---------------------------------------------------------------------------
# Checkpoints: params.mmtf + checkpoint.txt (round and MetaConfig fields).


def save_checkpoint(directory, state: GlobalState, cfg: MetaConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor_file(directory / "params.mmtf", list(state.theta.items()))
    entries = {"round": state.round}
    entries.update({f"config.{k}": v for k, v in asdict(cfg).items()})
    write_manifest(directory / "checkpoint.txt", entries)
    return directory


def _parse_field(cls, name: str, raw: str):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    if raw == "None":
        return None
    if "int" in str(ftype):
        return int(raw)
    if "float" in str(ftype):
        return float(raw)
    return raw


def load_checkpoint(directory) -> tuple[GlobalState, MetaConfig]:
    directory = Path(directory)
    manifest = read_manifest(directory / "checkpoint.txt")
    kwargs = {k[len("config."):]: v for k, v in manifest.items() if k.startswith("config.")}
    cfg = MetaConfig(**{k: _parse_field(MetaConfig, k, v) for k, v in kwargs.items()})
    theta = ParamSet(read_tensor_file(directory / "params.mmtf"))
    return GlobalState(int(manifest["round"]), theta), cfg
