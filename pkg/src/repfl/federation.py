"""Federated round loop: contrastive representation rounds, personalized heads,
and the FedAvg / FedProx / fine-tuning baselines.

Every stochastic choice draws from an :class:`RngStream` keyed by
(seed, domain, client, round), and uploads are aggregated in client-id
order, so results do not depend on how many worker threads run the
client updates.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import ClientData
from .errors import ConfigError, ContractError, DataError, NumericError
from .nn import (HEAD_KINDS, EncoderParams, HeadParams, OptimizerState,
                 encoder_backward, encoder_forward, head_forward_loss, init_encoder,
                 init_head, optimizer_step, predict, stack_backward, stack_forward)
from .numerics import RngStream, init_params, l2_normalize_rows
from .supcon import AugmentationPolicy, ContrastiveBatch, augment, augment_twice, sc_grad_r, sc_loss

log = logging.getLogger(__name__)

METHODS = ("repper", "fedavg", "fedavg-ft", "fedprox", "fedprox-ft")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 20
    participation: float = 0.2
    rounds: int = 100
    local_epochs: int = 10
    pcl_epochs: int = 10
    batch_size: int = 256
    lr_rep: float = 1e-3
    lr_cls: float = 1e-3
    temperature: float = 0.1
    alpha: float = 0.5
    optimizer: str = "adam"
    weight_decay: float = 1e-4
    prox_mu: float = 0.01
    seed: int = 0
    method: str = "repper"
    ft_epochs: int = 10
    adapt_iterations: int = 100
    lr_decay: float = 0.1
    lr_decay_round: int = -1
    min_size: int = 10
    encoder_hidden: tuple = (256, 128)
    feature_dim: int = 64
    projection_dim: int = 0
    head_kind: str = "logistic"
    head_hidden: int = 64
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    baseline_augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        self.validate()

    def validate(self):
        if not 0 < self.participation <= 1:
            raise ConfigError(f"participation must lie in (0, 1], got {self.participation}")
        for name in ("num_clients", "rounds", "local_epochs", "pcl_epochs", "batch_size",
                     "feature_dim", "head_hidden"):
            value = getattr(self, name)
            # zero rounds / epochs are legal no-ops
            floor = 0 if name in ("rounds", "local_epochs", "pcl_epochs") else 1
            if value < floor:
                raise ConfigError(f"{name} must be >= {floor}, got {value}")
        for name in ("ft_epochs", "adapt_iterations", "min_size", "projection_dim"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr_rep < 0 or self.lr_cls < 0:
            raise ConfigError("learning rates must be non-negative")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be non-negative")

    @property
    def clients_per_round(self) -> int:
        return max(math.floor(self.participation * self.num_clients + 1e-9), 1)

    def decay_round(self) -> int:
        return self.lr_decay_round if self.lr_decay_round >= 0 else math.ceil(2 * self.rounds / 3)

    def lr_at(self, t: int) -> float:
        return self.lr_rep * (self.lr_decay if t >= self.decay_round() else 1.0)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d


def sample_clients(t: int, num_clients: int, participation: float, rng: RngStream) -> np.ndarray:
    """Uniformly pick ``max(floor(C*K), 1)`` distinct clients for round ``t``."""
    m = max(math.floor(participation * num_clients + 1e-9), 1)
    gen = rng.child(domain="sample", client=0, round=t).generator()
    return np.sort(gen.choice(num_clients, size=m, replace=False))


def aggregation_weights(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0 or np.any(counts < 0) or counts.sum() <= 0:
        raise ContractError("sample counts must be non-negative with a positive total")
    return counts / counts.sum()


def _as_vector(params):
    if hasattr(params, "flatten") and not isinstance(params, np.ndarray):
        return params.flatten()
    return np.asarray(params, dtype=np.float64).ravel()


def aggregate(uploads):
    """Sample-count weighted average of uploaded parameters.

    ``uploads`` is a sequence of ``(params, n_i)``; weights are renormalized
    over the uploads given.  The average is accumulated as offsets from the
    first upload, so identical uploads (and a single upload) come back
    bit-for-bit unchanged.
    """
    uploads = list(uploads)
    if not uploads:
        raise ContractError("nothing to aggregate")
    template = uploads[0][0]
    vecs = [_as_vector(p) for p, _ in uploads]
    for k, v in enumerate(vecs[1:], start=1):
        if v.shape != vecs[0].shape:
            raise ContractError(f"upload {k} has {v.shape[0]} parameters, expected {vecs[0].shape[0]}")
    structured = hasattr(template, "unflatten")
    if structured:
        shapes = _shapes_of(template)
        for k, (p, _) in enumerate(uploads[1:], start=1):
            if _shapes_of(p) != shapes:
                raise ContractError(f"upload {k} parameter shapes differ from upload 0")
    weights = aggregation_weights([n for _, n in uploads])
    out = vecs[0].copy()
    for w, v in zip(weights[1:], vecs[1:]):
        out += w * (v - vecs[0])
    if structured:
        return template.unflatten(out)
    return out.reshape(np.shape(template))


def _shapes_of(params):
    return [np.shape(a) for a in params.arrays()]


@dataclass(frozen=True)
class JointModel:
    """Encoder plus classification head, trained end to end by the baselines."""

    encoder: EncoderParams
    head: HeadParams

    def arrays(self) -> list:
        return self.encoder.arrays() + self.head.arrays()

    def with_arrays(self, arrays):
        arrays = list(arrays)
        k = len(self.encoder.arrays())
        return JointModel(self.encoder.with_arrays(arrays[:k]), self.head.with_arrays(arrays[k:]))

    def flatten(self):
        return np.concatenate([self.encoder.flatten(), self.head.flatten()])

    def unflatten(self, vec):
        k = self.encoder.num_params
        return JointModel(self.encoder.unflatten(vec[:k]), self.head.unflatten(vec[k:]))

    def predict(self, x):
        r, _ = encoder_forward(self.encoder, x)
        return predict(self.head, r)


@dataclass(frozen=True)
class RepresentationModel:
    """Encoder with an optional projection stack used only while training."""

    encoder: EncoderParams
    projection: EncoderParams = None

    def arrays(self) -> list:
        extra = self.projection.arrays() if self.projection is not None else []
        return self.encoder.arrays() + extra

    def with_arrays(self, arrays):
        arrays = list(arrays)
        k = len(self.encoder.arrays())
        proj = None if self.projection is None else self.projection.with_arrays(arrays[k:])
        return RepresentationModel(self.encoder.with_arrays(arrays[:k]), proj)

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec):
        k = self.encoder.num_params
        proj = None if self.projection is None else self.projection.unflatten(vec[k:])
        return RepresentationModel(self.encoder.unflatten(vec[:k]), proj)

    def shapes(self):
        return [a.shape for a in self.arrays()]


@dataclass
class RoundTrace:
    round: int
    selected: list
    mean_train_loss: float
    client_losses: dict


@dataclass(frozen=True)
class PersonalizedModel:
    client_id: int
    encoder: EncoderParams
    head: HeadParams
    trace: tuple = ()

    def predict(self, x):
        r, _ = encoder_forward(self.encoder, x)
        return predict(self.head, r)


def init_representation(d: int, config: FederationConfig) -> RepresentationModel:
    rng = RngStream(config.seed, "init-encoder")
    dims = [d, *config.encoder_hidden, config.feature_dim]
    enc = init_encoder(dims, rng)
    proj = None
    if config.projection_dim:
        g, p = config.feature_dim, config.projection_dim
        gen = RngStream(config.seed, "init-projection").generator()
        proj = EncoderParams((init_params((g, g), gen), init_params((g, p), gen)),
                             (np.zeros(g), np.zeros(p)), ("relu", "none"))
    return RepresentationModel(enc, proj)


def _batches(n, batch_size, gen):
    order = gen.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def _contrastive_step(model: RepresentationModel, x2, y2, tau):
    r, enc_cache = encoder_forward(model.encoder, x2)
    feats, proj_cache = r, None
    if model.projection is not None:
        feats, proj_cache = stack_forward(model.projection, r)
    z, norms, degenerate = l2_normalize_rows(feats)
    if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(norms))):
        return float("nan"), None
    batch = ContrastiveBatch(z, y2, tau, degenerate)
    loss = sc_loss(batch)
    grad, _ = sc_grad_r(batch, norms, full=True)
    grad /= len(batch)
    grads = []
    if proj_cache is not None:
        proj_grads, grad = stack_backward(proj_cache, grad)
        grads = proj_grads
    enc_grads, _ = encoder_backward(enc_cache, grad)
    return loss.mean, enc_grads + grads


def client_update_crl(client: ClientData, start: RepresentationModel, config: FederationConfig,
                      rng: RngStream, lr: float = None):
    """Local contrastive training from ``start``; returns ``(model, epoch_losses)``."""
    if isinstance(start, EncoderParams):
        start = RepresentationModel(start)
    lr = config.lr_rep if lr is None else lr
    if client.n_train == 0:
        raise DataError(f"client {client.client_id} has no training data")
    gen = rng.generator()
    state = OptimizerState(config.optimizer, lr, config.weight_decay)
    model = start
    epoch_losses = []
    for _ in range(config.local_epochs):
        losses = []
        for b, idx in enumerate(_batches(client.n_train, config.batch_size, gen)):
            x2, y2 = augment_twice(client.train_x[idx], client.train_y[idx],
                                   config.augmentation, gen)
            loss, grads = _contrastive_step(model, x2, y2, config.temperature)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite SC loss on client {client.client_id}, batch {b}",
                                   client=client.client_id, batch=b)
            model = model.with_arrays(optimizer_step(state, model.arrays(), grads,
                                                     client=client.client_id))
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return model, epoch_losses


def _map_clients(fn, items, workers):
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


@dataclass
class CRLResult:
    model: RepresentationModel
    traces: list

    @property
    def encoder(self) -> EncoderParams:
        return self.model.encoder


def _federate(clients, init, config, local_update, workers):
    """Shared round loop: sample, update selected clients in parallel, aggregate."""
    if len(clients) != config.num_clients:
        raise ContractError(f"{len(clients)} clients given but config expects {config.num_clients}")
    root = RngStream(config.seed)
    model = init
    traces = []
    for t in range(config.rounds):
        selected = sample_clients(t, config.num_clients, config.participation, root)
        lr = config.lr_at(t)

        def work(i, model=model, lr=lr, t=t):
            return local_update(clients[i], model, RngStream(config.seed, "local", int(i), t), lr)

        results = _map_clients(work, list(selected), workers)
        uploads = [(m, clients[i].n_train) for i, (m, _) in zip(selected, results)]
        model = aggregate(uploads)
        client_losses = {int(i): (float(l[-1]) if l else float("nan"))
                         for i, (_, l) in zip(selected, results)}
        finite = [v for v in client_losses.values() if np.isfinite(v)]
        traces.append(RoundTrace(t, [int(i) for i in selected],
                                 float(np.mean(finite)) if finite else float("nan"),
                                 client_losses))
        log.debug("round %d clients %s loss %.4f", t, selected.tolist(), traces[-1].mean_train_loss)
    return model, traces


def run_crl(clients, config: FederationConfig, workers: int = 1) -> CRLResult:
    """Federated contrastive training of the shared encoder."""
    init = init_representation(clients[0].train_x.shape[1], config)

    def local(client, model, rng, lr):
        return client_update_crl(client, model, config, rng, lr)

    model, traces = _federate(clients, init, config, local, workers)
    return CRLResult(model, traces)


def train_head(encoder: EncoderParams, client: ClientData, head: HeadParams, epochs: int,
               config: FederationConfig, rng: RngStream):
    """Fit ``head`` on frozen-encoder features; returns ``(head, epoch_losses)``."""
    feats, _ = encoder_forward(encoder, client.train_x)
    gen = rng.generator()
    state = OptimizerState(config.optimizer, config.lr_cls, config.weight_decay)
    losses = []
    for _ in range(epochs):
        batch_losses = []
        for idx in _batches(client.n_train, config.batch_size, gen):
            loss, grads, _ = head_forward_loss(head, feats[idx], client.train_y[idx])
            head = head.with_arrays(optimizer_step(state, head.arrays(), grads,
                                                   client=client.client_id))
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
    return head, losses


def run_pcl(encoder: EncoderParams, client: ClientData, head_kind: str,
            config: FederationConfig, epochs: int = None, num_classes: int = None,
            client_id: int = None) -> PersonalizedModel:
    """Train a personalized head for one client with the encoder frozen."""
    if isinstance(encoder, RepresentationModel):
        encoder = encoder.encoder
    if head_kind not in HEAD_KINDS:
        raise ConfigError(f"unknown head kind {head_kind!r}")
    epochs = config.pcl_epochs if epochs is None else epochs
    num_classes = client.num_classes if num_classes is None else num_classes
    cid = client.client_id if client_id is None else client_id
    head = init_head(head_kind, encoder.g, num_classes,
                     RngStream(config.seed, "head-init", cid), hidden=config.head_hidden)
    head, losses = train_head(encoder, client, head, epochs, config,
                              RngStream(config.seed, "pcl", cid))
    return PersonalizedModel(cid, encoder, head, tuple(losses))


def adapt_new_client(encoder: EncoderParams, client: ClientData, head_kind: str,
                     iterations: int, config: FederationConfig,
                     client_id: int = None) -> PersonalizedModel:
    """Head-only adaptation for a client that took no part in federated training.

    ``iterations`` counts passes over the client's mini-batches; the head is
    sized to the new client's own class count.
    """
    if isinstance(encoder, RepresentationModel):
        encoder = encoder.encoder
    if client.train_x.shape[1] != encoder.in_dim:
        raise DataError(f"new client has {client.train_x.shape[1]} features, "
                        f"encoder expects {encoder.in_dim}")
    return run_pcl(encoder, client, head_kind, config, epochs=iterations,
                   num_classes=client.num_classes, client_id=client_id)


def init_joint_model(d: int, num_classes: int, config: FederationConfig) -> JointModel:
    enc = init_representation(d, replace(config, projection_dim=0)).encoder
    head = init_head("logistic", enc.g, num_classes, RngStream(config.seed, "init-head"))
    return JointModel(enc, head)


def client_update_supervised(client: ClientData, start: JointModel, config: FederationConfig,
                             rng: RngStream, lr: float = None, prox_mu: float = 0.0):
    """Local cross-entropy training of the joint model, with an optional proximal pull
    ``prox_mu/2 * ||w - w_start||^2`` toward the round's global parameters."""
    lr = config.lr_rep if lr is None else lr
    gen = rng.generator()
    state = OptimizerState(config.optimizer, lr, config.weight_decay)
    anchor = start.arrays()
    model = start
    epoch_losses = []
    for _ in range(config.local_epochs):
        losses = []
        for b, idx in enumerate(_batches(client.n_train, config.batch_size, gen)):
            x = client.train_x[idx]
            if config.baseline_augment:
                x = augment(x, config.augmentation, gen)
            r, cache = encoder_forward(model.encoder, x)
            loss, head_grads, grad_r = head_forward_loss(model.head, r, client.train_y[idx],
                                                         input_grad=True)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss on client {client.client_id}, batch {b}",
                                   client=client.client_id, batch=b)
            enc_grads, _ = encoder_backward(cache, grad_r)
            grads = enc_grads + head_grads
            if prox_mu:
                grads = [g + prox_mu * (p - a) for g, p, a in zip(grads, model.arrays(), anchor)]
            model = model.with_arrays(optimizer_step(state, model.arrays(), grads,
                                                     client=client.client_id))
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return model, epoch_losses


def proximal_gradient(params, anchor, mu: float):
    return [mu * (np.asarray(p) - np.asarray(a)) for p, a in zip(params, anchor)]


@dataclass
class BaselineResult:
    model: JointModel
    traces: list
    personalized: list = None

    def predictors(self, num_clients):
        if self.personalized is not None:
            return {m.client_id: m for m in self.personalized}
        return {i: self.model for i in range(num_clients)}


def run_baseline(clients, config: FederationConfig, workers: int = 1,
                 ft_epochs: int = None) -> BaselineResult:
    """FedAvg or FedProx training, plus per-client head fine-tuning for the -ft variants."""
    if config.method == "repper":
        raise ConfigError("run_baseline needs a baseline method tag")
    mu = config.prox_mu if config.method.startswith("fedprox") else 0.0
    init = init_joint_model(clients[0].train_x.shape[1], clients[0].num_classes, config)

    def local(client, model, rng, lr):
        return client_update_supervised(client, model, config, rng, lr, prox_mu=mu)

    model, traces = _federate(clients, init, config, local, workers)
    result = BaselineResult(model, traces)
    if config.method.endswith("-ft"):
        epochs = config.ft_epochs if ft_epochs is None else ft_epochs

        def tune(client):
            head, losses = train_head(model.encoder, client, model.head, epochs, config,
                                      RngStream(config.seed, "finetune", client.client_id))
            return PersonalizedModel(client.client_id, model.encoder, head, tuple(losses))

        result.personalized = _map_clients(tune, list(clients), workers)
    return result


def personalize_all(encoder, clients, config: FederationConfig, head_kind: str = None,
                    workers: int = 1) -> list:
    kind = config.head_kind if head_kind is None else head_kind
    return _map_clients(lambda c: run_pcl(encoder, c, kind, config), list(clients), workers)
