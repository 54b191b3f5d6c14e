"""Expectation-maximization training loop.

Each step embeds two augmented views of a mixed labeled/unlabeled batch,
assigns pseudo-labels to the unlabeled rows by solving a transport problem
against the current class prior (E-step), then takes one SGD step on the
weighted contrastive/prototype objective (M-step).  After each epoch the
class prior moves toward the argmax class frequencies of the unlabeled pool
and every prototype toward the mean embedding of the samples assigned to it.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .data import Dataset, augment
from .errors import ConfigInvalid, EmptyDataset, TooFewSamples
from .losses import (LossConfig, LossTerm, instance_contrastive, kl_prior_regularizer,
                     overall_loss, prototype_loss, supervised_contrastive)
from .metrics import MetricsReport, evaluate
from .priors import (ClassPrior, PrototypeBank, empirical_argmax_distribution,
                     predict_distribution, predict_distribution_vjp, update_prior,
                     update_prototypes)
from .sinkhorn import TransportProblem, pseudo_labels, sinkhorn_plan

LOSS_NAMES = ("ins", "proto", "sup", "kl")


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 512
    unlabeled_fraction: float | None = None  # None: proportional to pool sizes
    sinkhorn_lambda: float = 1.0
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6
    temperature: float = 0.1
    tau_pred: float = 0.1
    lambda_proto: float = 1.0
    lambda_sup: float = 1.0
    lambda_kl: float = 0.0
    lambda_ins: float = 1.0
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    mu: float = 0.99
    queue_capacity: int = 2048
    sigma_aug: float = 0.1
    hidden_dim: int = 128
    embed_dim: int = 128
    estimate_prior: bool = True
    seed: int = 0
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.batch_size < 4:
            problems.append("batch_size must be >= 4")
        if self.queue_capacity != 0 and self.queue_capacity < self.batch_size:
            problems.append("queue_capacity must be 0 or >= batch_size")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.unlabeled_fraction is not None and not 0 < self.unlabeled_fraction < 1:
            problems.append("unlabeled_fraction must lie in (0, 1)")
        if not 0 <= self.mu <= 1:
            problems.append("mu must lie in [0, 1]")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if self.eval_every < 1:
            problems.append("eval_every must be >= 1")
        if self.temperature <= 0 or self.tau_pred <= 0 or self.sinkhorn_lambda <= 0:
            problems.append("temperatures and sinkhorn_lambda must be positive")
        if min(self.lambda_proto, self.lambda_sup, self.lambda_kl, self.lambda_ins) < 0:
            problems.append("loss weights must be nonnegative")
        if problems:
            raise ConfigInvalid("; ".join(problems))

    def loss_config(self) -> LossConfig:
        return LossConfig(self.temperature, self.lambda_proto, self.lambda_sup,
                          self.lambda_kl, self.sigma_aug, self.lambda_ins)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc


class EmbeddingQueue:
    """FIFO of recent unlabeled embeddings and their prediction rows."""

    def __init__(self, capacity: int, embed_dim: int, num_classes: int):
        self.capacity = capacity
        self.embeddings = np.zeros((0, embed_dim))
        self.predictions = np.zeros((0, num_classes))
        self.seen = 0

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def push(self, embeddings: np.ndarray, predictions: np.ndarray) -> None:
        self.seen += embeddings.shape[0]
        if self.capacity == 0:
            return
        self.embeddings = np.concatenate([self.embeddings, embeddings])[-self.capacity:]
        self.predictions = np.concatenate([self.predictions, predictions])[-self.capacity:]


@dataclass
class TrainState:
    params: enc.EncoderParams
    opt: enc.OptimizerState
    bank: PrototypeBank
    prior: ClassPrior
    queue: EmbeddingQueue
    rng: np.random.Generator
    epoch: int = 0
    # last-seen embedding/assignment per unlabeled row, refreshed every epoch
    last_embeddings: np.ndarray | None = field(default=None, repr=False)
    last_assignments: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Batch:
    index: np.ndarray
    x: np.ndarray
    x_prime: np.ndarray
    labels: np.ndarray
    is_labeled: np.ndarray


@dataclass
class EStepResult:
    assignments: np.ndarray
    soft_labels: np.ndarray
    predictions: np.ndarray
    iterations: int
    row_residual: float
    col_residual: float


@dataclass
class StepLog:
    total: float
    contributions: dict
    grad_norm: float
    skipped_anchors: int = 0


@dataclass
class EpochLog:
    epoch: int
    losses: dict
    total_loss: float
    grad_norm: float
    sinkhorn_iters: float
    sinkhorn_residual: float
    prior: list
    z: list
    stale_prototypes: int
    steps: int


def _unit_rows(a):
    return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)


def _farthest_point(candidates: np.ndarray, anchors: np.ndarray, k: int) -> np.ndarray:
    """Greedily pick ``k`` candidate rows least similar to anchors and each other."""
    chosen = []
    sim = (candidates @ anchors.T).max(axis=1) if len(anchors) else np.full(len(candidates), -np.inf)
    for _ in range(k):
        i = int(np.argmin(sim))
        chosen.append(i)
        sim = np.maximum(sim, candidates @ candidates[i])
    return np.asarray(chosen)


def initialize_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    """Fresh encoder, uniform prior and data-initialized prototypes.

    Known-class prototypes are the normalized mean labeled embedding of each
    class.  Unknown-class prototypes are taken from a seeded random subset of
    unlabeled embeddings by farthest-point selection away from the known
    prototypes, followed by one nearest-prototype averaging pass.
    """
    config.validate()
    c = dataset.num_classes
    d = dataset.features.shape[1]
    params = enc.EncoderParams.init(
        enc.EncoderConfig(d, config.hidden_dim, config.embed_dim, seed=config.seed))
    opt = enc.OptimizerState.for_params(
        params, momentum=config.momentum, weight_decay=config.weight_decay,
        base_lr=config.lr, epoch_count=max(config.epochs, 1))
    rng = np.random.default_rng([config.seed, 1])
    init_rng = np.random.default_rng([config.seed, 2])

    lab, unl = dataset.labeled_index, dataset.unlabeled_index
    if len(unl) < 2 or len(lab) < 2:
        raise EmptyDataset("need at least 2 labeled and 2 unlabeled samples")
    known = sorted(dataset.known_classes)
    protos = np.zeros((c, config.embed_dim))
    v_lab, _ = enc.forward(params, dataset.features[lab])
    for k in known:
        rows = v_lab[dataset.labels[lab] == k]
        protos[k] = rows.mean(axis=0) if len(rows) else v_lab.mean(axis=0)
    protos[known] = _unit_rows(protos[known])
    unknown = [k for k in range(c) if k not in dataset.known_classes]
    pool = init_rng.permutation(unl)[:max(64 * len(unknown), 1024)]
    v_pool, _ = enc.forward(params, dataset.features[pool])
    picks = _farthest_point(v_pool, protos[known], len(unknown))
    protos[unknown] = v_pool[picks]
    # one Lloyd pass over the pool pulls the picks off outliers
    nearest = np.argmax(v_pool @ protos.T, axis=1)
    for k in unknown:
        members = v_pool[nearest == k]
        if len(members):
            protos[k] = _unit_rows(members.mean(axis=0, keepdims=True))[0]

    return TrainState(
        params=params,
        opt=opt,
        bank=PrototypeBank(protos, config.mu),
        prior=ClassPrior.uniform(c, config.mu),
        queue=EmbeddingQueue(config.queue_capacity, config.embed_dim, c),
        rng=rng,
    )


def e_step(state: TrainState, embeddings: np.ndarray, config: TrainConfig) -> EStepResult:
    """Transport-constrained pseudo-labels for one batch of unlabeled embeddings.

    Queue rows join the transport problem, contributing marginal mass only.
    """
    b = embeddings.shape[0]
    if b < 2:
        raise TooFewSamples("E-step needs at least 2 unlabeled samples")
    preds = predict_distribution(embeddings, state.bank, config.tau_pred)
    combined = np.concatenate([preds, state.queue.predictions]) if len(state.queue) else preds
    m = combined.shape[0]
    problem = TransportProblem(combined, np.full(m, 1.0 / m), state.prior.r,
                               config.sinkhorn_lambda, config.sinkhorn_iters, config.sinkhorn_tol)
    plan = sinkhorn_plan(problem)
    rows = plan.plan[:b]
    soft = rows / rows.sum(axis=1, keepdims=True)
    return EStepResult(pseudo_labels(soft), soft, preds, plan.iterations_used,
                       plan.row_residual, plan.col_residual)


def _scatter(term: LossTerm, mask: np.ndarray, shape) -> LossTerm:
    gv = np.zeros(shape)
    gvp = np.zeros(shape)
    if term.grad_v is not None:
        gv[mask] = term.grad_v
    if term.grad_v_prime is not None:
        gvp[mask] = term.grad_v_prime
    return LossTerm(term.value, gv, gvp, term.diagnostics)


def batch_objective(state: TrainState, batch: Batch, assignments: np.ndarray,
                    config: TrainConfig, forward=None):
    """Overall loss on a batch plus parameter gradients.

    Returns ``(overall LossTerm, parameter gradients, skipped anchors)``.
    Terms with zero weight are not evaluated.
    """
    if forward is None:
        forward = (*enc.forward(state.params, batch.x), *enc.forward(state.params, batch.x_prime))
    v1, cache1, v2, cache2 = forward
    lab = batch.is_labeled
    unl = ~lab
    shape = v1.shape
    parts = {}
    skipped = 0
    if config.lambda_ins:
        parts["ins"] = _scatter(instance_contrastive(v1[unl], v2[unl], config.temperature),
                                unl, shape)
    if config.lambda_sup:
        sup = supervised_contrastive(v1[lab], v2[lab], batch.labels[lab], config.temperature)
        skipped = sup.diagnostics["skipped_anchors"]
        parts["sup"] = _scatter(sup, lab, shape)
    if config.lambda_proto:
        parts["proto"] = _scatter(
            prototype_loss(v1[unl], assignments, state.bank.prototypes, state.prior.r), unl, shape)
    if config.lambda_kl:
        P = predict_distribution(v1[unl], state.bank, config.tau_pred)
        kl, grad_P = kl_prior_regularizer(P, state.prior.r)
        g = predict_distribution_vjp(P, grad_P, state.bank, config.tau_pred)
        parts["kl"] = _scatter(LossTerm(kl, g), unl, shape)
    total = overall_loss(parts, config.loss_config())
    gv = total.grad_v if total.grad_v is not None else np.zeros(shape)
    gvp = total.grad_v_prime if total.grad_v_prime is not None else np.zeros(shape)
    g1, _ = enc.backward(cache1, gv)
    g2, _ = enc.backward(cache2, gvp)
    grads = enc.EncoderParams(*(a + b for a, b in zip(g1.arrays(), g2.arrays())))
    return total, grads, skipped


def m_step(state: TrainState, batch: Batch, assignments: np.ndarray, config: TrainConfig,
           forward=None) -> StepLog:
    """One SGD step on the overall loss; updates ``state.params`` in place."""
    total, grads, skipped = batch_objective(state, batch, assignments, config, forward)
    grad_norm = float(np.linalg.norm(grads.flat()))
    state.opt.epoch = state.epoch
    enc.sgd_step(state.params, grads, state.opt)
    return StepLog(total.value, total.diagnostics["contributions"], grad_norm, skipped)


def _batch_plan(n_unl: int, n_lab: int, config: TrainConfig) -> tuple[int, int, int]:
    """Rows per step drawn from each pool, and the number of steps."""
    bs = config.batch_size
    frac = config.unlabeled_fraction
    if frac is None:
        frac = n_unl / (n_unl + n_lab)
    b_u = min(max(2, round(bs * frac)), bs - 2, n_unl)
    b_l = min(max(2, bs - b_u), n_lab)
    steps = max(1, n_unl // b_u)
    return b_u, b_l, steps


def make_batch(dataset: Dataset, index: np.ndarray, sigma_aug: float, rng) -> Batch:
    x = dataset.features[index]
    return Batch(index, augment(x, sigma_aug, rng), augment(x, sigma_aug, rng),
                 dataset.labels[index], dataset.is_labeled[index])


def embed_unlabeled(state: TrainState, dataset: Dataset) -> np.ndarray:
    v, _ = enc.forward(state.params, dataset.features[dataset.unlabeled_index])
    return v


def predict_unlabeled(state: TrainState, dataset: Dataset, config: TrainConfig) -> np.ndarray:
    """Argmax classifier predictions on the clean unlabeled pool."""
    P = predict_distribution(embed_unlabeled(state, dataset), state.bank, config.tau_pred)
    return P.argmax(axis=1)


def run_epoch(state: TrainState, dataset: Dataset, config: TrainConfig) -> tuple[TrainState, EpochLog]:
    unl, lab = dataset.unlabeled_index, dataset.labeled_index
    if len(unl) < 2 or len(lab) < 2:
        raise EmptyDataset("need at least 2 labeled and 2 unlabeled samples")
    b_u, b_l, steps = _batch_plan(len(unl), len(lab), config)
    rng = state.rng
    order_u = np.array_split(rng.permutation(len(unl)), steps)
    lab_stream = rng.permutation(len(lab))
    lab_pos = 0

    n_unl = len(unl)
    last_emb = np.zeros((n_unl, config.embed_dim)) if state.last_embeddings is None \
        else state.last_embeddings
    last_asg = np.zeros(n_unl, dtype=np.int64) if state.last_assignments is None \
        else state.last_assignments
    sums = dict.fromkeys(LOSS_NAMES, 0.0)
    total = grad_norm = iters = resid = 0.0

    for chunk in order_u:
        if lab_pos + b_l > len(lab_stream):
            lab_stream = np.concatenate([lab_stream[lab_pos:], rng.permutation(len(lab))])
            lab_pos = 0
        lab_rows = lab_stream[lab_pos:lab_pos + b_l]
        lab_pos += b_l
        index = np.concatenate([unl[chunk], lab[lab_rows]])
        batch = make_batch(dataset, index, config.sigma_aug, rng)
        fwd = (*enc.forward(state.params, batch.x), *enc.forward(state.params, batch.x_prime))
        v_u = fwd[0][~batch.is_labeled]

        e = e_step(state, v_u, config)
        state.queue.push(v_u, e.predictions)
        step = m_step(state, batch, e.assignments, config, forward=fwd)

        last_emb[chunk] = v_u
        last_asg[chunk] = e.assignments
        for name in LOSS_NAMES:
            sums[name] += step.contributions.get(name, 0.0)
        total += step.total
        grad_norm += step.grad_norm
        iters += e.iterations
        resid += max(e.row_residual, e.col_residual)

    n = len(order_u)
    P_all = predict_distribution(embed_unlabeled(state, dataset), state.bank, config.tau_pred)
    z = empirical_argmax_distribution(P_all)
    if config.estimate_prior:
        update_prior(state.prior, z)
    else:
        state.prior.snapshot()
    update_prototypes(state.bank, last_emb, last_asg)
    state.last_embeddings, state.last_assignments = last_emb, last_asg

    log = EpochLog(
        epoch=state.epoch,
        losses={k: v / n for k, v in sums.items()},
        total_loss=total / n,
        grad_norm=grad_norm / n,
        sinkhorn_iters=iters / n,
        sinkhorn_residual=resid / n,
        prior=state.prior.r.tolist(),
        z=z.tolist(),
        stale_prototypes=int(state.bank.stale.sum()),
        steps=n,
    )
    state.epoch += 1
    return state, log


def evaluate_state(state: TrainState, dataset: Dataset, config: TrainConfig,
                   epoch: int | None = None) -> tuple[MetricsReport, np.ndarray]:
    pred = predict_unlabeled(state, dataset, config)
    truth = dataset.labels[dataset.unlabeled_index]
    report = evaluate(pred, truth, dataset.known_classes, dataset.num_classes,
                      prior=state.prior.r, true_prior=dataset.unlabeled_prior,
                      epoch=state.epoch if epoch is None else epoch)
    return report, pred


def metrics_header(num_classes: int) -> list[str]:
    return (["epoch", "acc_all", "acc_known", "acc_unknown_aware", "acc_unknown_agnostic",
             "prior_l1_error", "loss_total"]
            + [f"loss_{n}" for n in LOSS_NAMES]
            + ["grad_norm", "sinkhorn_iters"]
            + [f"prior_{k}" for k in range(num_classes)])


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_row(log: EpochLog, report: MetricsReport | None) -> list[str]:
    accs = ([report.acc_all, report.acc_known, report.acc_unknown_aware,
             report.acc_unknown_agnostic, report.prior_l1_error]
            if report is not None else [None] * 5)
    return [_fmt(v) for v in
            [log.epoch, *accs, float(log.total_loss), *(float(log.losses[n]) for n in LOSS_NAMES),
             float(log.grad_norm), float(log.sinkhorn_iters), *map(float, log.prior)]]


@dataclass
class TrainResult:
    state: TrainState
    epoch_logs: list
    reports: list
    final_report: MetricsReport | None
    predictions: np.ndarray
    metrics_csv: str


def train(dataset: Dataset, config: TrainConfig, out_dir=None) -> TrainResult:
    """Run the full EM loop.

    Every ``eval_every`` epochs (and at the last one) the unlabeled pool is
    scored.  With ``out_dir`` set, writes ``metrics.csv``, ``report.json``,
    ``predictions.json`` and encoder checkpoints there.
    """
    config.validate()
    state = initialize_state(dataset, config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(metrics_header(dataset.num_classes))

    logs, reports = [], []
    report, pred = None, None
    for epoch in range(config.epochs):
        state, log = run_epoch(state, dataset, config)
        logs.append(log)
        report = None
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
            report, pred = evaluate_state(state, dataset, config, epoch)
            reports.append(report)
        writer.writerow(metrics_row(log, report))
        if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            enc.save_checkpoint(out / f"checkpoint_{epoch + 1:04d}.bin", state.params,
                                config.seed, epoch + 1)
    if pred is None:
        pred = predict_unlabeled(state, dataset, config)
    final = reports[-1] if reports else None

    result = TrainResult(state, logs, reports, final, pred, buf.getvalue())
    if out is not None:
        write_run(out, result, dataset, config)
    return result


def write_run(out: Path, result: TrainResult, dataset: Dataset, config: TrainConfig) -> None:
    (out / "metrics.csv").write_text(result.metrics_csv)
    (out / "predictions.json").write_text(json.dumps([int(p) for p in result.predictions]) + "\n")
    report = {
        "final": result.final_report.to_dict() if result.final_report else None,
        "config": config.to_dict(),
        "dataset": {"spec": dataset.spec.to_dict(),
                    "known_classes": sorted(int(k) for k in dataset.known_classes),
                    "num_classes": dataset.num_classes},
        "truth_class_counts": [int(c) for c in dataset.unlabeled_counts],
        "final_prior": [float(x) for x in result.state.prior.r],
        "epochs_run": len(result.epoch_logs),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True,
                                                allow_nan=True) + "\n")
    enc.save_checkpoint(out / "checkpoint.bin", result.state.params, config.seed,
                        len(result.epoch_logs))

