"""Adam, GradNorm task weighting, the dual-task training loop and evaluation."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import autodiff, nn
from .autodiff import Tensor, no_grad
from .metrics import MetricsReport, classification_report
from .model import Dt4EcgModel, ModelConfig, save_checkpoint
from .synthecg import SegmentDataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss_id", "loss_act", "w_id", "w_act", "g_id", "g_act",
               "acc_id_train", "acc_act_train", "acc_id_test", "acc_act_test", "seconds")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[tuple[str, Tensor]], state: AdamState) -> None:
    """One bias-corrected Adam update using each parameter's ``grad``.

    Parameters without a gradient are skipped (their moments are untouched).
    """
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"adam: non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# GradNorm
# ---------------------------------------------------------------------------

class TaskWeights:
    """Per-task loss weights, stored as logarithms.

    The multiplicative update drives un-renormalized weights towards zero
    geometrically; keeping ``log_w`` avoids underflow to an exact 0 so the
    state stays strictly positive and a renormalized weight can recover.
    """

    def __init__(self, w=(1.0, 1.0), alpha: float = 2.0, renormalize: bool = False, log_w=None):
        if log_w is None:
            w = np.asarray(w, dtype=np.float64)
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("task weights must be positive and finite")
            log_w = np.log(w)
        self.log_w = np.array(log_w, dtype=np.float64)
        self.alpha = float(alpha)
        self.renormalize = bool(renormalize)

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.log_w)

    def __repr__(self) -> str:
        return f"TaskWeights(w={self.w.tolist()}, alpha={self.alpha}, renormalize={self.renormalize})"


def normalized_shares(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    return g / g.sum()


def update_weights(weights: TaskWeights, g) -> TaskWeights:
    """Multiplicative update ``w_i <- w_i * exp(alpha * (share_i - 1))``.

    With ``renormalize`` the weights are rescaled to sum to the task count.
    All-zero gradient norms leave the weights unchanged.
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.any(g > 0):
        log.warning("gradnorm: all task gradient norms are zero; weights unchanged")
        return TaskWeights(alpha=weights.alpha, renormalize=weights.renormalize, log_w=weights.log_w)
    log_w = weights.log_w + weights.alpha * (normalized_shares(g) - 1.0)
    if weights.renormalize:
        log_w = log_w + math.log(len(log_w)) - logsumexp(log_w)
    return TaskWeights(alpha=weights.alpha, renormalize=weights.renormalize, log_w=log_w)


@dataclass
class StepResult:
    total_loss: float
    losses: np.ndarray
    weights: TaskWeights
    grad_norms: np.ndarray


def task_losses(model: Dt4EcgModel, x, y_id, y_act) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    logits_id, logits_act = model(x)
    return nn.cross_entropy(logits_id, y_id), nn.cross_entropy(logits_act, y_act), logits_id, logits_act


def gradnorm_step(model: Dt4EcgModel, batch, weights: TaskWeights, shared: list[Tensor] | None = None,
                  adapt: bool = True) -> StepResult:
    """Forward both tasks, balance their weights, and leave the weighted total
    gradient in every parameter's ``grad``.

    ``g_i`` is the Euclidean norm of task ``i``'s gradient over ``shared``
    (defaults to the last shared stage), obtained from a pass restricted to
    that part of the graph.  The weights are updated first and the total
    gradient uses the updated weights.  ``adapt=False`` keeps the weights fixed but still reports
    the norms.
    """
    x, y_id, y_act = batch
    shared = shared if shared is not None else model.shared_parameters()
    loss_id, loss_act, _, _ = task_losses(model, x, y_id, y_act)

    g = np.zeros(2)
    for i, loss in enumerate((loss_id, loss_act)):
        grads = autodiff.grad(loss, shared, retain_graph=True)
        g[i] = math.sqrt(sum(float(np.sum(np.square(gp, dtype=np.float64))) for gp in grads))
    new_weights = update_weights(weights, g) if adapt else weights
    w = new_weights.w
    # the total gradient is sum_i w_i * grad(L_i) by linearity of one backward pass
    total = loss_id * float(w[0]) + loss_act * float(w[1])
    model.zero_grad()
    total.backward()
    losses = np.array([loss_id.item(), loss_act.item()])
    return StepResult(float(w @ losses), losses, new_weights, g)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gradnorm: bool = True
    alpha: float = 2.0
    renormalize: bool = True
    shared_scope: str = "last"
    seed: int = 0
    eval_batch: int = 256

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("train config: epochs, batch_size and lr must be positive")
        if self.shared_scope not in ("last", "backbone"):
            raise ValueError(f"train config: shared_scope must be 'last' or 'backbone', got {self.shared_scope!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    step_weights: list[tuple[float, float]] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def numeric_rows(self) -> list[tuple]:
        """Rows without wall-clock time, for determinism comparisons."""
        return [tuple(r[c] for c in LOG_COLUMNS if c != "seconds") for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
        return cls(rows)


def _to_input(x: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(x[:, None, :], dtype=dtype))


def predict(model: Dt4EcgModel, x: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Arg-max class per head, computed in evaluation mode without a graph."""
    was_training = model.training
    model.eval()
    dtype = model.stem_conv.weight.dtype
    pid, pact = [], []
    with no_grad():
        for i in range(0, len(x), batch):
            li, la = model(_to_input(x[i : i + batch], dtype))
            pid.append(np.argmax(nn.softmax(li).data, axis=1))
            pact.append(np.argmax(nn.softmax(la).data, axis=1))
    model.train(was_training)
    return np.concatenate(pid), np.concatenate(pact)


def evaluate(model: Dt4EcgModel, split: SegmentDataset, batch: int = 256) -> tuple[MetricsReport, MetricsReport]:
    if len(split) == 0:
        raise ValueError("evaluate: empty split")
    pid, pact = predict(model, split.x, batch)
    return (classification_report(split.subject, pid, model.config.n_subjects),
            classification_report(split.activity, pact, model.config.n_activities))


def _accuracy(model, split: SegmentDataset, batch: int) -> tuple[float, float]:
    pid, pact = predict(model, split.x, batch)
    return float(np.mean(pid == split.subject)), float(np.mean(pact == split.activity))


def train(model: Dt4EcgModel, dataset: SegmentDataset, cfg: TrainConfig | None = None,
          checkpoint_path=None, log_path=None, progress=None) -> TrainLog:
    """Train both heads jointly; returns the per-epoch log.

    With ``cfg.gradnorm`` off the task weights stay at (1, 1).
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    train_set, test_set = dataset.part("train"), dataset.part("test")
    if len(train_set) == 0:
        raise ValueError("train: empty training split")
    for name, labels, k in (("subject", train_set.subject, model.config.n_subjects),
                            ("activity", train_set.activity, model.config.n_activities)):
        missing = sorted(set(range(k)) - set(np.unique(labels).tolist()))
        if missing:
            raise ValueError(f"train: training split has no samples of {name} class(es) {missing}")

    rng = np.random.default_rng([cfg.seed, 0x7A1])
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    named = model.named_parameters()
    shared = model.shared_parameters(cfg.shared_scope)
    weights = TaskWeights((1.0, 1.0), cfg.alpha, cfg.renormalize)
    dtype = model.stem_conv.weight.dtype
    tlog = TrainLog()

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(train_set))
        sums = np.zeros(2)
        gsum = np.zeros(2)
        steps = 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            batch = (_to_input(train_set.x[idx], dtype), train_set.subject[idx], train_set.activity[idx])
            res = gradnorm_step(model, batch, weights, shared, adapt=cfg.gradnorm)
            weights = res.weights
            adam_step(named, adam)
            sums += res.losses
            gsum += res.grad_norms
            steps += 1
            tlog.step_weights.append((float(weights.w[0]), float(weights.w[1])))
        acc_tr = _accuracy(model, train_set, cfg.eval_batch)
        acc_te = _accuracy(model, test_set, cfg.eval_batch) if len(test_set) else (float("nan"),) * 2
        row = {
            "epoch": epoch,
            "loss_id": float(sums[0] / steps), "loss_act": float(sums[1] / steps),
            "w_id": float(weights.w[0]), "w_act": float(weights.w[1]),
            "g_id": float(gsum[0] / steps), "g_act": float(gsum[1] / steps),
            "acc_id_train": acc_tr[0], "acc_act_train": acc_tr[1],
            "acc_id_test": acc_te[0], "acc_act_test": acc_te[1],
            "seconds": time.perf_counter() - t0,
        }
        tlog.rows.append(row)
        log.info("epoch %d: loss %.4f/%.4f w %.3g/%.3g acc train %.3f/%.3f test %.3f/%.3f (%.1fs)",
                 epoch, row["loss_id"], row["loss_act"], row["w_id"], row["w_act"],
                 row["acc_id_train"], row["acc_act_train"], row["acc_id_test"], row["acc_act_test"],
                 row["seconds"])
        if progress is not None:
            progress(row)

    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    if log_path is not None:
        tlog.write_csv(log_path)
    return tlog


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationResult:
    variant: dict
    log: TrainLog
    id_report: MetricsReport
    act_report: MetricsReport

    def row(self) -> dict:
        return {
            "sca": self.variant["sca"], "gradnorm": self.variant["gradnorm"],
            "acc_id_test": self.id_report.accuracy, "acc_act_test": self.act_report.accuracy,
            "f1_id_test": self.id_report.f1, "f1_act_test": self.act_report.f1,
            "acc_act_train_final": float(self.log.rows[-1]["acc_act_train"]),
        }


DEFAULT_VARIANTS = [
    {"sca": True, "gradnorm": True},
    {"sca": True, "gradnorm": False},
    {"sca": False, "gradnorm": True},
    {"sca": False, "gradnorm": False},
]


def _run_variant(dataset, variant, model_cfg: ModelConfig, train_cfg: TrainConfig) -> AblationResult:
    unknown = set(variant) - {"sca", "gradnorm"}
    if unknown:
        raise ValueError(f"ablate: unknown variant keys {sorted(unknown)}")
    mcfg = ModelConfig(**{**asdict(model_cfg), "use_sca": bool(variant["sca"])})
    tcfg = TrainConfig(**{**asdict(train_cfg), "gradnorm": bool(variant["gradnorm"])})
    model = Dt4EcgModel(mcfg)
    tlog = train(model, dataset, tcfg)
    rid, ract = evaluate(model, dataset.part("test"))
    return AblationResult(dict(variant), tlog, rid, ract)


def ablate(dataset: SegmentDataset, variants=None, model_cfg: ModelConfig | None = None,
           train_cfg: TrainConfig | None = None, workers: int = 1) -> list[AblationResult]:
    """Train each variant under the same seeds and report curves and test metrics."""
    variants = variants if variants is not None else DEFAULT_VARIANTS
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    if workers <= 1:
        return [_run_variant(dataset, v, model_cfg, train_cfg) for v in variants]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda v: _run_variant(dataset, v, model_cfg, train_cfg), variants))


def write_ablation_csv(results: list[AblationResult], path) -> None:
    rows = [r.row() for r in results]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
