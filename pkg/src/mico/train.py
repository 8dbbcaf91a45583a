"""Training, evaluation, ablation and sweep harness.

Protocol per fold: K-means anchor initialization on the training instances,
epoch loop over shuffled bags at batch size 1, gradient accumulation, Adam
step, per-epoch validation with early stopping, best-epoch restore, single
test evaluation. The optimizer is Adam rather than the composite optimizer
some MIL training setups use; the substitution is noted in every report.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import kmeans
from .autodiff import Adam, Tensor, zero_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import FeatureBag, make_folds
from .errors import ConfigError, DataError, NumericalError, UndefinedMetricError
from .losses import (
    SubtypeLabel,
    SurvivalLabel,
    cross_entropy,
    quantile_bin_edges,
    risk_score,
    survival_nll,
    time_to_bin,
)
from .metrics import c_index, classification_metrics
from .model import MicoConfig, MicoModel, random_anchor_init

OPTIMIZER_NOTE = "optimizer: Adam substituted for the Ranger-style optimizer"
KMEANS_NOTE = "anchor K-means runs per fold on that fold's training instances only"


@dataclass
class TrainConfig:
    seed: int
    task: str = "survival"
    epochs: int = 200
    batch_size: int = 1
    lr: float = 2e-4
    grad_accum: int = 2
    early_stop_patience: int = 8
    anchor_count: int = 64
    layers: int = 3
    mlp_hidden: int | None = None
    pooling: str = "gated_attention"
    survival_bins: int = 4
    subtype_classes: int = 2
    ablate_route: bool = False
    ablate_reducer: bool = False
    ablate_kmeans_init: bool = False
    n_folds: int = 4
    kmeans_pool_cap: int = 50000

    def validate(self) -> None:
        if self.batch_size != 1:
            raise ConfigError(f"batch size is fixed at 1, got {self.batch_size}")
        if self.grad_accum < 1:
            raise ConfigError(f"grad_accum must be >= 1, got {self.grad_accum}")
        if self.epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("epochs and early_stop_patience must be positive")
        if self.task not in ("survival", "subtype"):
            raise ConfigError(f"unknown task {self.task!r}")

    def model_config(self, d: int) -> MicoConfig:
        return MicoConfig(
            d=d, anchors=self.anchor_count, layers=self.layers,
            mlp_hidden=self.mlp_hidden, task=self.task,
            survival_bins=self.survival_bins, subtype_classes=self.subtype_classes,
            pooling=self.pooling, ablate_route=self.ablate_route,
            ablate_reducer=self.ablate_reducer, ablate_kmeans_init=self.ablate_kmeans_init)


class EarlyStopper:
    """Stops after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.streak = 0

    def update(self, metric: float, epoch: int) -> bool:
        if metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            self.streak = 0
            return True
        self.streak += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.streak >= self.patience


@dataclass
class FoldResult:
    fold: int
    metrics: dict
    best_epoch: int
    epochs_run: int
    anchor_init: str
    train_loss_curve: list[float] = field(default_factory=list)
    val_metric_curve: list[float] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)


@dataclass
class RunReport:
    config: dict
    folds: list[FoldResult]
    mean: dict
    std: dict
    notes: list[str]
    wall_clock_s: float

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "config": self.config,
            "folds": [asdict(f) for f in self.folds],
            "mean": self.mean,
            "std": self.std,
            "notes": self.notes,
        }
        if include_timing:
            d["wall_clock_s"] = self.wall_clock_s
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2)


def _metric_names(task: str) -> list[str]:
    return ["c_index"] if task == "survival" else ["acc", "f1", "auc"]


def _check_task_labels(bags: list[FeatureBag], task: str) -> None:
    want = SurvivalLabel if task == "survival" else SubtypeLabel
    for bag in bags:
        if not isinstance(bag.label, want):
            raise ConfigError(
                f"task {task!r} but bag {bag.bag_id!r} carries a "
                f"{type(bag.label).__name__}")


def _bag_loss(model: MicoModel, bag: FeatureBag, assign_mode: str = "hard") -> Tensor:
    out, _ = model.forward(bag.features, assign_mode=assign_mode)
    cfg = model.config
    if cfg.task == "survival":
        return survival_nll(out, bag.label, cfg.survival_bins)
    return cross_entropy(out, bag.label, cfg.subtype_classes)


def evaluate_model(model: MicoModel, bags: list[FeatureBag]) -> dict:
    """Deterministic metrics over a bag list; parameters are not mutated."""
    cfg = model.config
    _check_task_labels(bags, cfg.task)
    if cfg.task == "survival":
        risks = []
        for bag in bags:
            out, _ = model.forward(bag.features)
            risks.append(risk_score(out.data))
        try:
            return {"c_index": c_index(risks, [b.label for b in bags])}
        except UndefinedMetricError:
            return {"c_index": 0.5}
    scores = []
    for bag in bags:
        out, _ = model.forward(bag.features)
        z = out.data.reshape(-1)
        e = np.exp(z - z.max())
        scores.append(e / e.sum())
    cm = classification_metrics(np.array(scores), [b.label for b in bags])
    return {"acc": cm.acc, "f1": cm.macro_f1,
            "auc": 0.5 if cm.auc is None else cm.auc}


def _val_score(metrics: dict, task: str) -> float:
    return metrics["c_index"] if task == "survival" else metrics["auc"]


def _assign_bins(bags: list[FeatureBag], edges: np.ndarray) -> None:
    for bag in bags:
        bag.label.bin = time_to_bin(bag.label.time, edges)


def _init_anchors(config: TrainConfig, train_bags: list[FeatureBag],
                  pool_seed: int, init_rng: np.random.Generator) -> tuple[np.ndarray, str]:
    pool = kmeans.subsample_pool(train_bags, config.kmeans_pool_cap, seed=pool_seed)
    if config.ablate_kmeans_init:
        return random_anchor_init(pool, config.anchor_count, init_rng), "random"
    result = kmeans.fit(pool, config.anchor_count, seed=pool_seed)
    return result.centers, "kmeans"


def train_fold(config: TrainConfig, fold_index: int,
               train_bags: list[FeatureBag], val_bags: list[FeatureBag],
               test_bags: list[FeatureBag], fold_seed: np.random.SeedSequence,
               val_metric_fn=None) -> tuple[FoldResult, MicoModel, np.ndarray | None]:
    """Train one fold; returns the result, the best-state model and the
    survival bin edges (None for subtype)."""
    d = train_bags[0].features.shape[1]
    seeds = fold_seed.generate_state(3)
    init_rng = np.random.default_rng(int(seeds[0]))
    shuffle_rng = np.random.default_rng(int(seeds[1]))

    edges = None
    if config.task == "survival":
        edges = quantile_bin_edges([b.label.time for b in train_bags], config.survival_bins)
        _assign_bins(train_bags + val_bags + test_bags, edges)

    anchors, init_kind = _init_anchors(config, train_bags, int(seeds[2]), init_rng)
    model = MicoModel(config.model_config(d), rng=init_rng, anchor_init=anchors)

    # ablations can disconnect whole parameter groups from the loss (e.g. the
    # anchors when routing is off); optimize only what is reachable
    _bag_loss(model, train_bags[0]).backward()
    trainable = {name: p for name, p in model.params.items() if p.grad is not None}
    zero_grad(model.params.values())
    opt = Adam(trainable, lr=config.lr)

    stopper = EarlyStopper(config.early_stop_patience)
    best_state = model.state_arrays()
    loss_curve: list[float] = []
    val_curve: list[float] = []
    pending = 0
    epochs_run = 0

    for epoch in range(1, config.epochs + 1):
        epochs_run = epoch
        order = shuffle_rng.permutation(len(train_bags))
        losses = []
        for j in order:
            bag = train_bags[int(j)]
            loss = _bag_loss(model, bag)
            if not np.isfinite(loss.data):
                raise NumericalError(
                    f"fold {fold_index}: NaN/Inf loss on bag {bag.bag_id!r} "
                    f"at epoch {epoch}")
            losses.append(float(loss.data))
            # per-bag loss is pre-scaled so one accumulated step matches an
            # averaged batch of grad_accum bags
            ad.scale(loss, 1.0 / config.grad_accum).backward()
            pending += 1
            if pending % config.grad_accum == 0:
                opt.step()
                opt.zero_grad()
                pending = 0
        loss_curve.append(float(np.mean(losses)))

        if val_metric_fn is not None:
            val_metric = float(val_metric_fn(model, val_bags, epoch))
        else:
            val_metric = _val_score(evaluate_model(model, val_bags), config.task)
        val_curve.append(val_metric)

        if stopper.update(val_metric, epoch):
            best_state = model.state_arrays()
        if stopper.should_stop:
            break

    model.load_state_arrays(best_state)
    zero_grad(model.params.values())
    metrics = evaluate_model(model, test_bags)

    result = FoldResult(
        fold=fold_index, metrics=metrics, best_epoch=stopper.best_epoch,
        epochs_run=epochs_run, anchor_init=init_kind,
        train_loss_curve=loss_curve, val_metric_curve=val_curve,
        test_ids=[b.bag_id for b in test_bags])
    return result, model, edges


def train(config: TrainConfig, bags: list[FeatureBag], out_dir: str | None = None,
          val_metric_fn=None) -> RunReport:
    """Full cross-validated run; optionally writes per-fold checkpoints and
    the report to ``out_dir``."""
    config.validate()
    _check_task_labels(bags, config.task)
    start = time.monotonic()

    by_id = {b.bag_id: b for b in bags}
    ids = sorted(by_id)
    folds = make_folds(ids, n_folds=config.n_folds, seed=config.seed)
    root_ss = np.random.SeedSequence(config.seed)
    fold_seeds = root_ss.spawn(config.n_folds)

    results: list[FoldResult] = []
    for i, (train_ids, val_ids, test_ids) in enumerate(folds):
        result, model, edges = train_fold(
            config, i,
            [by_id[b] for b in train_ids], [by_id[b] for b in val_ids],
            [by_id[b] for b in test_ids], fold_seeds[i], val_metric_fn=val_metric_fn)
        results.append(result)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            meta = model.config.to_dict()
            meta["fold"] = i
            meta["best_epoch"] = result.best_epoch
            if edges is not None:
                meta["bin_edges"] = [float(e) for e in edges]
            save_checkpoint(os.path.join(out_dir, f"fold{i}.mico"),
                            meta, model.state_arrays())

    names = _metric_names(config.task)
    mean = {m: float(np.mean([r.metrics[m] for r in results])) for m in names}
    std = {m: (float(np.std([r.metrics[m] for r in results], ddof=1))
               if len(results) > 1 else 0.0) for m in names}

    report = RunReport(
        config=asdict(config), folds=results, mean=mean, std=std,
        notes=[OPTIMIZER_NOTE, KMEANS_NOTE],
        wall_clock_s=time.monotonic() - start)
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            f.write(report.to_json())
    return report


def evaluate_checkpoint(path: str, bags: list[FeatureBag]) -> dict:
    cfg_dict, state = load_checkpoint(path)
    cfg = MicoConfig.from_dict(cfg_dict)
    _check_task_labels(bags, cfg.task)
    for bag in bags:
        if bag.features.shape[1] != cfg.d:
            raise DataError(
                f"bag {bag.bag_id!r} has dim {bag.features.shape[1]}, checkpoint expects {cfg.d}")
    if cfg.task == "survival":
        edges = np.array(cfg_dict.get("bin_edges", []), dtype=np.float64)
        if edges.size:
            _assign_bins(bags, edges)
    model = MicoModel(cfg, rng=np.random.default_rng(0))
    model.load_state_arrays(state)
    return evaluate_model(model, bags)


# ---------------------------------------------------------------------------
# ablation and anchor sweep

ABLATIONS = [
    ("full", {}),
    ("w/o anchor init", {"ablate_kmeans_init": True}),
    ("w/o reducer", {"ablate_reducer": True}),
    ("w/o route", {"ablate_route": True}),
]


def _with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    d = asdict(config)
    d.update(kw)
    return TrainConfig(**d)


def ablate(config: TrainConfig, bags: list[FeatureBag],
           out_dir: str | None = None) -> dict[str, RunReport]:
    """Run the full protocol under each ablation with identical seeds/folds."""
    reports = {}
    for name, overrides in ABLATIONS:
        sub_dir = None
        if out_dir is not None:
            sub_dir = os.path.join(out_dir, name.replace("/", "_").replace(" ", "_"))
        reports[name] = train(_with_overrides(config, **overrides), bags, out_dir=sub_dir)
    if out_dir is not None:
        with open(os.path.join(out_dir, "ablation_table.txt"), "w") as f:
            f.write(comparison_table(reports, config.task))
    return reports


def sweep_anchors(config: TrainConfig, bags: list[FeatureBag],
                  counts=(32, 64, 128), out_dir: str | None = None) -> dict[int, RunReport]:
    """One full run per anchor count over shared folds and seeds."""
    for c in counts:
        if c % (2 ** config.layers) != 0:
            raise ConfigError(
                f"anchor count {c} not divisible by 2^layers = {2 ** config.layers}")
    reports = {}
    for c in counts:
        sub_dir = os.path.join(out_dir, f"anchors{c}") if out_dir is not None else None
        reports[c] = train(_with_overrides(config, anchor_count=c), bags, out_dir=sub_dir)
    if out_dir is not None:
        labeled = {f"{c} anchors": r for c, r in reports.items()}
        with open(os.path.join(out_dir, "sweep_table.txt"), "w") as f:
            f.write(comparison_table(labeled, config.task))
        with open(os.path.join(out_dir, "sweep_data.csv"), "w") as f:
            names = _metric_names(config.task)
            f.write("anchors," + ",".join(
                f"{m}_mean,{m}_std" for m in names) + "\n")
            for c, r in reports.items():
                cells = [str(c)]
                for m in names:
                    cells += [f"{r.mean[m]:.6f}", f"{r.std[m]:.6f}"]
                f.write(",".join(cells) + "\n")
    return reports


def comparison_table(reports: dict[str, RunReport], task: str) -> str:
    names = _metric_names(task)
    width = max(len(k) for k in reports) + 2
    header = "method".ljust(width) + "  ".join(m.rjust(15) for m in names)
    lines = [header, "-" * len(header)]
    for key, rep in reports.items():
        cells = [f"{rep.mean[m]:.4f} ± {rep.std[m]:.4f}".rjust(15) for m in names]
        lines.append(key.ljust(width) + "  ".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# assignment export

def export_assignments(ckpt_path: str, bag: FeatureBag) -> str:
    """Per-instance anchor assignment at every layer, as a text table."""
    cfg_dict, state = load_checkpoint(ckpt_path)
    cfg = MicoConfig.from_dict(cfg_dict)
    if bag.features.shape[1] != cfg.d:
        raise DataError(
            f"bag {bag.bag_id!r} has dim {bag.features.shape[1]}, checkpoint expects {cfg.d}")
    model = MicoModel(cfg, rng=np.random.default_rng(0))
    model.load_state_arrays(state)
    _, assignments = model.forward(bag.features)

    n_layers = len(assignments)
    lines = ["# instance x y " + " ".join(f"anchor_l{l}" for l in range(n_layers))]
    coords = bag.coords if bag.coords is not None else np.full((bag.n_instances, 2), np.nan)
    for m in range(bag.n_instances):
        per_layer = " ".join(str(int(a.indices[m])) for a in assignments)
        lines.append(f"{m} {coords[m, 0]:.3f} {coords[m, 1]:.3f} {per_layer}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# finite-difference gradient suite

def finite_difference_grad(f, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f with respect to every entry."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        hi = f()
        arr[idx] = orig - eps
        lo = f()
        arr[idx] = orig
        g[idx] = (hi - lo) / (2.0 * eps)
        it.iternext()
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.abs(a) + np.abs(b), 1e-4)
    return float(np.max(np.abs(a - b) / scale))


def end_to_end_gradcheck(task: str, m_instances: int = 12, d: int = 8,
                         anchors: int = 4, layers: int = 2,
                         seed: int = 0) -> dict[str, float]:
    """Compare tape gradients of the full per-bag loss against central
    finite differences for every parameter group.

    Runs with the smooth (row-softmax) relaxation of the hard assignment:
    the straight-through surrogate is by construction not the derivative of
    the hard forward map, so its contract is checked analytically elsewhere
    while everything differentiable is checked here.
    """
    rng = np.random.default_rng(seed)
    cfg = MicoConfig(d=d, anchors=anchors, layers=layers, task=task,
                     survival_bins=4, subtype_classes=2)
    model = MicoModel(cfg, rng=rng)
    features = rng.standard_normal((m_instances, d))
    if task == "survival":
        label = SurvivalLabel(time=1.0, event=True, bin=1)
        bag = FeatureBag(bag_id="gradcheck", features=features, label=label)
    else:
        bag = FeatureBag(bag_id="gradcheck", features=features,
                         label=SubtypeLabel(class_index=1))

    def loss_value() -> float:
        return float(_bag_loss(model, bag, assign_mode="soft").data)

    zero_grad(model.params.values())
    _bag_loss(model, bag, assign_mode="soft").backward()

    errors = {}
    for name, p in model.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_difference_grad(loss_value, p.data)
        errors[name] = rel_error(analytic, numeric)
    return errors
