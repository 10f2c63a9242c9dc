"""Training loop: sample, compute the loss, backpropagate, rebuild the tree each epoch."""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from htl import losses
from htl.evaluate import CUB_KS, recall_at_k
from htl.hierarchy import DEFAULT_BETA, DEFAULT_DEPTH, build_tree
from htl.model import MlpEmbedder, backward, forward, save_checkpoint, sgd_step
from htl.sampler import (
    STRATEGIES,
    BatchSpec,
    anchor_neighbor_batch,
    enumerate_pairs,
    mine_triplets,
    random_class_batch,
)
from htl.stats import compute_class_stats

log = logging.getLogger(__name__)

LOSSES = ("triplet", "contrastive")
MARGINS = ("constant", "dynamic")
SAMPLERS = ("random", "anchor-neighbor")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    loss: str = "triplet"
    margin: str = "dynamic"
    sampler: str = "anchor-neighbor"
    mining: str = "all"
    l_prime: int = 2
    m: int = 4
    t: int = 5
    hidden_dims: list = field(default_factory=lambda: [32])
    embedding_dim: int = 128
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_epochs: int = 10
    epochs: int = 30
    # None means epochs * batches_per_epoch
    max_iterations: int = None
    depth: int = DEFAULT_DEPTH
    beta: float = DEFAULT_BETA
    alpha: float = losses.DEFAULT_MARGIN
    # epochs trained on random class batches with the constant margin before the tree is used
    bootstrap_epochs: int = 1
    seed: int = 0
    eval_every: int = 50
    ks: list = field(default_factory=lambda: list(CUB_KS))
    # stop when recall@1 has not improved for this many evaluations; None disables
    patience: int = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.margin not in MARGINS:
            raise ValueError(f"margin must be one of {MARGINS}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.mining not in STRATEGIES:
            raise ValueError(f"mining must be one of {STRATEGIES}")
        if self.loss == "contrastive" and self.mining != "all":
            raise ValueError("mining applies to triplet losses only")
        if not (self.lr > 0 and self.lr_decay > 0 and self.lr_decay_epochs > 0):
            raise ValueError("learning rate, decay factor and decay period must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.depth < 1 or self.eval_every < 1:
            raise ValueError("depth and eval_every must be positive")
        BatchSpec(self.l_prime, self.m, self.t)

    @property
    def batch_spec(self):
        return BatchSpec(self.l_prime, self.m, self.t)

    def layer_dims(self, input_dim):
        return [input_dim, *self.hidden_dims, self.embedding_dim]

    def learning_rate(self, epoch):
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_epochs)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingLog:
    ks: tuple
    rows: list = field(default_factory=list)
    # (iteration, epoch, description) for tree rebuilds and other milestones
    events: list = field(default_factory=list)

    @property
    def columns(self):
        return ["iteration", "epoch", "loss", "active_fraction", *[f"recall@{k}" for k in self.ks], "seconds"]

    def record(self, iteration, epoch, loss, active_fraction, recalls, seconds):
        if self.rows and iteration <= self.rows[-1]["iteration"]:
            raise ValueError("log iterations must strictly increase")
        row = {"iteration": iteration, "epoch": epoch, "loss": loss, "active_fraction": active_fraction}
        for k in self.ks:
            row[f"recall@{k}"] = recalls.get(k, math.nan) if recalls else math.nan
        row["seconds"] = seconds
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def deterministic_rows(self):
        """Rows without the wall-clock column."""
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def embed_dataset(model, features, chunk=4096):
    return np.concatenate([forward(model, features[i:i + chunk])[0] for i in range(0, len(features), chunk)])


def rebuild_hierarchy(model, dataset, depth=DEFAULT_DEPTH):
    """Embed the whole training set and rebuild (tree, class statistics)."""
    E = embed_dataset(model, dataset.features)
    stats = compute_class_stats(E, dataset.labels)
    return build_tree(stats.interclass, stats.d0, depth), stats


def _evaluate(model, eval_dataset, ks):
    E = embed_dataset(model, eval_dataset.features)
    return recall_at_k(E, eval_dataset.labels, E, eval_dataset.labels, ks, self_match_excluded=True).as_dict()


def _step_loss(config, use_tree, batch, E, tree, stats):
    labels = batch.labels
    if config.loss == "contrastive":
        pairs = enumerate_pairs(batch)
        if use_tree:
            return losses.contrastive_loss_dynamic(E, pairs, labels, tree, stats, config.beta)
        return losses.contrastive_loss(E, pairs, labels, config.alpha)
    triplets = mine_triplets(batch, E, config.mining, config.alpha)
    if use_tree:
        return losses.hierarchical_triplet_loss(E, triplets, labels, tree, stats, config.beta)
    return losses.triplet_loss(E, triplets, config.alpha)


def train(dataset, config, eval_dataset=None, checkpoint_dir=None, model=None):
    """Train an embedder; returns ``(model, TrainingLog)``.

    The first ``bootstrap_epochs`` epochs draw random class batches and use
    the constant margin. Afterwards batches come from the configured sampler
    and, with ``margin="dynamic"``, margins from the tree, which is rebuilt
    from the current model at the start of every epoch.
    """
    config.validate()
    spec = config.batch_spec
    if dataset.num_classes < spec.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes but a batch needs {spec.num_classes}"
        )
    model_seed, batch_seed = np.random.SeedSequence(config.seed).spawn(2)
    if model is None:
        model = MlpEmbedder.initialize(config.layer_dims(dataset.dim), seed=model_seed)
    elif model.input_dim != dataset.dim:
        raise ValueError("model input dimension does not match the dataset")
    rng = np.random.default_rng(batch_seed)

    ks = tuple(config.ks) if eval_dataset is not None else ()
    train_log = TrainingLog(ks)
    batches_per_epoch = max(1, len(dataset) // spec.size)
    budget = config.max_iterations or config.epochs * batches_per_epoch
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    start = time.perf_counter()
    iteration = 0
    window_loss, window_active, window_n = 0.0, 0.0, 0
    best_recall, stale = -1.0, 0
    epoch = 0
    stop = False
    while not stop and epoch < config.epochs and iteration < budget:
        if not all(np.isfinite(w).all() for w in model.parameters()):
            raise TrainingDivergedError(f"non-finite parameters before epoch {epoch}")
        tree, stats = rebuild_hierarchy(model, dataset, config.depth)
        train_log.events.append((iteration, epoch, "tree-rebuild"))
        bootstrap = epoch < config.bootstrap_epochs
        use_tree = config.margin == "dynamic" and not bootstrap
        lr = config.learning_rate(epoch)

        for _ in range(batches_per_epoch):
            if bootstrap or config.sampler == "random":
                batch = random_class_batch(dataset.labels, spec, rng)
            else:
                batch = anchor_neighbor_batch(dataset.labels, stats.interclass, spec, rng)
            E, cache = forward(model, dataset.features[batch.indices])
            out = _step_loss(config, use_tree, batch, E, tree, stats)
            if not math.isfinite(out.loss):
                raise TrainingDivergedError(f"non-finite loss at iteration {iteration + 1} (epoch {epoch})")
            sgd_step(model, backward(model, cache, out.grad_embeddings), lr)
            iteration += 1
            window_loss += out.loss
            window_active += out.active_fraction
            window_n += 1

            if iteration % config.eval_every == 0 or iteration == budget:
                recalls = _evaluate(model, eval_dataset, ks) if eval_dataset is not None else {}
                train_log.record(
                    iteration, epoch, window_loss / window_n, window_active / window_n,
                    recalls, time.perf_counter() - start,
                )
                window_loss, window_active, window_n = 0.0, 0.0, 0
                if config.patience is not None and recalls:
                    if recalls[ks[0]] > best_recall:
                        best_recall, stale = recalls[ks[0]], 0
                    else:
                        stale += 1
                        if stale >= config.patience:
                            train_log.events.append((iteration, epoch, "early-stop"))
                            stop = True
                            break
            if iteration >= budget:
                break

        if checkpoint_dir is not None:
            save_checkpoint(model, checkpoint_dir / f"epoch_{epoch:03d}.ckpt")
        epoch += 1

    if window_n:
        recalls = _evaluate(model, eval_dataset, ks) if eval_dataset is not None else {}
        train_log.record(iteration, epoch - 1, window_loss / window_n, window_active / window_n,
                         recalls, time.perf_counter() - start)
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir / "final.ckpt")
    log.info("trained %d iterations over %d epochs", iteration, epoch)
    return model, train_log
