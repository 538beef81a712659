"""Hierarchical classifier: point embedding, four convolution stages, global pooling, head.

A batch of clouds is processed as one stacked point set; each stage groups
every cloud separately and the per-cloud graphs are combined block-diagonally,
so no neighbourhood ever crosses clouds.
"""

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .conv import DiffConvLayer, Neighbourhood
from .core import InvalidInputError, as_cloud
from .data import augment
from .nn import SGD, Linear, Module, row_avg_pool, row_max_pool

log = logging.getLogger(__name__)


@dataclass
class NetworkConfig:
    input_points: int = 1024
    stage_widths: Tuple[int, ...] = (32, 64, 128, 256)
    stage_point_counts: Optional[Tuple[int, ...]] = None
    base_sq_radius: float = 0.0125
    bandwidth: float = 0.1
    num_classes: int = 40
    dropout: float = 0.5
    head_hidden: int = 256
    seed: int = 0
    grouping: str = "dilated"
    adjacency: str = "masked"
    smoothing: bool = True
    positional: bool = True
    balanced: bool = True
    knn_k: int = 16
    activation: str = "gelu"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if self.stage_point_counts is None:
            n = self.input_points
            self.stage_point_counts = (n, n // 2, n // 4, n // 8)
        self.stage_point_counts = tuple(int(c) for c in self.stage_point_counts)
        if len(self.stage_widths) != len(self.stage_point_counts):
            raise InvalidInputError("need one width per stage point count")
        counts = self.stage_point_counts
        if any(b > a for a, b in zip(counts, counts[1:])) or counts[0] > self.input_points \
                or min(counts) < 1:
            raise InvalidInputError("stage point counts must be non-increasing and within [1, N]")

    def stage_sq_radius(self, stage):
        return self.base_sq_radius * 2.0 ** stage


@dataclass
class TrainConfig:
    epochs: int = 600
    batch_size: int = 32
    eval_batch_size: int = 16
    base_lr: float = 0.1
    min_lr: float = 0.001
    momentum: float = 0.9
    lr_period: int = 300
    translate: float = 0.2
    seed: int = 0


@dataclass
class DataConfig:
    source: str = "synthetic"
    classes: Tuple[str, ...] = ("sphere", "cube", "torus")
    n_per_class: int = 150
    points_per_cloud: int = 256
    train_fraction: float = 2.0 / 3.0
    val_fraction: float = 0.0
    test_fraction: float = 1.0 / 3.0
    root: str = ""
    seed: int = 0


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed):
        cfg = RunConfig(dataclasses.replace(self.network, seed=seed),
                        dataclasses.replace(self.train, seed=seed),
                        dataclasses.replace(self.data))
        return cfg


def _parse_value(raw, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise InvalidInputError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, tuple) or default is None:
        parts = [p.strip() for p in raw.replace(",", " ").split()]
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            return tuple(parts)
    return type(default)(raw.strip())


def load_config(path) -> RunConfig:
    """Read an INI-style run configuration; unspecified keys keep their defaults."""
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    cfg = RunConfig()
    for section in parser.sections():
        target = getattr(cfg, section, None)
        if target is None or not dataclasses.is_dataclass(target):
            raise InvalidInputError(f"unknown config section [{section}]")
        known = {f.name: f for f in dataclasses.fields(target)}
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise InvalidInputError(f"unknown key {key!r} in [{section}]")
            try:
                values[key] = _parse_value(raw, getattr(target, key))
            except (TypeError, ValueError) as exc:
                raise InvalidInputError(f"[{section}] {key}: {exc}") from None
        setattr(cfg, section, dataclasses.replace(target, **values))
    return cfg


def dump_config(cfg: RunConfig, path):
    parser = configparser.ConfigParser()
    for section, values in cfg.to_dict().items():
        parser[section] = {k: ", ".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v)
                           for k, v in values.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def random_subsample(cloud, features, m, seed=None):
    """``m`` distinct points drawn uniformly; returns ``(keys, key_features, indices)``."""
    cloud = np.asarray(cloud)
    n = len(cloud)
    if not 1 <= m <= n:
        raise InvalidInputError(f"cannot draw {m} key points from {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(n, size=m, replace=False)
    feats = None if features is None else np.asarray(features)[idx]
    return cloud[idx], feats, idx


class DiffConvNet(Module):
    def __init__(self, config: NetworkConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        widths = config.stage_widths
        self.embed = Linear(3, widths[0], rng)
        self.stages = []
        in_dim = widths[0]
        for s, w in enumerate(widths):
            self.stages.append(DiffConvLayer(
                in_dim, w, rng, base_sq_radius=config.stage_sq_radius(s),
                bandwidth=config.bandwidth, activation=config.activation,
                grouping=config.grouping, adjacency=config.adjacency,
                smoothing=config.smoothing, positional=config.positional,
                balanced=config.balanced, k=config.knn_k))
            in_dim = w
        self.head1 = Linear(2 * in_dim, config.head_hidden, rng)
        self.head2 = Linear(config.head_hidden, config.num_classes, rng)

    def sample_keys(self, sizes: Sequence[int], rng) -> List[List[np.ndarray]]:
        """Key indices per stage and cloud, each relative to the previous stage's keys."""
        plan = []
        for count in self.config.stage_point_counts:
            plan.append([rng.choice(n, size=min(count, n), replace=False) for n in sizes])
            sizes = [len(idx) for idx in plan[-1]]
        return plan

    def forward(self, clouds, training=False, rng=None, key_indices=None, return_pooled=False):
        """Class logits for a list of clouds.

        ``key_indices`` fixes the sampled key points (see :meth:`sample_keys`);
        otherwise they are drawn from ``rng``.
        """
        clouds = [as_cloud(c) for c in clouds]
        if rng is None:
            rng = np.random.default_rng(self.config.seed + 1)
        if key_indices is None:
            key_indices = self.sample_keys([len(c) for c in clouds], rng)
        pts = clouds
        x = ag.gelu(self.embed(np.vstack(pts)))
        for layer, stage_keys in zip(self.stages, key_indices):
            nb = Neighbourhood.stack([layer.group(p, idx) for p, idx in zip(pts, stage_keys)])
            x = layer(np.vstack(pts), x, nb)
            pts = [p[idx] for p, idx in zip(pts, stage_keys)]
        offsets = np.concatenate([[0], np.cumsum([len(p) for p in pts])])
        pooled = ag.concat([row_max_pool(x, offsets), row_avg_pool(x, offsets)])
        h = ag.gelu(self.head1(pooled))
        h = ag.dropout(h, self.config.dropout, rng, training)
        logits = self.head2(h)
        return (logits, pooled) if return_pooled else logits

    __call__ = forward


# ---------------------------------------------------------------- cost model

def linear_flops(rows, fan_in, fan_out):
    return 2 * rows * fan_in * fan_out


def spmm_flops(num_edges, dim):
    """One multiply and one add per stored edge and feature column."""
    return 2 * num_edges * dim


def layer_flops(layer: DiffConvLayer, num_keys, num_sources, num_edges):
    """Analytic floating-point operation count of one convolution layer.

    Counts multiply-adds of the dense maps and sparse products plus one
    operation per element for the cheap elementwise passes; grouping and
    density estimation are excluded.
    """
    d, m, n, e = layer.in_dim, num_keys, num_sources, num_edges
    flops = spmm_flops(e, d) + m * d                     # A X and the difference
    flops += linear_flops(m, 2 * d, layer.out_dim)
    if layer.positional:
        flops += spmm_flops(e, 3) + 3 * m + linear_flops(m, 9, layer.out_dim) + m * layer.out_dim
    if layer.adjacency == "masked":
        a, k = layer.attn.input_dim, layer.attn.d_k
        flops += linear_flops(m + n, a, k) + 2 * e * k    # projections and edge scores
        flops += 4 * e                                   # masked softmax
        if layer.balanced:
            flops += 5 * e                               # sqrt, column and row passes
    elif layer.adjacency in ("spatial", "feature"):
        flops += e * (3 * (3 if layer.adjacency == "spatial" else d) + 5)
    flops += 8 * m * layer.out_dim                       # activation
    return int(flops)


def estimate_flops(model: DiffConvNet, cloud, seed=0):
    """Analytic operation count of one forward pass over ``cloud``.

    The cloud is grouped with the model's own settings so edge counts are
    the real ones.
    """
    cloud = as_cloud(cloud)
    rng = np.random.default_rng(seed)
    keys = model.sample_keys([len(cloud)], rng)
    cfg = model.config
    pts = cloud
    total = linear_flops(len(pts), 3, cfg.stage_widths[0]) + 8 * len(pts) * cfg.stage_widths[0]
    for layer, (idx,) in zip(model.stages, keys):
        nb = layer.group(pts, idx)
        total += layer_flops(layer, len(idx), len(pts), nb.graph.num_edges)
        pts = pts[idx]
    width = cfg.stage_widths[-1]
    total += 2 * len(pts) * width
    total += linear_flops(1, 2 * width, cfg.head_hidden) + 8 * cfg.head_hidden
    total += linear_flops(1, cfg.head_hidden, cfg.num_classes)
    return int(total)


# ---------------------------------------------------------------- metrics

def overall_accuracy(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise InvalidInputError("no predictions to score")
    return float(np.mean(y_true == y_pred))


def class_accuracies(y_true, y_pred, num_classes):
    """Per-class accuracy; classes without samples are reported as ``None``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    out = []
    for c in range(num_classes):
        mask = y_true == c
        out.append(float(np.mean(y_pred[mask] == c)) if mask.any() else None)
    return out


def mean_class_accuracy(y_true, y_pred, num_classes, warnings=None):
    accs = class_accuracies(y_true, y_pred, num_classes)
    present = [a for a in accs if a is not None]
    if warnings is not None:
        warnings.extend(f"class {c} has no samples; skipped in MA"
                        for c, a in enumerate(accs) if a is None)
    if not present:
        raise InvalidInputError("no class has samples")
    return float(np.mean(present))


def predict(model: DiffConvNet, clouds, batch_size=16, seed=None):
    rng = np.random.default_rng(model.config.seed + 1 if seed is None else seed)
    preds = []
    for lo in range(0, len(clouds), batch_size):
        logits = model.forward(clouds[lo:lo + batch_size], training=False, rng=rng)
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: DiffConvNet, clouds, labels, batch_size=16, seed=None) -> Dict:
    """OA, MA and per-class accuracies of ``model`` on ``clouds``."""
    labels = np.asarray(labels)
    pred = predict(model, clouds, batch_size, seed)
    warnings = []
    nc = model.config.num_classes
    return {
        "OA": overall_accuracy(labels, pred),
        "MA": mean_class_accuracy(labels, pred, nc, warnings),
        "per_class": class_accuracies(labels, pred, nc),
        "warnings": warnings,
        "predictions": pred,
    }


# ---------------------------------------------------------------- training

HISTORY_FIELDS = ("epoch", "loss", "lr", "train_OA", "val_OA")


def train_loop(model: DiffConvNet, train_clouds, train_labels, cfg: TrainConfig,
               val_clouds=None, val_labels=None, callback=None):
    """SGD with momentum and cosine annealing; returns per-epoch history rows."""
    if len(train_clouds) == 0:
        raise InvalidInputError("empty training set")
    labels = np.asarray(train_labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.config.num_classes:
        raise InvalidInputError("training label out of range")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.parameters(), cfg.base_lr, cfg.min_lr, cfg.momentum, cfg.lr_period)
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = opt.set_epoch(epoch)
        order = rng.permutation(len(train_clouds))
        losses, correct = [], 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = [augment(train_clouds[i], rng, cfg.translate) for i in idx]
            with ag.Tape() as tape:
                logits = model.forward(batch, training=True, rng=rng)
                loss = ag.softmax_cross_entropy(logits, labels[idx])
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(float(loss.data) * len(idx))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        row = {"epoch": epoch, "loss": sum(losses) / len(order), "lr": lr,
               "train_OA": correct / len(order), "val_OA": float("nan")}
        if val_clouds is not None and len(val_clouds):
            row["val_OA"] = evaluate(model, val_clouds, val_labels, cfg.eval_batch_size)["OA"]
        history.append(row)
        log.info("epoch %d loss %.4f lr %.4f train %.3f val %.3f (%.1fs)", epoch, row["loss"],
                 lr, row["train_OA"], row["val_OA"], time.perf_counter() - t0)
        if callback is not None:
            callback(row)
    return history


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})
