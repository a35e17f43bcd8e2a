"""Miniature target classifiers and their training loops.

Three architectures cover the classifier families the attacks target:
a direction-sequence CNN, a flow-pair correlation CNN scoring whether an
ingress/egress pair belongs to the same connection, and a two-branch
model over direction and delay channels. All consume raw feature values
(directions in {-1,0,+1}, delays in seconds, sizes in bytes) and scale
internally, so perturbation code can operate in physical units with
gradients flowing end to end.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .traffic import Dataset, Flow, FlowPair, to_fixed_length

ARCHS = ("direction_cnn", "pair_cnn", "twobranch")

IPD_SCALE = 10.0
SIZE_SCALE = 1.0 / 1500.0

CHECKPOINT_FORMAT = "netpert-model-v1"


class ChannelMismatchError(ValueError):
    """Dataset items do not carry the channels an architecture needs."""


class CheckpointError(ValueError):
    """A checkpoint file is unreadable or from an unsupported version."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    fp_target: float = 1e-2  # pair model: FP rate the decision threshold targets


@dataclass
class TrainReport:
    epochs: int
    final_train_accuracy: float
    final_test_accuracy: float  # pair model: TP rate at fp_target
    seed: int


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


def direction_tensor(flows, length: int) -> torch.Tensor:
    rows = [to_fixed_length(f, length).directions for f in flows]
    return torch.tensor(np.stack(rows), dtype=torch.float32)


def twobranch_tensor(flows, length: int) -> torch.Tensor:
    fixed = [to_fixed_length(f, length) for f in flows]
    dirs = np.stack([f.directions for f in fixed])
    ipds = np.stack([f.ipds for f in fixed])
    return torch.tensor(np.stack([dirs, ipds], axis=1), dtype=torch.float32)


def pair_tensor(pairs) -> torch.Tensor:
    return torch.tensor(np.stack([p.rows for p in pairs]), dtype=torch.float32)


def label_tensor(items) -> torch.Tensor:
    return torch.tensor([item.label for item in items], dtype=torch.long)


def features_for(arch: str, items, length: int) -> torch.Tensor:
    """Raw input tensor for one architecture; validates channel layout."""
    if arch == "pair_cnn":
        if not all(isinstance(p, FlowPair) for p in items):
            raise ChannelMismatchError("pair_cnn consumes FlowPair items")
        return pair_tensor(items)
    if not all(isinstance(f, Flow) for f in items):
        raise ChannelMismatchError(f"{arch} consumes Flow items")
    if arch == "direction_cnn":
        return direction_tensor(items, length)
    if arch == "twobranch":
        return twobranch_tensor(items, length)
    raise ValueError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


class _ConvStack(nn.Module):
    """Two conv blocks with max pooling, then a flattened dense feature."""

    def __init__(self, in_channels, length, width=16):
        super().__init__()
        self.conv1 = nn.Conv1d(in_channels, width, kernel_size=8, padding=4)
        self.conv2 = nn.Conv1d(width, 2 * width, kernel_size=8, padding=4)
        self.pool = nn.MaxPool1d(4)
        with torch.no_grad():
            probe = torch.zeros(1, in_channels, length)
            self.out_dim = self._stack(probe).shape[1]

    def _stack(self, x):
        h = self.pool(F.relu(self.conv1(x)))
        h = self.pool(F.relu(self.conv2(h)))
        return h.flatten(1)

    def forward(self, x):
        return self._stack(x)


class _DirectionNet(nn.Module):
    def __init__(self, length, class_count):
        super().__init__()
        self.stack = _ConvStack(1, length)
        self.fc1 = nn.Linear(self.stack.out_dim, 128)
        self.fc2 = nn.Linear(128, class_count)

    def forward(self, x):  # (B, L) raw directions
        h = self.stack(x.unsqueeze(1))
        return self.fc2(F.relu(self.fc1(h)))


class _PairNet(nn.Module):
    def __init__(self, length):
        super().__init__()
        self.stack = _ConvStack(8, length, width=32)
        self.fc1 = nn.Linear(self.stack.out_dim, 128)
        self.fc2 = nn.Linear(128, 1)

    def forward(self, rows):  # (B, 8, L) raw pair rows
        scaled = torch.cat([rows[:, :4] * IPD_SCALE, rows[:, 4:] * SIZE_SCALE], dim=1)
        h = self.stack(scaled)
        return self.fc2(F.relu(self.fc1(h))).squeeze(-1)  # correlation logit


class _TwoBranchNet(nn.Module):
    def __init__(self, length, class_count):
        super().__init__()
        self.dir_stack = _ConvStack(1, length)
        self.time_stack = _ConvStack(1, length)
        self.fc1 = nn.Linear(self.dir_stack.out_dim + self.time_stack.out_dim, 128)
        self.fc2 = nn.Linear(128, class_count)

    def forward(self, x):  # (B, 2, L): directions then delays
        hd = self.dir_stack(x[:, :1])
        ht = self.time_stack(x[:, 1:] * IPD_SCALE)
        h = torch.cat([hd, ht], dim=1)
        return self.fc2(F.relu(self.fc1(h)))


def _build_net(arch: str, length: int, class_count: int) -> nn.Module:
    if arch == "direction_cnn":
        return _DirectionNet(length, class_count)
    if arch == "pair_cnn":
        return _PairNet(length)
    if arch == "twobranch":
        return _TwoBranchNet(length, class_count)
    raise ValueError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# Classifier wrapper
# ---------------------------------------------------------------------------


class Classifier:
    """A fitted model plus the metadata needed to use it.

    Immutable by convention once trained; prediction never mutates state,
    so instances are safe to share across threads.
    """

    def __init__(self, arch, net, input_length, class_count, seed,
                 threshold=None, fp_target=None):
        self.arch = arch
        self.net = net
        self.input_length = input_length
        self.class_count = class_count
        self.seed = seed
        self.threshold = threshold  # pair model decision threshold
        self.fp_target = fp_target

    def logits(self, x) -> torch.Tensor:
        param = next(self.net.parameters())
        t = torch.as_tensor(x, dtype=param.dtype) if not torch.is_tensor(x) else x.to(param.dtype)
        squeeze = t.dim() == (2 if self.arch == "direction_cnn" else 3) - 1
        if squeeze:
            t = t.unsqueeze(0)
        out = self.net(t)
        return out[0] if squeeze else out

    def predict(self, x):
        """Class indices (classification) or correlation scores (pair)."""
        with torch.no_grad():
            out = self.logits(x)
            if self.arch == "pair_cnn":
                return torch.sigmoid(out).numpy()
            return out.argmax(dim=-1).numpy()

    def predict_proba(self, x):
        with torch.no_grad():
            out = self.logits(x)
            if self.arch == "pair_cnn":
                return torch.sigmoid(out).numpy()
            return torch.softmax(out, dim=-1).numpy()

    def loss(self, logits, target) -> torch.Tensor:
        """The model's training loss; accepts hard or soft targets."""
        if self.arch == "pair_cnn":
            t = torch.as_tensor(target, dtype=logits.dtype)
            return F.binary_cross_entropy_with_logits(logits, t.expand_as(logits))
        t = torch.as_tensor(target)
        if t.dtype.is_floating_point:  # soft target distribution
            logp = F.log_softmax(logits, dim=-1)
            return -(t.to(logits.dtype) * logp).sum(dim=-1).mean()
        logits2 = logits if logits.dim() == 2 else logits.unsqueeze(0)
        return F.cross_entropy(logits2, t.reshape(-1))

    def double_copy(self) -> "Classifier":
        """A float64 clone, for high-precision gradient checks."""
        clone = copy.deepcopy(self)
        clone.net = clone.net.double()
        return clone


def train_classifier(arch: str, dataset: Dataset, hyper: TrainConfig | None = None,
                     seed: int = 0):
    """Fit one architecture on a dataset; deterministic under the seed.

    Returns (Classifier, TrainReport). Classification models report
    train/test accuracy; the pair model reports the true-positive rate at
    hyper.fp_target, with the decision threshold chosen on validation
    negatives.
    """
    hyper = hyper or TrainConfig()
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    torch.manual_seed(seed)
    length = dataset.fixed_length
    net = _build_net(arch, length, dataset.class_count)
    clf = Classifier(arch, net, length, dataset.class_count, seed, fp_target=hyper.fp_target)

    train_items = dataset.subset("train")
    x = features_for(arch, train_items, length)
    y = label_tensor(train_items)
    if arch == "pair_cnn":
        y = y.float()

    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(hyper.epochs):
        order = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            logits = net(x[idx])
            loss = clf.loss(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()

    if arch == "pair_cnn":
        clf.threshold = _fit_threshold(clf, dataset, hyper.fp_target)
        train_acc = true_positive_rate(clf, train_items)
        test_acc = true_positive_rate(clf, dataset.subset("test"))
    else:
        train_acc = accuracy(clf, train_items)
        test_acc = accuracy(clf, dataset.subset("test"))
    report = TrainReport(hyper.epochs, float(train_acc), float(test_acc), seed)
    return clf, report


def accuracy(clf: Classifier, items) -> float:
    x = features_for(clf.arch, items, clf.input_length)
    pred = clf.predict(x)
    return float((pred == np.array([f.label for f in items])).mean())


def threshold_for_fp(negative_scores, fp: float) -> float:
    """Score threshold whose false-positive rate on `negative_scores` is fp.

    Scores strictly above the threshold count positive. Raises when the
    requested rate is unreachable with the available negatives.
    """
    scores = np.sort(np.asarray(negative_scores))[::-1]
    if len(scores) == 0:
        raise ValueError("no negative scores available")
    allow = int(np.floor(fp * len(scores)))
    if fp > 0 and allow < 1:
        raise ValueError(f"FP rate {fp} unreachable with {len(scores)} negatives")
    return float(scores[allow]) if allow < len(scores) else float(scores[-1]) - 1.0


def _fit_threshold(clf: Classifier, dataset: Dataset, fp: float) -> float:
    val = dataset.subset("validation")
    neg = [p for p in val if p.label == 0]
    scores = clf.predict(pair_tensor(neg))
    return threshold_for_fp(scores, fp)


def true_positive_rate(clf: Classifier, pairs, threshold=None, perturb=None) -> float:
    """TP rate of the pair model on associated pairs, at a fixed threshold.

    `perturb` optionally maps the raw (B, 8, L) tensor to a perturbed one
    before scoring.
    """
    thr = clf.threshold if threshold is None else threshold
    pos = [p for p in pairs if p.label == 1]
    x = pair_tensor(pos)
    if perturb is not None:
        x = perturb(x)
    scores = clf.predict(x)
    return float((scores > thr).mean())


def predict(model: Classifier, x):
    """Pure prediction on a fixed-length feature tensor."""
    return model.predict(x)


def loss_gradient(model: Classifier, x, target, loss_fn=None):
    """Gradient of the model's loss w.r.t. the input features.

    `target` is a hard label (int / 0-1 for the pair model) or a soft
    target (probability vector / score). `loss_fn(logits, target)` may
    replace the model's own loss. Returns a numpy array shaped like x.
    """
    param = next(model.net.parameters())
    t = torch.as_tensor(np.asarray(x), dtype=param.dtype)
    t = t.clone().requires_grad_(True)
    logits = model.logits(t)
    loss = (loss_fn or model.loss)(logits, target)
    (grad,) = torch.autograd.grad(loss, t)
    return grad.detach().numpy()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_classifier(clf: Classifier, path) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "arch": clf.arch,
            "input_length": clf.input_length,
            "class_count": clf.class_count,
            "seed": clf.seed,
            "threshold": clf.threshold,
            "fp_target": clf.fp_target,
            "state": clf.net.state_dict(),
        },
        path,
    )


def load_classifier(path) -> Classifier:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported model checkpoint format {blob.get('format')!r}")
    net = _build_net(blob["arch"], blob["input_length"], blob["class_count"])
    net.load_state_dict(blob["state"])
    net.eval()
    return Classifier(blob["arch"], net, blob["input_length"], blob["class_count"],
                      blob["seed"], blob["threshold"], blob["fp_target"])
