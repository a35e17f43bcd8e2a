"""Traffic trace domain types, file IO, and synthetic corpora.

A trace is three aligned per-packet vectors: direction (+1 outgoing,
-1 incoming), inter-packet delay in seconds, and size in bytes. The
synthetic corpus generator produces class-conditional traces (bursty
direction patterns, Laplace-jittered delays, cell-size mixtures) that
stand in for captured datasets at desk scale, plus paired ingress/egress
connections for the flow-correlation task.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

PAD_DIRECTION = 0  # sentinel for "no packet" past the end of a short trace

SPLIT_NAMES = ("train", "validation", "test")


class TraceParseError(ValueError):
    """A trace file line could not be parsed."""


class TraceValidationError(ValueError):
    """A parsed record violates a flow invariant."""


@dataclass
class Flow:
    """One traffic trace: aligned direction/delay/size vectors plus a label.

    directions hold +1 (outgoing) or -1 (incoming); after fixed-length
    padding they may also hold the pad sentinel 0. Delays are seconds,
    sizes are bytes.
    """

    directions: np.ndarray
    ipds: np.ndarray
    sizes: np.ndarray
    label: int

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.int64)
        self.ipds = np.asarray(self.ipds, dtype=np.float64)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        n = len(self.directions)
        if len(self.ipds) != n or len(self.sizes) != n:
            raise TraceValidationError(
                f"vector lengths differ: dirs={n} ipds={len(self.ipds)} sizes={len(self.sizes)}"
            )
        if not np.isin(self.directions, (-1, 1, PAD_DIRECTION)).all():
            raise TraceValidationError("directions must be -1, +1, or the pad sentinel 0")
        if (self.ipds < 0).any():
            raise TraceValidationError("inter-packet delays must be non-negative")
        if (self.sizes < 0).any():
            raise TraceValidationError("sizes must be non-negative")

    def __len__(self) -> int:
        return len(self.directions)


@dataclass
class FlowPair:
    """The 8-row pairing of an ingress and an egress flow.

    Rows, in order: upstream delays of ingress and egress, downstream
    delays of ingress and egress, then the four size rows in the same
    order. label is 1 for an associated pair, 0 otherwise.
    """

    rows: np.ndarray
    label: int

    # row indices into `rows`
    ING_UP_TIME, EGR_UP_TIME, ING_DOWN_TIME, EGR_DOWN_TIME = 0, 1, 2, 3
    ING_UP_SIZE, EGR_UP_SIZE, ING_DOWN_SIZE, EGR_DOWN_SIZE = 4, 5, 6, 7

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] != 8:
            raise TraceValidationError(f"expected 8 rows, got shape {self.rows.shape}")
        if (self.rows < 0).any():
            raise TraceValidationError("pair rows must be non-negative")
        size_rows = self.rows[4:]
        if not np.allclose(size_rows, np.round(size_rows)):
            raise TraceValidationError("size rows must hold integers")
        if self.label not in (0, 1):
            raise TraceValidationError(f"pair label must be 0 or 1, got {self.label}")

    def __len__(self) -> int:
        return self.rows.shape[1]


@dataclass
class Dataset:
    """A collection of Flow or FlowPair items with named splits.

    `split` maps each of train/validation/test to index arrays into
    `flows`. `fixed_length` is the per-item vector length models consume
    (items are padded/truncated on featurization, not in place).
    """

    flows: list
    fixed_length: int
    class_count: int
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.split:
            if name not in SPLIT_NAMES:
                raise ValueError(f"unknown split name {name!r}")
        labels = {f.label for f in self.flows}
        if self.flows and not isinstance(self.flows[0], FlowPair):
            if labels and (min(labels) < 0 or max(labels) >= self.class_count):
                raise TraceValidationError(
                    f"labels {sorted(labels)[:5]}... must lie in [0, {self.class_count})"
                )

    def subset(self, name: str) -> list:
        """Items of one split, in index order."""
        return [self.flows[i] for i in self.split[name]]

    def __len__(self) -> int:
        return len(self.flows)


def to_fixed_length(flow: Flow, length: int) -> Flow:
    """Truncate a flow to its first `length` packets, or zero-pad up to it."""
    if length < 1:
        raise ValueError("length must be >= 1")
    n = len(flow)
    if n >= length:
        return Flow(flow.directions[:length], flow.ipds[:length], flow.sizes[:length], flow.label)
    pad = length - n
    return Flow(
        np.concatenate([flow.directions, np.full(pad, PAD_DIRECTION, dtype=np.int64)]),
        np.concatenate([flow.ipds, np.zeros(pad)]),
        np.concatenate([flow.sizes, np.zeros(pad, dtype=np.int64)]),
        flow.label,
    )


# ---------------------------------------------------------------------------
# Trace file IO
#
# One record per line: label<TAB>d1,d2,...<TAB>t1,t2,...<TAB>s1,s2,...
# Directions are signed ints, delays decimal seconds (6 fractional digits),
# sizes ints. A structured header carries the dataset manifest.
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^# (\w+)=(.*)$")


def save_traces(dataset: Dataset, path) -> None:
    """Write a Flow dataset to the newline-delimited trace format."""
    lines = ["# format=netpert-traces-v1"]
    lines.append(f"# class_count={dataset.class_count}")
    lines.append(f"# fixed_length={dataset.fixed_length}")
    for name in SPLIT_NAMES:
        idx = dataset.split.get(name, [])
        lines.append(f"# split_{name}={','.join(str(i) for i in idx)}")
    for flow in dataset.flows:
        dirs = ",".join(str(d) for d in flow.directions)
        ipds = ",".join(f"{t:.6f}" for t in flow.ipds)
        sizes = ",".join(str(s) for s in flow.sizes)
        lines.append(f"{flow.label}\t{dirs}\t{ipds}\t{sizes}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_traces(path, fmt: str = "netpert-traces-v1") -> Dataset:
    """Parse a trace file, validating every record.

    Raises TraceParseError (with the offending line number) on malformed
    lines and TraceValidationError on invariant violations.
    """
    header = {}
    flows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            m = _HEADER_RE.match(line)
            if m:
                header[m.group(1)] = m.group(2)
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise TraceParseError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
            try:
                label = int(parts[0])
                dirs = [int(v) for v in parts[1].split(",")] if parts[1] else []
                ipds = [float(v) for v in parts[2].split(",")] if parts[2] else []
                sizes = [int(v) for v in parts[3].split(",")] if parts[3] else []
            except ValueError as exc:
                raise TraceParseError(f"line {lineno}: {exc}") from exc
            try:
                flows.append(Flow(dirs, ipds, sizes, label))
            except TraceValidationError as exc:
                raise TraceValidationError(f"line {lineno}: {exc}") from exc
    if header.get("format", fmt) != fmt:
        raise TraceParseError(f"unsupported trace format {header.get('format')!r}")
    split = {}
    for name in SPLIT_NAMES:
        raw = header.get(f"split_{name}", "")
        split[name] = [int(i) for i in raw.split(",")] if raw else []
    return Dataset(
        flows=flows,
        fixed_length=int(header.get("fixed_length", 0) or 0),
        class_count=int(header.get("class_count", 0) or 0),
        split=split,
    )


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

CELL_SIZES = (512, 1024, 1500)


def _class_profile(label: int, class_count: int):
    """Deterministic per-class generative parameters."""
    t = label / max(class_count - 1, 1)
    return {
        # direction burst Markov chain: stay-probabilities for the
        # outgoing and incoming states
        "out_stay": 0.50 + 0.42 * t,
        "in_stay": 0.94 - 0.40 * t,
        # class-specific opening burst template length (packets)
        "preamble": 8 + label * 4,
        # Laplace delay profile (seconds)
        "ipd_loc": 0.010 + 0.004 * label,
        "ipd_scale": 0.002 + 0.0008 * label,
        # incoming-packet size mixture over cell sizes
        "size_probs": _normalize([3.0 + label, 2.0 + (label * 7) % 5, 1.0 + (label * 3) % 4]),
    }


def _normalize(weights):
    w = np.asarray(weights, dtype=np.float64)
    return w / w.sum()


def _markov_directions(rng, n, out_stay, in_stay, start=-1):
    dirs = np.empty(n, dtype=np.int64)
    state = start
    for i in range(n):
        dirs[i] = state
        stay = out_stay if state == 1 else in_stay
        if rng.random() >= stay:
            state = -state
    return dirs


def _synth_flow(rng, label: int, class_count: int, length: int) -> Flow:
    prof = _class_profile(label, class_count)
    # opening burst: alternating bursts whose lengths identify the class
    pre = []
    burst = prof["preamble"]
    sign = 1
    while len(pre) < min(3 * burst, length):
        pre.extend([sign] * burst)
        sign = -sign
    pre = np.asarray(pre[: min(3 * burst, length)], dtype=np.int64)
    tail = _markov_directions(rng, length - len(pre), prof["out_stay"], prof["in_stay"])
    dirs = np.concatenate([pre, tail])
    # sprinkle flips so the opening burst is a noisy signature, not a constant
    flip = rng.random(length) < 0.05
    dirs[flip] = -dirs[flip]

    ipds = rng.laplace(prof["ipd_loc"], prof["ipd_scale"], size=length)
    ipds = np.clip(ipds, 0.0, None)

    sizes = np.where(
        dirs == 1,
        512,  # outgoing requests ride single cells
        rng.choice(CELL_SIZES, size=length, p=prof["size_probs"]),
    ).astype(np.int64)
    return Flow(dirs, ipds, sizes, label)


def _make_splits(rng, count: int, fractions=(0.7, 0.15, 0.15)) -> dict:
    order = rng.permutation(count)
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    return {
        "train": sorted(order[:n_train].tolist()),
        "validation": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }


def synth_corpus(
    class_count: int,
    per_class: int,
    length_range=(350, 650),
    seed: int = 0,
    fixed_length: int = 500,
) -> Dataset:
    """Generate a class-conditional classification corpus.

    Each class owns a direction-burst profile, a Laplace delay profile,
    and a size mixture; classes are separable enough for small CNNs to
    exceed 90% test accuracy. Pure function of its arguments.
    """
    if class_count < 2 or per_class < 2:
        raise ValueError("need class_count >= 2 and per_class >= 2")
    rng = np.random.default_rng(seed)
    flows = []
    for label in range(class_count):
        for _ in range(per_class):
            length = int(rng.integers(length_range[0], length_range[1] + 1))
            flows.append(_synth_flow(rng, label, class_count, length))
    split = _make_splits(rng, len(flows))
    return Dataset(flows=flows, fixed_length=fixed_length, class_count=class_count, split=split)


def synth_correlation_corpus(
    connections: int,
    length_range=(400, 600),
    seed: int = 0,
    fixed_length: int = 200,
) -> Dataset:
    """Generate paired ingress/egress flows for the correlation task.

    Flow 2k is the ingress and flow 2k+1 the egress segment of connection
    k; both carry label k. The downstream delay pattern is shared between
    the two segments up to Laplace jitter (that is the correlatable
    signal); upstream delays and egress sizes are uncorrelated noise, so
    correlation hinges on downstream timing.
    """
    if connections < 2:
        raise ValueError("need at least 2 connections")
    rng = np.random.default_rng(seed)
    flows = []
    for conn in range(connections):
        length = int(rng.integers(length_range[0], length_range[1] + 1))
        # interleave ~3 downstream packets per upstream ack
        dirs = np.where(rng.random(length) < 0.25, 1, -1).astype(np.int64)
        down = dirs == -1
        n_down = int(down.sum())
        base_down_ipd = np.clip(rng.exponential(0.030, size=n_down), 0.0, 0.5)
        ing_sizes_down = rng.choice(CELL_SIZES, size=length, p=(0.6, 0.25, 0.15))
        for side in range(2):  # 0 = ingress, 1 = egress
            ipds = np.clip(rng.laplace(0.004, 0.002, size=length), 0.0, None)
            d_ipds = np.clip(base_down_ipd + rng.laplace(0.0, 0.003, size=n_down), 0.0, None)
            ipds[down] = d_ipds
            if side == 0:
                sizes = np.where(dirs == 1, 512, ing_sizes_down).astype(np.int64)
            else:
                # egress side repackages; sizes carry no correlation signal
                sizes = np.where(dirs == 1, 512, rng.choice(CELL_SIZES, size=length)).astype(np.int64)
            flows.append(Flow(dirs, ipds, sizes, conn))
    split = _make_splits(rng, connections)
    return Dataset(flows=flows, fixed_length=fixed_length, class_count=connections, split=split)


def _masked_to_length(values: np.ndarray, mask: np.ndarray, length: int) -> np.ndarray:
    picked = values[mask][:length]
    out = np.zeros(length, dtype=np.float64)
    out[: len(picked)] = picked
    return out


def build_pair_rows(ingress: Flow, egress: Flow, length: int) -> np.ndarray:
    """Assemble the 8 aligned rows for one (ingress, egress) pairing."""
    rows = np.zeros((8, length))
    for k, flow in enumerate((ingress, egress)):
        up = flow.directions == 1
        down = flow.directions == -1
        rows[0 + k] = _masked_to_length(flow.ipds, up, length)
        rows[2 + k] = _masked_to_length(flow.ipds, down, length)
        rows[4 + k] = _masked_to_length(flow.sizes.astype(np.float64), up, length)
        rows[6 + k] = _masked_to_length(flow.sizes.astype(np.float64), down, length)
    return rows


def make_pairs(dataset: Dataset, negatives_per_flow: int, seed: int = 0) -> Dataset:
    """Build associated and non-associated flow pairs from a paired corpus.

    Expects the ingress/egress layout produced by synth_correlation_corpus
    (flows 2k and 2k+1 share connection label k). Emits one label-1 pair
    per connection plus `negatives_per_flow` label-0 pairs whose egress is
    drawn without replacement from other connections. Splits follow the
    connection splits of the input.
    """
    conns = dataset.class_count
    if len(dataset.flows) != 2 * conns:
        raise ValueError("expected exactly one ingress and one egress flow per connection")
    if negatives_per_flow >= conns:
        raise ValueError(f"negatives_per_flow={negatives_per_flow} needs more than {conns} connections")
    rng = np.random.default_rng(seed)
    length = dataset.fixed_length
    pairs = []
    pair_split = {name: [] for name in SPLIT_NAMES}
    conn_split = {name: set(dataset.split.get(name, [])) for name in SPLIT_NAMES}

    def split_of(conn):
        for name in SPLIT_NAMES:
            if conn in conn_split[name]:
                return name
        return None

    for conn in range(conns):
        ingress, egress = dataset.flows[2 * conn], dataset.flows[2 * conn + 1]
        name = split_of(conn)
        pairs.append(FlowPair(build_pair_rows(ingress, egress, length), 1))
        if name:
            pair_split[name].append(len(pairs) - 1)
        others = np.array([c for c in range(conns) if c != conn])
        for other in rng.choice(others, size=negatives_per_flow, replace=False):
            pairs.append(FlowPair(build_pair_rows(ingress, dataset.flows[2 * other + 1], length), 0))
            if name:
                pair_split[name].append(len(pairs) - 1)
    return Dataset(flows=pairs, fixed_length=length, class_count=2, split=pair_split)
