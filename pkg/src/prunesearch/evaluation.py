"""Ground truth, rank agreement and proxy-variant reporting.

Ground truth for a candidate is held-out language-model loss after applying
its masks (optionally with a few steps of recovery fine-tuning, masks
re-imposed after every update). Rank agreement between proxy and ground
truth is measured with Spearman and Kendall tau-b over a pool of random
feasible candidates.
"""

import dataclasses
import logging

import numpy as np

from . import autodiff as ad
from .errors import InputError, NumericalError, StateError
from .corpus import sample_sequences
from .masks import apply_in_place, realize_masks, restore, zero_masked_slices
from .model import attach_adapters, detach_adapters, parameter_count
from .proxy import CalibrationBatch, correlate, evaluate, pearson
from .search import sample_random_encoding

log = logging.getLogger(__name__)

PROXY_VARIANTS = ("full", "dot", "cosine", "unweighted")


def average_ranks(x):
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.shape[0], dtype=np.float64)
    i = 0
    while i < x.shape[0]:
        j = i
        while j + 1 < x.shape[0] and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i: j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y):
    """Pearson correlation of average ranks. Degenerate (constant) -> 0."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("spearman_rho requires two equal-length vectors")
    if x.shape[0] < 2:
        raise InputError("spearman_rho requires at least two samples")
    rho, _ = pearson(average_ranks(x), average_ranks(y))
    return rho


def kendall_tau(x, y):
    """Kendall tau-b: (concordant - discordant) / sqrt((n0-n1)(n0-n2)).

    Ties in x count toward n1, ties in y toward n2; fully tied input gives 0.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("kendall_tau requires two equal-length vectors")
    n = x.shape[0]
    if n < 2:
        raise InputError("kendall_tau requires at least two samples")
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(n, k=1)
    prod = sx[iu] * sy[iu]
    concordant = int((prod > 0).sum())
    discordant = int((prod < 0).sum())
    ties_x = int((sx[iu] == 0).sum())
    ties_y = int((sy[iu] == 0).sum())
    n0 = n * (n - 1) // 2
    denom = float(np.sqrt((n0 - ties_x) * (n0 - ties_y)))
    if denom == 0.0:
        return 0.0
    return (concordant - discordant) / denom


@dataclasses.dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 0.4
    momentum: float = 0.9
    seed: int = 1
    log_every: int = 200

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise InputError("invalid training configuration")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError("momentum must lie in [0, 1)")


def _sgd_step(tensors, velocities, lr, momentum):
    for t in tensors:
        if t.grad is None:
            continue
        v = velocities.get(id(t))
        if v is None:
            v = np.zeros_like(t.data)
            velocities[id(t)] = v
        v *= momentum
        v += t.grad
        t.data -= lr * v


def train_tiny_base(net, train_split, tcfg):
    """SGD-with-momentum pretraining of the dense base. Returns loss history.

    Raises NumericalError naming the step if the loss goes non-finite.
    """
    if net.adapters is not None:
        raise StateError("detach adapters before training the base")
    if net.restore_token is not None or not net.block_active.all():
        raise StateError("training requires the pristine dense network")
    rng = np.random.default_rng(tcfg.seed)
    velocities = {}
    history = []
    params = list(net.base_tensors())
    seq = net.config.context_length
    for step in range(tcfg.steps):
        tokens = sample_sequences(train_split, rng, tcfg.batch_size, seq)
        ad.zero_grads(params)
        tape, logits = net.forward(tokens[:, :-1])
        loss = ad.cross_entropy_mean(tape, logits, tokens[:, 1:])
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite training loss at step {step}")
        ad.backward(tape, loss)
        _sgd_step(params, velocities, tcfg.lr, tcfg.momentum)
        history.append(value)
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("train step %d: loss %.4f", step, value)
    ad.zero_grads(params)
    return history


def heldout_loss(net, batch):
    """Mean token cross entropy on an evaluation batch, adapters ignored."""
    tape, logits = net.forward(batch.inputs, with_adapters=False)
    loss = ad.cross_entropy_mean(tape, logits, batch.targets)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericalError("non-finite held-out loss")
    return value


@dataclasses.dataclass
class RecoveryConfig:
    steps: int = 0
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 4
    seed: int = 3


def true_metric(net, encoding, saliency, heldout_batch, train_split=None, recovery=None):
    """Held-out loss of the masked candidate; the network is left bit-identical.

    With recovery steps the retained weights are briefly fine-tuned (masks
    re-imposed after every update) before measuring, which requires the
    train split and detached adapters.
    """
    steps = recovery.steps if recovery is not None else 0
    if steps > 0 and net.adapters is not None:
        raise StateError("recovery fine-tuning requires detached adapters")
    if steps > 0 and train_split is None:
        raise InputError("recovery fine-tuning requires a train split")
    masks = realize_masks(net, encoding, saliency)
    snapshot = [(t, t.data.copy()) for t in net.base_tensors()] if steps > 0 else None
    token = apply_in_place(net, encoding, masks)
    try:
        if steps > 0:
            rng = np.random.default_rng(recovery.seed)
            velocities = {}
            params = list(net.base_tensors())
            seq = net.config.context_length
            for t in params:
                t.requires_grad = True
            for step in range(steps):
                tokens = sample_sequences(train_split, rng, recovery.batch_size, seq)
                ad.zero_grads(params)
                tape, logits = net.forward(tokens[:, :-1])
                loss = ad.cross_entropy_mean(tape, logits, tokens[:, 1:])
                if not np.isfinite(float(loss.data)):
                    raise NumericalError(f"non-finite recovery loss at step {step}")
                ad.backward(tape, loss)
                _sgd_step(params, velocities, recovery.lr, recovery.momentum)
                zero_masked_slices(net, encoding, masks)
            ad.zero_grads(params)
        return heldout_loss(net, heldout_batch)
    finally:
        restore(net, token)
        if snapshot is not None:
            for t, original in snapshot:
                np.copyto(t.data, original)


def proxy_variant(kind, trace, anchor, encoding):
    """Ablations of the full proxy: raw dot product, cosine, or unweighted
    correlation over active sub-blocks."""
    if kind == "full":
        return correlate(trace, anchor, encoding).phi
    total = 0.0
    for l in range(encoding.n_layers):
        if not encoding.depth[l]:
            continue
        for si, sub in enumerate(("attn", "mlp")):
            a = np.asarray(trace.entries[(l, sub)], dtype=np.float64)
            b = np.asarray(anchor.entries[(l, sub)], dtype=np.float64)
            w = float(encoding.kappa[l, si])
            if kind == "dot":
                total += w * float(a @ b)
            elif kind == "cosine":
                na, nb = np.linalg.norm(a), np.linalg.norm(b)
                total += w * (float(a @ b) / (na * nb) if na > 1e-12 and nb > 1e-12 else 0.0)
            elif kind == "unweighted":
                total += pearson(a, b)[0]
            else:
                raise InputError(f"unknown proxy variant {kind!r}")
    return total


@dataclasses.dataclass
class PoolEntry:
    encoding: object
    proxies: dict      # variant -> value
    metric: float      # negated held-out loss: higher is better
    params: int


@dataclasses.dataclass
class RankedPool:
    entries: list
    metric_kind: str = "neg_loss"

    def proxy_values(self, variant):
        return np.array([e.proxies[variant] for e in self.entries])

    def metric_values(self):
        return np.array([e.metric for e in self.entries])


def build_pool(net, saliency, prior, calib, anchor, heldout_batch, count, seed,
               search_cfg, train_split=None, recovery=None,
               variants=PROXY_VARIANTS):
    """Score `count` distinct random feasible candidates with every proxy
    variant and the ground-truth metric."""
    rng = np.random.default_rng(seed)
    entries = []
    seen = set()
    attempts = 0
    while len(entries) < count:
        attempts += 1
        if attempts > 50 * count:
            raise InputError("could not sample enough distinct feasible encodings")
        enc = sample_random_encoding(rng, net, prior, search_cfg)
        if enc.key() in seen:
            continue
        seen.add(enc.key())
        _, trace = evaluate(net, enc, saliency, calib, anchor)
        proxies = {v: proxy_variant(v, trace, anchor, enc) for v in variants}
        recovering = recovery is not None and recovery.steps > 0
        if recovering and net.adapters is not None:
            # recovery trains the base, which must be unfrozen; re-attaching
            # with the stored rank and seed restores identical adapters
            rank, seed = net.adapter_rank, net.adapter_seed
            detach_adapters(net)
            try:
                loss = true_metric(net, enc, saliency, heldout_batch,
                                   train_split=train_split, recovery=recovery)
            finally:
                attach_adapters(net, rank, seed)
        else:
            loss = true_metric(net, enc, saliency, heldout_batch,
                               train_split=train_split, recovery=recovery)
        entries.append(PoolEntry(enc, proxies, -loss, parameter_count(net, enc)))
        log.info("pool %d/%d: phi %.4f loss %.4f", len(entries), count,
                 proxies.get("full", float("nan")), loss)
    return RankedPool(entries)


@dataclasses.dataclass
class ValidationReport:
    rows: list  # dicts: variant, spearman, kendall, n

    def row(self, variant):
        for r in self.rows:
            if r["variant"] == variant:
                return r
        raise KeyError(variant)


def validate_proxy(pool):
    """Rank agreement of every proxy variant against the metric."""
    if len(pool.entries) < 2:
        raise InputError("a ranked pool needs at least two entries")
    metric = pool.metric_values()
    rows = []
    for variant in pool.entries[0].proxies:
        values = pool.proxy_values(variant)
        rows.append({
            "variant": variant,
            "spearman": spearman_rho(values, metric),
            "kendall": kendall_tau(values, metric),
            "n": len(pool.entries),
        })
    return ValidationReport(rows)


def report_csv(report):
    lines = ["variant,spearman,kendall,n"]
    for r in report.rows:
        lines.append(f"{r['variant']},{r['spearman']:.6f},{r['kendall']:.6f},{r['n']}")
    return "\n".join(lines) + "\n"


def scatter_svg(xs, ys, xlabel="proxy", ylabel="metric", title="proxy vs metric"):
    """Minimal self-contained SVG scatter plot."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 1:
        raise InputError("scatter_svg requires matching 1-D data")
    w, h, pad = 480, 360, 48

    def place(v, lo, hi, a, b):
        span = hi - lo
        if span <= 0:
            return 0.5 * (a + b)
        return a + (v - lo) / span * (b - a)

    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{w // 2}" y="{h - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{h // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {h // 2})">{ylabel}</text>',
        f'<text x="{w // 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{pad}" y="{h - pad + 14}" font-size="9">{x0:.4g}</text>',
        f'<text x="{w - pad}" y="{h - pad + 14}" text-anchor="end" font-size="9">{x1:.4g}</text>',
        f'<text x="{pad - 4}" y="{h - pad}" text-anchor="end" font-size="9">{y0:.4g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-size="9">{y1:.4g}</text>',
    ]
    for x, y in zip(xs, ys):
        cx = place(x, x0, x1, pad, w - pad)
        cy = place(y, y0, y1, h - pad, pad)
        parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="3" fill="steelblue" fill-opacity="0.7"/>')
    parts.append("</svg>")
    return "\n".join(parts)
