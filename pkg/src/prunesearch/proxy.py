"""Zero-shot fitness proxy: sparsity-weighted gradient-trace alignment.

A trace is the concatenated adapter gradient of each active sub-block
(attention and MLP separately) after one backward pass of mean token cross
entropy over the calibration batch. A candidate's score is

    phi = sum over active blocks of r_attn * rho_attn + r_mlp * rho_mlp

where rho is the Pearson correlation between the candidate's sub-block trace
(computed with masks applied) and the dense anchor's, and the r are the
encoding's retention ratios. Masking is modify-then-restore: the network is
bit-identical before and after a score.
"""

import dataclasses

import numpy as np

from . import autodiff as ad
from .errors import InputError, StateError
from .masks import apply_in_place, realize_masks, restore

SUB_BLOCKS = ("attn", "mlp")
STD_FLOOR = 1e-12


def pearson(x, y):
    """Pearson correlation in float64.

    Returns (rho, degenerate); degenerate is True when either side's
    population standard deviation is below 1e-12, in which case rho is 0.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise InputError("pearson requires equal-length vectors")
    if x.size < 2:
        raise InputError("pearson requires at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.mean(dx * dx))
    sy = np.sqrt(np.mean(dy * dy))
    if sx < STD_FLOOR or sy < STD_FLOOR:
        return 0.0, True
    rho = float(np.mean(dx * dy) / (sx * sy))
    return min(1.0, max(-1.0, rho)), False


@dataclasses.dataclass
class CalibrationBatch:
    """Fixed byte sequences; the model predicts tokens[:, 1:] from tokens[:, :-1]."""

    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise InputError("calibration tokens must be [n_sequences, length]")
        if self.tokens.shape[0] < 1 or self.tokens.shape[1] < 2:
            raise InputError("calibration batch needs >= 1 sequence of length >= 2")

    @property
    def inputs(self):
        return self.tokens[:, :-1]

    @property
    def targets(self):
        return self.tokens[:, 1:]


@dataclasses.dataclass
class GradientTrace:
    """entries[(layer, sub_block)] -> flat float32 adapter gradient vector.
    Inactive blocks have no entries."""

    entries: dict
    rank: int
    adapter_seed: int
    n_sequences: int
    seq_length: int

    def sub_vector(self, layer, sub):
        return self.entries[(layer, sub)]


def _adapter_grad_vector(per_block, names):
    parts = []
    for name in names:
        a, b = per_block[name]
        if a.grad is None or b.grad is None:
            raise StateError(f"adapter {name} has no gradient; backward did not reach it")
        parts.append(a.grad.reshape(-1))
        parts.append(b.grad.reshape(-1))
    return np.concatenate(parts).astype(np.float32, copy=True)


def compute_trace(net, calib):
    """One adapter-gradient trace of the network in its current mask state."""
    if net.adapters is None:
        raise StateError("compute_trace requires attached adapters")
    net.zero_adapter_grads()
    tape, logits = net.forward(calib.inputs, with_adapters=True)
    loss = ad.cross_entropy_mean(tape, logits, calib.targets)
    ad.backward(tape, loss)
    from .model import ATTN_PROJS, MLP_PROJS
    entries = {}
    for l in range(net.n_layers):
        if not net.block_active[l]:
            continue
        entries[(l, "attn")] = _adapter_grad_vector(net.adapters[l], ATTN_PROJS)
        entries[(l, "mlp")] = _adapter_grad_vector(net.adapters[l], MLP_PROJS)
    return GradientTrace(
        entries=entries,
        rank=net.adapter_rank,
        adapter_seed=net.adapter_seed,
        n_sequences=calib.tokens.shape[0],
        seq_length=calib.tokens.shape[1],
    )


def compute_anchor(net, calib):
    """Dense-network trace all candidates are correlated against."""
    if net.restore_token is not None or not net.block_active.all():
        raise StateError("anchor trace requires the pristine dense network")
    return compute_trace(net, calib)


@dataclasses.dataclass
class ProxyResult:
    phi: float
    rho: dict        # (layer, sub) -> pearson correlation
    weights: dict    # (layer, sub) -> retention weight
    degenerate: list  # (layer, sub) keys whose correlation was degenerate

    def to_json_dict(self):
        return {
            "phi": self.phi,
            "rho": {f"{l}.{s}": v for (l, s), v in sorted(self.rho.items())},
            "weights": {f"{l}.{s}": v for (l, s), v in sorted(self.weights.items())},
            "degenerate": [f"{l}.{s}" for (l, s) in self.degenerate],
        }


def correlate(trace, anchor, encoding):
    """Weight each active sub-block correlation by its retention ratio."""
    rho, weights, degenerate = {}, {}, []
    phi = 0.0
    for l in range(encoding.n_layers):
        if not encoding.depth[l]:
            continue
        for si, sub in enumerate(SUB_BLOCKS):
            key = (l, sub)
            if key not in trace.entries or key not in anchor.entries:
                raise InputError(f"trace missing sub-block {key}")
            r, degen = pearson(trace.entries[key], anchor.entries[key])
            if degen:
                degenerate.append(key)
            w = float(encoding.kappa[l, si])
            rho[key] = r
            weights[key] = w
            phi += w * r
    return ProxyResult(phi=float(phi), rho=rho, weights=weights, degenerate=degenerate)


def evaluate(net, encoding, saliency, calib, anchor):
    """Score one candidate; returns (ProxyResult, its GradientTrace).

    Applies the candidate's masks, traces, restores, correlates. The
    network's weights and activity flags are untouched afterwards.
    """
    masks = realize_masks(net, encoding, saliency)
    token = apply_in_place(net, encoding, masks)
    try:
        trace = compute_trace(net, calib)
    finally:
        restore(net, token)
    return correlate(trace, anchor, encoding), trace


def score(net, encoding, saliency, calib, anchor):
    """evaluate() without keeping the trace."""
    result, _ = evaluate(net, encoding, saliency, calib, anchor)
    return result
