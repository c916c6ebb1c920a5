"""Architecture encodings, activation-weighted saliency and width masks.

An encoding is a per-block keep/drop bit plus (attention, MLP) retention
ratios. Saliency scores a channel by sum_i |W_ij| * ||X_j||_2 where W is the
projection consuming the channel (wo for attention, wdown for MLP) and X its
calibration activations. Masks keep the top-scoring head/channel groups and
are applied by zeroing weight slices in place; restore() puts the exact
original bytes back.
"""

import dataclasses

import numpy as np

from . import kernels
from .errors import InputError, StateError
from .model import retained_channels, retained_heads


@dataclasses.dataclass
class ArchEncoding:
    """depth: bool[L] block-active flags; kappa: float64[L, 2] retentions
    (column 0 attention, column 1 MLP)."""

    depth: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=bool)
        self.kappa = np.asarray(self.kappa, dtype=np.float64)
        if self.depth.ndim != 1:
            raise InputError("depth must be a 1-D bit vector")
        if self.kappa.shape != (self.depth.shape[0], 2):
            raise InputError("kappa must have shape [n_layers, 2]")

    @property
    def n_layers(self):
        return self.depth.shape[0]

    def validate(self, min_depth, kappa_min):
        if int(self.depth.sum()) < min_depth:
            raise InputError(f"fewer than {min_depth} active blocks")
        if np.any(self.kappa < kappa_min - 1e-12) or np.any(self.kappa > 1.0 + 1e-12):
            raise InputError(f"retentions must lie in [{kappa_min}, 1]")

    def copy(self):
        return ArchEncoding(self.depth.copy(), self.kappa.copy())

    def key(self):
        """Hashable identity for caching and de-duplication."""
        return self.depth.tobytes() + self.kappa.tobytes()

    def to_json_dict(self):
        return {
            "depth": [int(b) for b in self.depth],
            "kappa": [[round(float(a), 4), round(float(m), 4)] for a, m in self.kappa],
        }

    @classmethod
    def from_json_dict(cls, obj):
        try:
            depth = np.asarray(obj["depth"], dtype=np.int64)
            kappa = np.asarray(obj["kappa"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed encoding object: {exc}") from None
        if np.any((depth != 0) & (depth != 1)):
            raise InputError("depth entries must be 0 or 1")
        return cls(depth.astype(bool), kappa)

    @classmethod
    def identity(cls, n_layers):
        return cls(np.ones(n_layers, dtype=bool), np.ones((n_layers, 2), dtype=np.float64))


@dataclasses.dataclass
class SaliencyScores:
    """Non-negative channel scores; heads aggregate their channel scores."""

    attn_channel: list   # [L] arrays of shape [H_l * d_head]
    attn_head: list      # [L] arrays of shape [H_l]
    mlp_channel: list    # [L] arrays of shape [d_ff_l]


def compute_saliency(net, stats):
    """Activation-weighted channel scores from collected statistics."""
    attn_channel, attn_head, mlp_channel = [], [], []
    for l, blk in enumerate(net.blocks):
        ac = kernels.abs_colsum(blk.wo.data) * stats.attn_norms(l)
        attn_channel.append(ac)
        attn_head.append(ac.reshape(blk.n_heads, blk.d_head).sum(axis=1))
        mlp_channel.append(kernels.abs_colsum(blk.wdown.data) * stats.mlp_norms(l))
    return SaliencyScores(attn_channel, attn_head, mlp_channel)


def top_indices(scores, k):
    """Indices of the k largest scores; ties resolve to the lowest index.
    Returned sorted ascending."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return np.array(sorted(order[:k]), dtype=np.int64)


@dataclasses.dataclass
class WidthMaskSet:
    """Boolean keep-masks per active block: heads[l] is bool[H_l],
    channels[l] is bool[d_ff_l]; inactive blocks hold None."""

    heads: list
    channels: list


def realize_masks(net, encoding, saliency):
    """Turn retention ratios into concrete keep-masks via saliency ranking."""
    if encoding.n_layers != net.n_layers:
        raise InputError("encoding depth length does not match the network")
    heads, channels = [], []
    for l, blk in enumerate(net.blocks):
        if not encoding.depth[l]:
            heads.append(None)
            channels.append(None)
            continue
        r_attn, r_mlp = encoding.kappa[l]
        kh = retained_heads(r_attn, blk.n_heads)
        hm = np.zeros(blk.n_heads, dtype=bool)
        hm[top_indices(saliency.attn_head[l], kh)] = True
        kc = retained_channels(r_mlp, blk.d_ff, net.config.rounding_multiple)
        cm = np.zeros(blk.d_ff, dtype=bool)
        cm[top_indices(saliency.mlp_channel[l], kc)] = True
        heads.append(hm)
        channels.append(cm)
    return WidthMaskSet(heads, channels)


def masks_to_json(masks):
    out = {}
    for l, (hm, cm) in enumerate(zip(masks.heads, masks.channels)):
        if hm is None:
            continue
        out[str(l)] = {
            "heads": [int(i) for i in np.flatnonzero(hm)],
            "channels": [int(i) for i in np.flatnonzero(cm)],
        }
    return out


class RestoreToken:
    """Receipt for one apply_in_place call; feeds restore()."""

    __slots__ = ("net_id", "saved", "prev_active")

    def __init__(self, net_id, saved, prev_active):
        self.net_id = net_id
        self.saved = saved        # list of (Tensor, original data copy)
        self.prev_active = prev_active

    @property
    def modified_tensor_count(self):
        return len(self.saved)


def zero_masked_slices(net, encoding, masks, snapshot=None):
    """Zero the pruned slices of every active block's weights, in place.

    Pruned head h zeroes rows h*dh:(h+1)*dh of wq and the matching wo
    columns; under MHA the same wk/wv rows go too, under grouped KV they are
    left alone. Pruned MLP channel j zeroes row j of wup/wgate and column j
    of wdown. Does not touch block_active; apply_in_place is the tracked
    entry point, this bare form re-imposes masks during recovery training.
    """
    for l, blk in enumerate(net.blocks):
        if not encoding.depth[l]:
            continue
        hm, cm = masks.heads[l], masks.channels[l]
        dh = blk.d_head
        drop_heads = np.flatnonzero(~hm)
        if drop_heads.size:
            rows = (drop_heads[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
            targets = [blk.wq, blk.wo]
            if blk.n_kv_heads == blk.n_heads:
                targets += [blk.wk, blk.wv]
            if snapshot is not None:
                for t in targets:
                    snapshot(t)
            blk.wq.data[rows, :] = 0
            blk.wo.data[:, rows] = 0
            if blk.n_kv_heads == blk.n_heads:
                blk.wk.data[rows, :] = 0
                blk.wv.data[rows, :] = 0
        drop_ch = np.flatnonzero(~cm)
        if drop_ch.size:
            if snapshot is not None:
                for t in (blk.wup, blk.wgate, blk.wdown):
                    snapshot(t)
            blk.wup.data[drop_ch, :] = 0
            blk.wgate.data[drop_ch, :] = 0
            blk.wdown.data[:, drop_ch] = 0


def apply_in_place(net, encoding, masks):
    """Zero pruned weight slices and deactivate dropped blocks, in place.

    Only tensors that actually change are snapshotted; the returned token
    lets restore() put the exact original bytes back.
    """
    if net.restore_token is not None:
        raise StateError("masks already applied; restore first")
    if encoding.n_layers != net.n_layers:
        raise InputError("encoding depth length does not match the network")
    saved = []
    zero_masked_slices(net, encoding, masks,
                       snapshot=lambda t: saved.append((t, t.data.copy())))
    token = RestoreToken(id(net), saved, net.block_active.copy())
    net.block_active = encoding.depth.copy()
    net.restore_token = token
    return token


def restore(net, token):
    """Undo apply_in_place bit-exactly. The token must be the active one."""
    if net.restore_token is not token:
        raise StateError("token does not match the network's active mask state")
    if token.net_id != id(net):
        raise StateError("token belongs to a different network")
    for tensor, original in token.saved:
        np.copyto(tensor.data, original)
    net.block_active = token.prev_active
    net.restore_token = None
