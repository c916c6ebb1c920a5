"""Decoder-only byte-level transformer used as the pruning supernetwork.

Pre-norm blocks with RMSNorm, rotary attention (grouped KV supported) and a
SiLU-gated MLP; the unembedding is tied to the input table. Each block keeps
its own head/channel dimensions so sliced checkpoints load back naturally.
Low-rank adapters can be attached to every projection; while attached the
base weights are frozen and only adapter gradients are computed.
"""

import dataclasses

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, InputError, StateError

ATTN_PROJS = ("wq", "wk", "wv", "wo")
MLP_PROJS = ("wup", "wgate", "wdown")
ALL_PROJS = ATTN_PROJS + MLP_PROJS

INIT_STD = 0.02
ADAPTER_STD = 0.01
RMS_EPS = 1e-6


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    n_kv_heads: int = 4
    d_head: int = 32
    d_ff: int = 256
    vocab_size: int = 256
    context_length: int = 128
    rounding_multiple: int = 4

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_head",
                     "d_ff", "vocab_size", "context_length", "rounding_multiple"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError("d_model must equal n_heads * d_head")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError("n_heads must be divisible by n_kv_heads")
        if self.d_head % 2:
            raise ConfigError("d_head must be even for rotary encoding")
        if self.d_ff % self.rounding_multiple:
            raise ConfigError("d_ff must be a multiple of rounding_multiple")
        if self.context_length < 2:
            raise ConfigError("context_length must be >= 2")


class Block:
    """One transformer block. Projection shapes may be per-block (sliced)."""

    __slots__ = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "wup", "wgate",
                 "wdown", "n_heads", "n_kv_heads", "d_head", "d_ff")

    def __init__(self, tensors, d_head):
        self.attn_norm = tensors["attn_norm"]
        self.mlp_norm = tensors["mlp_norm"]
        for name in ALL_PROJS:
            setattr(self, name, tensors[name])
        self.d_head = d_head
        if self.wq.shape[0] % d_head or self.wk.shape[0] % d_head:
            raise DimensionError("projection rows must be a multiple of d_head")
        self.n_heads = self.wq.shape[0] // d_head
        self.n_kv_heads = self.wk.shape[0] // d_head
        self.d_ff = self.wup.shape[0]
        if self.wk.shape != self.wv.shape:
            raise DimensionError("wk and wv must have identical shapes")
        if self.wo.shape[1] != self.wq.shape[0]:
            raise DimensionError("wo columns must match wq rows")
        if self.wdown.shape[1] != self.d_ff or self.wgate.shape[0] != self.d_ff:
            raise DimensionError("MLP projection shapes disagree on d_ff")
        if self.n_heads % self.n_kv_heads:
            raise DimensionError("block heads not divisible by kv heads")

    def projections(self):
        for name in ALL_PROJS:
            yield name, getattr(self, name)


class SuperNetwork:
    """The dense base model plus per-block activity flags and optional adapters."""

    def __init__(self, config, embeddings, final_norm, blocks):
        self.config = config
        self.embeddings = embeddings
        self.final_norm = final_norm
        self.blocks = blocks
        self.block_active = np.ones(len(blocks), dtype=bool)
        self.adapters = None
        self.adapter_rank = None
        self.adapter_seed = None
        self.restore_token = None
        self._rope_cache = {}

    @property
    def dtype(self):
        return self.embeddings.data.dtype

    @property
    def n_layers(self):
        return len(self.blocks)

    def named_tensors(self):
        """Canonical (name, Tensor) order used by checkpoints."""
        yield "embeddings", self.embeddings
        yield "final_norm", self.final_norm
        for l, b in enumerate(self.blocks):
            yield f"block{l}.attn.norm", b.attn_norm
            for name in ATTN_PROJS:
                yield f"block{l}.attn.{name}", getattr(b, name)
            yield f"block{l}.mlp.norm", b.mlp_norm
            for name in MLP_PROJS:
                yield f"block{l}.mlp.{name}", getattr(b, name)

    def base_tensors(self):
        for _, t in self.named_tensors():
            yield t

    def adapter_tensors(self):
        """Adapter (A, B) tensors in canonical block/projection order."""
        if self.adapters is None:
            return
        for per_block in self.adapters:
            for name in ALL_PROJS:
                a, b = per_block[name]
                yield a
                yield b

    def zero_adapter_grads(self):
        ad.zero_grads(self.adapter_tensors())

    def _rope_tables(self, t, d_head):
        key = (t, d_head)
        if key not in self._rope_cache:
            half = d_head // 2
            inv_freq = 10000.0 ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
            ang = np.arange(t, dtype=np.float64)[:, None] * inv_freq[None, :]
            self._rope_cache[key] = (np.cos(ang).astype(self.dtype), np.sin(ang).astype(self.dtype))
        return self._rope_cache[key]

    def _adapted(self, tape, x, w, pair):
        y = ad.linear(tape, x, w)
        if pair is not None:
            a, b = pair
            y = ad.add(tape, y, ad.linear(tape, ad.linear(tape, x, a), b))
        return y

    def forward(self, tokens, with_adapters=False, stats=None):
        """Run the network on integer tokens [N, T]; returns (tape, logits).

        Inactive blocks are skipped, which is exactly the residual bypass.
        When stats is given, squared activations entering wo and wdown are
        accumulated per channel.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise InputError("tokens must be a 2-D integer array [batch, time]")
        t = tokens.shape[1]
        if t > self.config.context_length:
            raise InputError(f"sequence length {t} exceeds context_length {self.config.context_length}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise InputError("token ids out of vocabulary range")
        if with_adapters and self.adapters is None:
            raise StateError("forward(with_adapters=True) requires attached adapters")

        tape = ad.ComputationTape()
        x = ad.embed(tape, self.embeddings, tokens)
        for l, blk in enumerate(self.blocks):
            if not self.block_active[l]:
                continue
            pairs = self.adapters[l] if (with_adapters and self.adapters) else {}
            h = ad.rmsnorm_rows(tape, x, blk.attn_norm, RMS_EPS)
            q = self._adapted(tape, h, blk.wq, pairs.get("wq"))
            k = self._adapted(tape, h, blk.wk, pairs.get("wk"))
            v = self._adapted(tape, h, blk.wv, pairs.get("wv"))
            qh = ad.split_heads(tape, q, blk.n_heads)
            kh = ad.split_heads(tape, k, blk.n_kv_heads)
            vh = ad.split_heads(tape, v, blk.n_kv_heads)
            cos, sin = self._rope_tables(t, blk.d_head)
            qh = ad.rope(tape, qh, cos, sin)
            kh = ad.rope(tape, kh, cos, sin)
            ctx = ad.causal_attention(tape, qh, kh, vh)
            ctxm = ad.merge_heads(tape, ctx)
            if stats is not None:
                stats.add_attn(l, ctxm.data)
            x = ad.add(tape, x, self._adapted(tape, ctxm, blk.wo, pairs.get("wo")))
            h2 = ad.rmsnorm_rows(tape, x, blk.mlp_norm, RMS_EPS)
            gate = ad.silu(tape, self._adapted(tape, h2, blk.wgate, pairs.get("wgate")))
            up = self._adapted(tape, h2, blk.wup, pairs.get("wup"))
            hidden = ad.mul(tape, gate, up)
            if stats is not None:
                stats.add_mlp(l, hidden.data)
            x = ad.add(tape, x, self._adapted(tape, hidden, blk.wdown, pairs.get("wdown")))
        xf = ad.rmsnorm_rows(tape, x, self.final_norm, RMS_EPS)
        logits = ad.linear(tape, xf, self.embeddings)
        if stats is not None:
            stats.rows += tokens.shape[0] * t
        return tape, logits

    def set_base_trainable(self, flag):
        for t in self.base_tensors():
            t.requires_grad = flag

    def clone(self):
        """Independent deep copy sharing nothing mutable with the original."""
        tensors = {}
        for name, t in self.named_tensors():
            c = ad.Tensor(t.data.copy(), requires_grad=t.requires_grad)
            tensors[name] = c
        blocks = []
        for l in range(self.n_layers):
            blk = {
                "attn_norm": tensors[f"block{l}.attn.norm"],
                "mlp_norm": tensors[f"block{l}.mlp.norm"],
            }
            for name in ATTN_PROJS:
                blk[name] = tensors[f"block{l}.attn.{name}"]
            for name in MLP_PROJS:
                blk[name] = tensors[f"block{l}.mlp.{name}"]
            blocks.append(Block(blk, self.blocks[l].d_head))
        out = SuperNetwork(self.config, tensors["embeddings"], tensors["final_norm"], blocks)
        out.block_active = self.block_active.copy()
        if self.adapters is not None:
            out.adapters = [
                {
                    name: (ad.Tensor(a.data.copy(), requires_grad=True),
                           ad.Tensor(b.data.copy(), requires_grad=True))
                    for name, (a, b) in per_block.items()
                }
                for per_block in self.adapters
            ]
            out.adapter_rank = self.adapter_rank
            out.adapter_seed = self.adapter_seed
        return out


def init_supernetwork(config, seed, dtype=np.float32):
    """Gaussian-initialized dense network (std 0.02, unit norm gains)."""
    rng = np.random.default_rng(seed)

    def gauss(*shape):
        return ad.Tensor((rng.standard_normal(shape) * INIT_STD).astype(dtype), requires_grad=True)

    def ones(n):
        return ad.Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    d, dh = config.d_model, config.d_head
    kv_rows = config.n_kv_heads * dh
    embeddings = gauss(config.vocab_size, d)
    final_norm = ones(d)
    blocks = []
    for _ in range(config.n_layers):
        tensors = {
            "attn_norm": ones(d),
            "wq": gauss(config.n_heads * dh, d),
            "wk": gauss(kv_rows, d),
            "wv": gauss(kv_rows, d),
            "wo": gauss(d, config.n_heads * dh),
            "mlp_norm": ones(d),
            "wup": gauss(config.d_ff, d),
            "wgate": gauss(config.d_ff, d),
            "wdown": gauss(d, config.d_ff),
        }
        blocks.append(Block(tensors, dh))
    return SuperNetwork(config, embeddings, final_norm, blocks)


def attach_adapters(net, rank, seed):
    """Add rank-r adapters (B @ (A @ x), both Gaussian std 0.01) to every
    projection of every block and freeze the base weights."""
    if net.adapters is not None:
        raise StateError("adapters already attached")
    if rank < 1:
        raise InputError("adapter rank must be >= 1")
    rng = np.random.default_rng(seed)
    adapters = []
    for blk in net.blocks:
        per_block = {}
        for name, w in blk.projections():
            d_out, d_in = w.shape
            a = ad.Tensor((rng.standard_normal((rank, d_in)) * ADAPTER_STD).astype(net.dtype),
                          requires_grad=True)
            b = ad.Tensor((rng.standard_normal((d_out, rank)) * ADAPTER_STD).astype(net.dtype),
                          requires_grad=True)
            per_block[name] = (a, b)
        adapters.append(per_block)
    net.adapters = adapters
    net.adapter_rank = rank
    net.adapter_seed = seed
    net.set_base_trainable(False)
    return net


def detach_adapters(net):
    if net.adapters is None:
        raise StateError("no adapters attached")
    net.adapters = None
    net.adapter_rank = None
    net.adapter_seed = None
    net.set_base_trainable(True)


class ActivationStats:
    """Per-channel squared-activation sums at the wo and wdown inputs."""

    def __init__(self, net):
        self.attn_sq = [np.zeros(b.n_heads * b.d_head, dtype=np.float64) for b in net.blocks]
        self.mlp_sq = [np.zeros(b.d_ff, dtype=np.float64) for b in net.blocks]
        self.rows = 0

    def add_attn(self, l, x):
        from . import kernels
        self.attn_sq[l] += kernels.sq_colsum(x.reshape(-1, x.shape[-1]))

    def add_mlp(self, l, x):
        from . import kernels
        self.mlp_sq[l] += kernels.sq_colsum(x.reshape(-1, x.shape[-1]))

    def attn_norms(self, l):
        """Channel l2 norms over all accumulated tokens."""
        return np.sqrt(self.attn_sq[l])

    def mlp_norms(self, l):
        return np.sqrt(self.mlp_sq[l])


def collect_activation_stats(net, tokens):
    """Forward the calibration batch (no adapters) and collect channel norms.

    The network must be pristine: no masks applied, all blocks active.
    """
    if net.restore_token is not None:
        raise StateError("activation stats require an unmasked network")
    if not net.block_active.all():
        raise StateError("activation stats require all blocks active")
    stats = ActivationStats(net)
    net.forward(tokens, with_adapters=False, stats=stats)
    return stats


def round_half_up(x):
    return int(np.floor(x + 0.5))


def retained_heads(r, n_heads):
    """Heads kept at retention r: round half up, floor of one head."""
    return max(1, min(n_heads, round_half_up(r * n_heads)))


def retained_channels(r, d_ff, multiple):
    """Channels kept at retention r, a positive multiple of the rounding unit."""
    return max(multiple, min(d_ff, multiple * round_half_up(r * d_ff / multiple)))


def parameter_count(net, encoding):
    """Parameters of the realized candidate, adapters excluded.

    Counts exactly what mask realization keeps: per active block, retained
    head slices of wq/wo (and wk/wv under MHA), retained MLP channels, and
    both norm gains. Dropped blocks contribute nothing. The tied embedding
    table and the final norm are always present.
    """
    cfg = net.config
    d = cfg.d_model
    total = cfg.vocab_size * d + d
    for l, blk in enumerate(net.blocks):
        if not encoding.depth[l]:
            continue
        r_attn, r_mlp = encoding.kappa[l]
        a = retained_heads(r_attn, blk.n_heads)
        kv = a if blk.n_kv_heads == blk.n_heads else blk.n_kv_heads
        c = retained_channels(r_mlp, blk.d_ff, cfg.rounding_multiple)
        total += 2 * d
        total += a * blk.d_head * d          # wq rows
        total += 2 * kv * blk.d_head * d     # wk, wv rows
        total += d * a * blk.d_head          # wo columns
        total += 2 * c * d                   # wup, wgate rows
        total += d * c                       # wdown columns
    return int(total)
