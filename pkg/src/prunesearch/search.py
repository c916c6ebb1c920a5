"""Evolutionary search over pruning encodings under a parameter budget.

The population starts as identical copies of a single importance-anchored
encoding: per-block retentions proportional to mean channel saliency, scaled
by bisection to the largest uniform factor that fits the budget. Children
come from contiguous-range depth crossover plus per-entry interpolation
width crossover, then bit-flip depth mutation and multiplicative width
jitter; a deterministic rescale repairs budget violations. Infeasible
candidates score negative infinity. Elites carry over unchanged each
generation and the best candidate ever scored is returned.
"""

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ConfigError
from .masks import ArchEncoding, compute_saliency
from .model import parameter_count
from .proxy import score

NEG_INF = float("-inf")


@dataclasses.dataclass
class SearchConfig:
    budget: int
    population_size: int = 30
    elites: int = 10
    crossover_rate: float = 0.7
    mutation_rate_depth: float = 0.2
    mutation_rate_width: float = 0.2
    iterations: int = 50
    min_depth: int = 1
    kappa_min: float = 0.05
    jitter_sigma: float = 0.1
    seed: int = 0
    workers: int = 1
    init_mode: str = "importance"

    def __post_init__(self):
        if self.population_size < 1:
            raise ConfigError("population_size must be >= 1")
        if not 1 <= self.elites <= self.population_size:
            raise ConfigError("elites must lie in [1, population_size]")
        for name in ("crossover_rate", "mutation_rate_depth", "mutation_rate_width"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0.0 < self.kappa_min <= 1.0:
            raise ConfigError("kappa_min must lie in (0, 1]")
        if self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma must be >= 0")
        if self.budget < 1:
            raise ConfigError("budget must be a positive parameter count")
        if self.min_depth < 1:
            raise ConfigError("min_depth must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.init_mode not in ("importance", "uniform"):
            raise ConfigError("init_mode must be 'importance' or 'uniform'")


@dataclasses.dataclass
class Candidate:
    encoding: ArchEncoding
    params: int
    phi: float
    proxy: object = None


def compute_importance_prior(net, stats):
    """Mean channel saliency per block: the depth-importance signal."""
    sal = compute_saliency(net, stats)
    prior = np.empty(net.n_layers, dtype=np.float64)
    for l in range(net.n_layers):
        total = sal.attn_channel[l].sum() + sal.mlp_channel[l].sum()
        prior[l] = total / (sal.attn_channel[l].size + sal.mlp_channel[l].size)
    return prior


def anchor_encoding(net, prior, cfg):
    """All blocks active; retentions beta * normalized prior, with the
    largest beta (bisection) whose parameter count fits the budget."""
    l = net.n_layers
    identity = ArchEncoding.identity(l)
    if parameter_count(net, identity) <= cfg.budget:
        return identity
    if cfg.init_mode == "uniform" or prior.max() <= 0.0:
        norm = np.ones(l, dtype=np.float64)
    else:
        norm = prior / prior.max()

    def at(beta):
        kappa = np.clip(beta * norm, cfg.kappa_min, 1.0)
        return ArchEncoding(np.ones(l, dtype=bool), np.stack([kappa, kappa], axis=1))

    if parameter_count(net, at(0.0)) > cfg.budget:
        raise ConfigError("budget below the smallest representable architecture")
    lo, hi = 0.0, 1.0 / norm[norm > 0].min()
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if parameter_count(net, at(mid)) <= cfg.budget:
            lo = mid
        else:
            hi = mid
    return at(lo)


def init_population(net, prior, cfg):
    """population_size copies of the anchor: iteration one has zero variance."""
    anchor = anchor_encoding(net, prior, cfg)
    return [anchor.copy() for _ in range(cfg.population_size)]


def crossover_depth(a, b, rng):
    """Copy a contiguous block range [i, j] from b into a copy of a; the
    pair (i, j), i <= j, is uniform over all such pairs."""
    l = a.shape[0]
    m = int(rng.integers(l * (l + 1) // 2))
    for i in range(l):
        row = l - i
        if m < row:
            j = i + m
            break
        m -= row
    child = a.copy()
    child[i: j + 1] = b[i: j + 1]
    return child


def crossover_width(a, b, rng, kappa_min):
    """Per-entry interpolation with independent uniform coefficients."""
    alpha = rng.random(a.shape)
    return np.clip(alpha * a + (1.0 - alpha) * b, kappa_min, 1.0)


def mutate_depth(depth, rate, rng):
    """Independent bit flips at the given rate."""
    return depth ^ (rng.random(depth.shape[0]) < rate)


def mutate_width(kappa, rate, sigma, rng, kappa_min):
    """Multiplicative Gaussian jitter on a rate-chosen subset of entries.

    Draws are consumed for every entry regardless of selection so the rng
    stream does not depend on the selection outcome.
    """
    selected = rng.random(kappa.shape) < rate
    eps = rng.normal(0.0, sigma, size=kappa.shape) if sigma > 0 else np.zeros(kappa.shape)
    return np.clip(np.where(selected, kappa * (1.0 + eps), kappa), kappa_min, 1.0)


def repair_min_depth(depth, prior, min_depth):
    """Reactivate highest-importance inactive blocks until min_depth holds."""
    depth = depth.copy()
    while depth.sum() < min_depth:
        inactive = np.flatnonzero(~depth)
        best = inactive[np.argmax(prior[inactive])]  # argmax ties -> lowest index
        depth[best] = True
    return depth


def repair_budget(encoding, net, cfg):
    """Rescale retentions by the largest gamma <= 1 that fits the budget.

    Depth is untouched. If even gamma = 0 (all retentions at kappa_min)
    overshoots, the encoding is returned unchanged and will be penalized.
    """
    if parameter_count(net, encoding) <= cfg.budget:
        return encoding

    def at(gamma):
        return ArchEncoding(encoding.depth, np.clip(gamma * encoding.kappa, cfg.kappa_min, 1.0))

    if parameter_count(net, at(0.0)) > cfg.budget:
        return encoding
    lo, hi = 0.0, 1.0
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        if parameter_count(net, at(mid)) <= cfg.budget:
            lo = mid
        else:
            hi = mid
    return at(lo)


def make_child(elite_encodings, rng, net, prior, cfg):
    k = len(elite_encodings)
    if rng.random() < cfg.crossover_rate:
        pa = elite_encodings[int(rng.integers(k))]
        pb = elite_encodings[int(rng.integers(k))]
        depth = crossover_depth(pa.depth, pb.depth, rng)
        kappa = crossover_width(pa.kappa, pb.kappa, rng, cfg.kappa_min)
        child = ArchEncoding(depth, kappa)
    else:
        child = elite_encodings[int(rng.integers(k))].copy()
    child.depth = mutate_depth(child.depth, cfg.mutation_rate_depth, rng)
    child.depth = repair_min_depth(child.depth, prior, cfg.min_depth)
    child.kappa = mutate_width(child.kappa, cfg.mutation_rate_width, cfg.jitter_sigma,
                               rng, cfg.kappa_min)
    return repair_budget(child, net, cfg)


def sample_random_encoding(rng, net, prior, cfg, active_prob=0.75, max_tries=200):
    """Random feasible encoding: used to build validation pools.

    Depth patterns whose cheapest realization overshoots the budget are
    resampled; only a budget below every realizable architecture raises.
    """
    l = net.n_layers
    for _ in range(max_tries):
        depth = repair_min_depth(rng.random(l) < active_prob, prior, cfg.min_depth)
        kappa = rng.uniform(cfg.kappa_min, 1.0, size=(l, 2))
        enc = repair_budget(ArchEncoding(depth, kappa), net, cfg)
        if parameter_count(net, enc) <= cfg.budget:
            return enc
    raise ConfigError("budget admits no feasible encoding at this depth floor")


def _score_one(net, encoding, saliency, calib, anchor, cfg):
    params = parameter_count(net, encoding)
    if params > cfg.budget:
        return Candidate(encoding, params, NEG_INF, None)
    result = score(net, encoding, saliency, calib, anchor)
    return Candidate(encoding, params, result.phi, result)


def _score_population(replicas, population, saliency, calib, anchor, cfg, cache):
    results = [None] * len(population)
    misses = []
    for i, enc in enumerate(population):
        hit = cache.get(enc.key())
        if hit is not None:
            results[i] = Candidate(enc, hit.params, hit.phi, hit.proxy)
        else:
            misses.append(i)
    if misses:
        def run_chunk(worker, chunk):
            net = replicas[worker]
            return [_score_one(net, population[i], saliency, calib, anchor, cfg) for i in chunk]

        n_workers = min(cfg.workers, len(misses))
        chunks = [misses[w::n_workers] for w in range(n_workers)]
        if n_workers == 1:
            outs = [run_chunk(0, chunks[0])]
        else:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                futures = [pool.submit(run_chunk, w, chunks[w]) for w in range(n_workers)]
                outs = [f.result() for f in futures]
        for chunk, out in zip(chunks, outs):
            for i, cand in zip(chunk, out):
                results[i] = cand
                cache[population[i].key()] = cand
    return results


@dataclasses.dataclass
class SearchResult:
    best: Candidate
    history: list      # best-so-far phi after each iteration
    records: list      # one dict per scored candidate per iteration


def run_search(net, saliency, prior, calib, anchor, cfg, log_path=None):
    """Run the generational loop; returns the best candidate ever scored.

    With identical seeds and configs the result is bit-for-bit reproducible
    regardless of the worker count: the rng lives in the main thread and
    scoring is a pure function evaluated on identical replicas.
    """
    rng = np.random.default_rng(cfg.seed)
    replicas = [net] + [net.clone() for _ in range(cfg.workers - 1)]
    cache = {}
    records = []
    history = []
    best = None
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        population = init_population(net, prior, cfg)

        def note(iteration, index, cand, elapsed):
            rec = {
                "iteration": iteration,
                "candidate": index,
                "phi": None if cand.phi == NEG_INF else cand.phi,
                "feasible": cand.phi != NEG_INF,
                "params": cand.params,
                "active_blocks": int(cand.encoding.depth.sum()),
                "encoding": cand.encoding.to_json_dict(),
                "wall_time_s": elapsed,
            }
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

        if cfg.iterations == 0:
            t0 = time.monotonic()
            scored = _score_population(replicas, population[:1], saliency, calib,
                                       anchor, cfg, cache)
            note(0, 0, scored[0], time.monotonic() - t0)
            best = scored[0]
            history.append(best.phi)
            return SearchResult(best, history, records)

        for iteration in range(1, cfg.iterations + 1):
            t0 = time.monotonic()
            scored = _score_population(replicas, population, saliency, calib,
                                       anchor, cfg, cache)
            elapsed = time.monotonic() - t0
            for i, cand in enumerate(scored):
                note(iteration, i, cand, elapsed)
                if best is None or cand.phi > best.phi:
                    best = cand
            history.append(best.phi)
            if iteration == cfg.iterations:
                break
            # stable descending sort: ties and -inf keep index order, last
            order = sorted(range(len(scored)), key=lambda i: scored[i].phi, reverse=True)
            elite_encodings = [scored[i].encoding for i in order[: cfg.elites]]
            population = [e.copy() for e in elite_encodings]
            while len(population) < cfg.population_size:
                population.append(make_child(elite_encodings, rng, net, prior, cfg))
        return SearchResult(best, history, records)
    finally:
        if log_fh:
            log_fh.close()


def summary_json(result, cfg):
    return {
        "best": result.best.encoding.to_json_dict(),
        "phi": result.best.phi,
        "params": result.best.params,
        "iterations": len(result.history),
        "budget": cfg.budget,
        "seed": cfg.seed,
    }
