"""Zero-shot structured pruning search for small decoder transformers.

The package trains a tiny byte-level language model, scores candidate
depth/width prunings with an adapter-gradient agreement proxy instead of
retraining, and searches the encoding space with an evolutionary loop.
"""

from .config import RunConfig, load_run_config
from .errors import (ConfigError, DimensionError, FormatError, InputError,
                     NumericalError, PruneSearchError, StateError)
from .masks import ArchEncoding, apply_in_place, compute_saliency, realize_masks, restore
from .model import (ModelConfig, SuperNetwork, attach_adapters,
                    collect_activation_stats, detach_adapters,
                    init_supernetwork, parameter_count)
from .proxy import (CalibrationBatch, ProxyResult, compute_anchor,
                    compute_trace, evaluate, score)
from .search import SearchConfig, SearchResult, run_search

__version__ = "0.1.0"

__all__ = [
    "ArchEncoding",
    "CalibrationBatch",
    "ConfigError",
    "DimensionError",
    "FormatError",
    "InputError",
    "ModelConfig",
    "NumericalError",
    "ProxyResult",
    "PruneSearchError",
    "RunConfig",
    "SearchConfig",
    "SearchResult",
    "StateError",
    "SuperNetwork",
    "apply_in_place",
    "attach_adapters",
    "collect_activation_stats",
    "compute_anchor",
    "compute_saliency",
    "compute_trace",
    "detach_adapters",
    "evaluate",
    "init_supernetwork",
    "load_run_config",
    "parameter_count",
    "realize_masks",
    "restore",
    "run_search",
    "score",
    "__version__",
]
