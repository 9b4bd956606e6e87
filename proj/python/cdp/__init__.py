"""Causal-attention diffusion policy: Python surface over the C++ core.

The heavy lifting (simulator, model, training, evaluation) lives in the
compiled `_cdp` module; this package re-exports its entry points.
"""

try:  # installed wheel: the extension sits inside the package
    from ._cdp import (
        Policy,
        default_config,
        expert_rollouts,
        generate_demos,
        pretrain_encoder,
        train_policy,
    )
except ImportError:  # in-tree build: _cdp.so on sys.path (e.g. PYTHONPATH=build)
    from _cdp import (
        Policy,
        default_config,
        expert_rollouts,
        generate_demos,
        pretrain_encoder,
        train_policy,
    )

__all__ = [
    "Policy",
    "default_config",
    "expert_rollouts",
    "generate_demos",
    "pretrain_encoder",
    "train_policy",
]
