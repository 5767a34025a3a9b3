"""Continuous-time Bayesian networks with fast/slow model reduction."""
from .model import (
    FAST,
    SLOW,
    ComponentSpec,
    CtbnModel,
    builtin_model,
    decode_state,
    encode_state,
    load_model,
    restrict_fast_slow,
    restrict_to_parents,
    save_model,
    validate,
)
from .dynamics import (
    amalgamate,
    equilibration_rate,
    is_ergodic,
    solve_master,
    split_fast_slow,
    stationary_distribution,
)
from .reduction import effective_joint_generator, reduce_ctbn

__version__ = "0.1.0"
