"""Speculative decoding on toy Markov models, with entropy-based early draft stopping."""

from .distributions import AdjustmentSpec, Distribution, adjust, cross_entropy, entropy, kld, residual, tvd
from .engine import CostModel, RunReport, generate_autoregressive, generate_speculative
from .models import DerivedDraftSpec, MarkovModel, derive_draft, random_target
from .sampling import Rng, verify_round
from .stopping import PolicyConfig, should_stop, update_lambda

__version__ = "0.1.0"

__all__ = [
    "AdjustmentSpec", "CostModel", "DerivedDraftSpec", "Distribution", "MarkovModel", "PolicyConfig",
    "Rng", "RunReport", "adjust", "cross_entropy", "derive_draft", "entropy", "generate_autoregressive",
    "generate_speculative", "kld", "random_target", "residual", "should_stop", "tvd", "update_lambda",
    "verify_round",
]
