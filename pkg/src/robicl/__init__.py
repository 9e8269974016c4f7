"""Adversarially pretrained single-layer linear transformers for robust
in-context binary classification."""

__version__ = "0.1.0"

from .model import (MaskedGram, PromptMatrix, ReducedParams, ShapeError,
                    TransformerParams, adversarial_context, build_prompt,
                    masked_gram, optimal_attack, predict, reduced_predict,
                    robust_margin)
from .theory import (EpsilonThresholds, Regime, baseline_predict,
                     brute_force_optimum, closed_form_params,
                     epsilon_thresholds, map_to_params, rs_coefficients, score)

__all__ = [
    "MaskedGram", "PromptMatrix", "ReducedParams", "ShapeError",
    "TransformerParams", "adversarial_context", "build_prompt", "masked_gram",
    "optimal_attack", "predict", "reduced_predict", "robust_margin",
    "EpsilonThresholds", "Regime", "baseline_predict", "brute_force_optimum",
    "closed_form_params", "epsilon_thresholds", "map_to_params",
    "rs_coefficients", "score", "__version__",
]
