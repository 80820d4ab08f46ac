"""castnet: saliency-constrained momentum-contrast training with
attention-map supervision, plus grounding and background-robustness
evaluation on synthetic scene data."""

__version__ = "0.1.0"
