"""Context-smoothed generative control policies.

A small, fully deterministic stack for training flow-matching action-chunk
policies whose conditioning can be smoothed toward the behavioral marginal,
fine-tuning them with a two-headed soft actor-critic that steers both the
sampler's latent and the smoothing level, and checking the smoothing theory
(total-variation bounds, overlap gates, coverage tables) numerically.
"""

__version__ = "0.1.0"
