"""Structure discovery for latent hierarchical causal models.

Graph representation and d-separation ranks, a synthetic data generator,
a statistical rank oracle, the layer-by-layer recovery algorithm and a
differentiable learner.
"""
__version__ = "0.1.0"
