"""Counterfactual-direction search over a conditional style generator.

The package bundles a synthetic chest-phantom benchmark, a minimal dense
network kernel with handwritten gradients, a conditional style generator /
encoder / classifier stack, closed-form factorization of the generator's
style space, and the two greedy counterfactual search algorithms
(eigenfind over factored directions, attfind over raw style channels).
"""

__version__ = "0.1.0"
