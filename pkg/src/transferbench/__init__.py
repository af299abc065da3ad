"""Desk-scale benchmark framework for transfer-based adversarial attacks."""

from . import attack, augment, engine, harness, methods, models, rng, training

__all__ = ["attack", "augment", "engine", "harness", "methods", "models",
           "rng", "training"]
__version__ = "0.1.0"
