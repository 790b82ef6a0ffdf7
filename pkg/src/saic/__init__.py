"""SAIC-style speech anonymization: latent-optimization pretraining,
encoder distillation, identity-swap inference, and speaker-ID evaluation."""

__version__ = "0.1.0"
