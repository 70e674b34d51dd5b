"""Desk-scale federated learning simulator: data poisoning attacks
(label flipping, noise superimposition, suppressed-loss GAN generation)
and trace-based defenses, with a reproducible experiment harness."""

__version__ = "0.1.0"
