"""Gender-privacy image perturbation: semi-adversarial autoencoders, their
independent ensembles, the sequentially-stacked variant, and the biometric
evaluation protocol around them."""

__version__ = "0.1.0"
