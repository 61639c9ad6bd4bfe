"""Binary masks over frozen pretrained transformer weights, trained with a straight-through estimator."""
__version__ = "0.1.0"
