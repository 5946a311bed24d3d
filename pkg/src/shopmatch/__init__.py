"""shopmatch: match query vectors against a frozen catalogue of article
feature vectors with a trainable encoder and a non-linear scoring head."""

__version__ = "0.1.0"
