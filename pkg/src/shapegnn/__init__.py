"""Semi-supervised shape-error prediction on Dixel point graphs with a GCN and an SVR baseline."""

__version__ = "0.1.0"
