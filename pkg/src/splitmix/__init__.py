"""Split learning for tiny vision transformers with masked-token upload,
activation mixing, payload accounting, and a reconstruction-attack harness."""

__version__ = "0.1.0"
