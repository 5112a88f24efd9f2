"""Desk-scale test-time adaptation for a small autoregressive language model.

Per-prompt adapt-and-reset episodes update low-rank attention adapters by
gradient descent on the prompt's own NLL; a small hypernetwork predicts
per-layer, per-step learning-rate scales and is trained with first-order
meta-gradients against the answer NLL.
"""

__version__ = "0.1.0"
