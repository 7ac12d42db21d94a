"""Graph prompt-learning lab: learnable kNN prompt topology fused into frozen
pretrained graph encoders, with self-supervised pretraining, baselines,
ablations, an equivalence-theorem verifier and a few-shot evaluation harness.
"""

from . import autodiff, graphs, harness, hyperparams, pretrain, prompt, theory

__all__ = ["autodiff", "graphs", "harness", "hyperparams", "pretrain", "prompt", "theory"]
__version__ = "0.1.0"
