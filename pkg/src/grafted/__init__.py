"""Instruction-driven molecular graph editing at desk scale.

Pipeline: mine structurally-similar edit pairs from a SMILES corpus, pretrain
a structure-aware transformer with absorbing-mask graph diffusion, fine-tune
it against chemical property oracles with KL-regularized policy gradients,
and evaluate validity / edit accuracy / descriptor-space Frechet distance.
"""

__version__ = "0.1.0"
