"""Desk-scale multitask speech-to-text translation with pre-trained word
embeddings as the intermediate representation.

Subpackages: autodiff (reverse-mode tape), embeddings (.vec tables),
model (pyramidal encoder + dual-attention decoders, four objective
variants), training (Adadelta + scheduled sampling + BLEU selection),
analysis (spectral similarity, Procrustes/CSLS, hubness), metrics
(BLEU/WER), data (synthetic corpus + BPE), cli (batch commands).
"""

__version__ = "0.1.0"
