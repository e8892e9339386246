"""Desk-scale headline generation toolkit.

Pipeline stages: ingest article records, learn a byte-level BPE vocabulary,
pre-train and fine-tune a small decoder-only transformer, decode headlines
with diverse beam search, tune the decoding penalties with Gaussian-process
optimization against BLEU, and score the results with a blinded worksheet
and Fleiss' kappa.
"""

__version__ = "0.1.0"
