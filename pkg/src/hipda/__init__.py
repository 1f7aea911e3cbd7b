"""Unsupervised domain adaptation for tabular hip-fracture risk prediction.

Submodules:
    stats       shared numerics (seeded RNG streams, t CDF, median, covariance)
    cohort      cohort ingestion, harmonization, splitting and batching
    synth       synthetic cohort generator parameterized by published marginals
    network     feature extractor / classifier / discriminator with exact gradients
    losses      task, MMD, CORAL and domain losses plus their gradients
    trainer     AdamW training loop with alignment terms and early stopping
    selection   outcome-free hyperparameter selection
    evaluation  metrics, paired t-test and the ablation harness
    cli         command-line entry point
"""

__version__ = "0.1.0"
