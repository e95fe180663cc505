"""Semi-supervised hierarchical open-set classification on feature vectors.

Submodules:
    hierarchy  rooted class tree, depth spaces, target distributions
    datagen    synthetic data generation and the binary feature format
    heads      depth-specific MLPs with explicit backprop, SGD, EMA teacher
    prohoc     fusion of depth outputs into one node distribution
    spl        subtree pseudo-labels, assignment log, age-gating
    trainer    training loops, checkpoints, metrics CSV
    metrics    evaluation scores and diagnostics
    oracles    independent brute-force checkers
    benchmark  the reference synthetic benchmark
    cli        command-line interface
"""

__version__ = "0.1.0"
