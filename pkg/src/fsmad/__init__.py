"""Few-shot single-image morphing attack detection on embedding vectors.

Modules:
    core: datasets, manifests, seeding and the synthetic two-domain generator.
    loss: distances, contrastive/triplet losses and online triplet mining.
    model: MLP embedding head, manual backprop, Adam training, checkpoints.
    inference: template selection and averaged-distance scoring.
    metrics: APCER/BPCER, DET sweeps, D-EER and BPCER at fixed APCER.
    protocol: cross-domain experiments and few-shot injection sweeps.
    projection: exact t-SNE and projection CSV export.
    cli: the ``fsmad`` command.
"""

__version__ = "0.1.0"
