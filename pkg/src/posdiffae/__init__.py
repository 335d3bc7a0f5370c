"""Position-aware diffusion autoencoder for histology-style patches.

Modules:
    diffusion: noise schedule, forward process and the x0-predicting sampler step.
    networks: semantic encoder, conditional denoiser and position heads.
    geometry: section centroid, radial distance and angle, alignment.
    training: composite loss, training loop and gradient checking.
    restoration: tear inpainting and blind JPEG restoration.
    evaluation: classifiers, regressors and image/feature metrics.
    datagen: synthetic sections, patch extraction and artifact simulation.
    cli: command-line pipelines.
"""

__version__ = "0.1.0"
