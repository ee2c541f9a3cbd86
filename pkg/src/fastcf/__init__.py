"""Diffusion-based counterfactual generation and shortcut-learning audits.

Submodules:
    autodiff        float32 tensors with reverse-mode differentiation
    diffusion       noise schedules, respacing, forward/reverse sampling
    models          denoisers, classifiers, trainers, analytic mixture denoiser
    counterfactual  guided generation, gradient strategies, self-optimized masks
    metrics         L1 / MAD / MD / flip ratio / AUROC / Fréchet distance
    shortcut        synthetic dataset, curation, end-to-end audit pipeline
    toybench        two-Gaussian convergence benchmark and plots
    persistence     checkpoints, PGM images, reports, config files
    cli             `fastcf` command-line entry point
"""

__version__ = "0.1.0"
