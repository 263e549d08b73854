"""cromekit Modules Package.

Contains all core components of the multimodal fake-news detector:
- banner: Display banner and version info
- checkpoint: Save and restore model, optimizer and RNG state
- cli: Command-line surface and the ablation suite
- config_loader: Load and manage YAML configuration
- data: Synthetic dataset generator, dataset files and splits
- detector: Ablation toggles, classifier head and losses
- encoders: Toy per-token encoders and the embedding bundle
- errors: Exception hierarchy
- fusion: Cross-modal fusion and the tri-transformer
- layers: Parameterised building blocks (linear, batch norm, attention)
- metric: Proxy anchor loss and the modality schedule
- model: Full model assembly and state handling
- numerics: Reverse-mode autodiff tape, Adam, gradient check, RNG streams
- training: Run configuration, training loop, evaluation, sweep and gradient-check suite
"""

__version__ = "1.0.0"
__all__ = [
    "banner",
    "checkpoint",
    "cli",
    "config_loader",
    "data",
    "detector",
    "encoders",
    "errors",
    "fusion",
    "layers",
    "metric",
    "model",
    "numerics",
    "training",
]
