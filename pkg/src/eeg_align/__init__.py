"""Contrastive alignment of EEG epochs to image feature banks.

Submodules
----------
eeg_core      EEGPack I/O, preprocessing and noise normalization
sampling      per-epoch trial schedules (IDES and repeat averaging)
feature_bank  FeatBank I/O and bank construction
encoder       EEG encoders and checkpoints
trainer       contrastive training loop
eval_stats    retrieval metrics and paired statistics
synthlab      synthetic participants with known signal-to-noise
experiments   JSON experiment grids
cli           ``eeg-align`` command line
"""

__version__ = "0.1.0"
