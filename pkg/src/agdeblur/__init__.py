"""Off-resonance blur simulation and correction for spiral real-time MRI.

Submodules:
  tensors   - SPDB file container, complex/channel views, deterministic Rng
  spiral    - spiral k-space trajectory generation with per-sample timing
  encoder   - discrete-object forward model, adjoint, CG recon, field maps
  classical - multi-frequency interpolation and iterative-recon baselines
  nn        - from-scratch conv layers, attention gates, loss, Adam
  training  - training loop, normalization, checkpoints
  quality   - PSNR / SSIM / HFEN metrics and reports
  datagen   - synthetic phantoms and dataset synthesis
  cli       - the `agdeblur` command-line tool
"""

__version__ = "0.1.0"
