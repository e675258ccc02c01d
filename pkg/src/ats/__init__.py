"""Agent behavior simulation stack.

Subpackages and modules:

- ``geometry``: SE(3) / dual-quaternion math, skinning weights, blend skinning.
- ``worldstate``: scene feature volumes, agent/observer tracks, trajectory
  windows, ego-frame transforms, on-disk formats.
- ``nn``: minimal numpy autodiff kernel (dense / conv / norm layers, AdamW).
- ``diffusion``: noise schedules, denoising objective, score networks,
  classifier-free guidance, deterministic sampler.
- ``behavior``: perception encoders and the hierarchical goal -> path -> pose
  generator, rollout chaining, ablation variants.
- ``synthworld``: synthetic scenes, scripted observer/agent simulation,
  closed-form behavior oracle, corpus generation.
- ``evalsuite``: minDE/minADE metrics, baselines, benchmark harness.
- ``simserver``: CLI and the live session service.
"""

__version__ = "0.1.0"
