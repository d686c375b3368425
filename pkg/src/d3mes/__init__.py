"""Denoising diffusion for small 3D molecules. A patch transformer predicts
the noise; rotation-equivariant attention prepares its coordinate input.

Submodules: ``molgraph`` (molecules, I/O, bonds, hydrogens, hashing),
``encoding`` (three-channel grid, patchify), ``equiattn`` (TFN attention),
``dit`` (the denoiser), ``diffusion`` (schedule, loss, sampler),
``metrics``, ``training``, ``config``, ``checkpoint`` and ``cli``.
"""

__version__ = "0.1.0"
