"""Consistency-regularized score diffusion on toy mixtures and a miniature TTS model.

Modules: ``core`` (VE diffusion), ``gmm`` (exact mixture oracle), ``nn``
(numpy MLP denoiser), ``losses`` (DSM/CDM training), ``samplers``, ``tts``,
``drift`` (evaluation harness), ``io`` and ``cli``.
"""

__version__ = "0.1.0"
