"""Few-shot long-tailed birdcall recognition on CPU with numpy.

Modules: ``audio`` (WAV I/O, resampling), ``dsp`` (log-mel frontend),
``augment``, ``dataset``, ``model`` (micro-CNN with SED head), ``train``,
``calibrate``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
