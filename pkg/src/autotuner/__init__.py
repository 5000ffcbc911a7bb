"""Score-informed automatic pitch correction for singing voice.

Modules: ``audio`` (WAV I/O, resampling), ``spectral`` (CQT, phase vocoder),
``pitch`` (monophonic f0 tracking), ``align`` (score/performance DTW),
``dataset`` (synthetic corpus, de-tuning, features, cache), ``neuralnet``
(autodiff, layers, Adam), ``model`` (the convolutional-GRU regressor) and
``cli``.
"""

__version__ = "0.1.0"
