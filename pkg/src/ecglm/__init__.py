"""ECG tokenization and small-scale language modeling.

The package turns 12-lead ECG waveforms into discrete symbolic tokens via a
lead-wise convolutional encoder and fixed-scale quantization, pretrains a
small decoder-only transformer on those tokens, instruction-tunes it with
low-rank adapters for question answering and report generation, and
evaluates with exact-match and text-generation metrics.
"""

__version__ = "0.1.0"
