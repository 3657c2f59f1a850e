"""Two-stream acoustic-to-articulatory inversion.

A speech stream (multi-kernel 1-D convolution bank plus a multi-head
attention encoder) and a phoneme stream (stacked bidirectional LSTM) are
trained jointly to predict electromagnetic-articulography trajectories,
with a leave-one-speaker-out evaluation harness reporting RMSE (mm) and
Pearson correlation.
"""

__version__ = "0.1.0"
