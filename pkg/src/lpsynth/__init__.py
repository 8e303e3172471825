"""Two-level latent-code program synthesis for string-transformation DSLs.

The pipeline: sample input/output tasks for a small string DSL, train a
discrete-bottleneck sequence model (program autoencoder with an EMA codebook,
a latent-code predictor, and a latent-conditioned program decoder), then
synthesize programs by a two-level beam search -- first over latent codes,
then over program tokens -- keeping the first candidate consistent with the
examples.
"""

__version__ = "0.1.0"
