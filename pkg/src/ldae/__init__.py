"""ldae: a latent denoising autoencoder pipeline at desk scale.

Corrupt images by adding Gaussian noise in a patch-wise linear latent space
(PCA by default), train a small time-conditioned transformer to undo the
corruption, and measure what the encoder learned with a linear probe. The
package also carries the surrounding experiment ladder: noise-schedule
variants, prediction-target variants, tokenizer variants, and an experiment
harness that runs hermetically on a synthetic dataset.
"""

__version__ = "0.1.0"
