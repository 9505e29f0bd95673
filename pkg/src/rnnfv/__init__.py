"""RNN Fisher vectors: order-aware fixed-size encodings of vector sequences,
with mean-pooling and GMM Fisher vector baselines, SVM classification and
CCA-based cross-modal retrieval."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DivergenceError, RnnFvError  # noqa: E402
from .fv import (FimDiagonal, FisherVector, GmmModel, NormalizationConfig, concat_fuse,  # noqa: E402
                 fim_estimate, fim_normalize, gmm_fit, gmm_fv, l2_normalize, mean_pool, normalize,
                 power_normalize, rnn_fv, subsample_coordinates)
from .rnn import (EmbeddingTable, FeatureSequence, RnnArchitecture, RnnModel, SymbolSequence,  # noqa: E402
                  TrainConfig, nll_classification, nll_regression, rnn_backprop, rnn_forward, rnn_init,
                  rnn_train)
