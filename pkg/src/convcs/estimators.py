"""scikit-learn style estimators wrapping the functional solvers.

These follow the fit/transform/predict and get_params conventions so the
solvers compose with pipelines, grid search and model selection from the
wider ecosystem. Heavy lifting stays in the functional modules; the
estimators validate inputs, hold configuration as constructor parameters,
and store fitted state in trailing-underscore attributes.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._util import as_image_stack
from .csrecon import reconstruct_insitu, reconstruct_prelearned
from .dictionary_learning import SolverConfig, sparse_code, train_dictionary
from .softmax import accuracy, predict_labels, softmax_predict, softmax_train


def _config_from(est, **overrides):
    fields = {name: getattr(est, name) for name in SolverConfig.__dataclass_fields__}
    fields.update(overrides)
    return SolverConfig(**fields)


class _SolverParamsMixin:
    """Constructor parameters mirroring SolverConfig, one attribute each."""

    def _init_solver_params(self, beta, eta0, eta_max, eta_growth, max_outer,
                            rel_tol, cg_tol, cg_max_iter, sparsity_target,
                            seed, feature_init, renormalize_atoms, threads,
                            batch_size):
        self.beta = beta
        self.eta0 = eta0
        self.eta_max = eta_max
        self.eta_growth = eta_growth
        self.max_outer = max_outer
        self.rel_tol = rel_tol
        self.cg_tol = cg_tol
        self.cg_max_iter = cg_max_iter
        self.sparsity_target = sparsity_target
        self.seed = seed
        self.feature_init = feature_init
        self.renormalize_atoms = renormalize_atoms
        self.threads = threads
        self.batch_size = batch_size


class ConvDictionaryLearner(TransformerMixin, _SolverParamsMixin, BaseEstimator):
    """Learns a convolutional dictionary; transform returns sparse features.

    fit(X) expects an (N, H, W) or (N, H, W, C) image stack and learns
    `dictionary_`. transform(X) sparse-codes images against the frozen
    dictionary and returns flattened feature planes, (N, K*Hf*Wf).
    """

    def __init__(self, n_atoms=16, kernel_size=7, beta=1e-7, eta0=1e-3,
                 eta_max=5.0, eta_growth=1.1, max_outer=200, rel_tol=1e-5,
                 cg_tol=1e-6, cg_max_iter=200, sparsity_target=0.05, seed=0,
                 feature_init="auto", renormalize_atoms=False, threads=1,
                 batch_size=500):
        self.n_atoms = n_atoms
        self.kernel_size = kernel_size
        self._init_solver_params(beta, eta0, eta_max, eta_growth, max_outer,
                                 rel_tol, cg_tol, cg_max_iter, sparsity_target,
                                 seed, feature_init, renormalize_atoms,
                                 threads, batch_size)

    def fit(self, X, y=None):
        images = as_image_stack(X)
        result = train_dictionary(images, self.n_atoms, self.kernel_size,
                                  _config_from(self))
        self.dictionary_ = result.dictionary
        self.train_result_ = result
        self.n_features_out_ = int(np.prod(result.features.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "dictionary_")
        images = as_image_stack(X)
        result = sparse_code(self.dictionary_, images, _config_from(self))
        return result.features.reshape(len(images), -1)


class CompressiveReconstructor(_SolverParamsMixin, BaseEstimator):
    """Recovers images from MeasurementSet objects.

    With `dictionary` given, fit is a validation no-op and transform runs
    the pre-learned reconstruction. Without it, fit learns the dictionary
    in situ from the fitted measurements (stored as `dictionary_`), and
    transform reuses it.
    """

    def __init__(self, dictionary=None, n_atoms=16, kernel_size=7, beta=1e-7,
                 eta0=1e-3, eta_max=5.0, eta_growth=1.1, max_outer=200,
                 rel_tol=1e-5, cg_tol=1e-6, cg_max_iter=200,
                 sparsity_target=0.05, seed=0, feature_init="auto",
                 renormalize_atoms=False, threads=1, batch_size=500):
        self.dictionary = dictionary
        self.n_atoms = n_atoms
        self.kernel_size = kernel_size
        self._init_solver_params(beta, eta0, eta_max, eta_growth, max_outer,
                                 rel_tol, cg_tol, cg_max_iter, sparsity_target,
                                 seed, feature_init, renormalize_atoms,
                                 threads, batch_size)

    def fit(self, measurements, y=None):
        if self.dictionary is not None:
            self.dictionary_ = self.dictionary
            return self
        result = reconstruct_insitu(measurements, self.n_atoms,
                                    self.kernel_size, _config_from(self))
        self.dictionary_ = result.dictionary
        self.fit_result_ = result
        return self

    def transform(self, measurements):
        check_is_fitted(self, "dictionary_")
        result = reconstruct_prelearned(measurements, self.dictionary_,
                                        _config_from(self))
        self.last_result_ = result
        return result.images

    def fit_transform(self, measurements, y=None):
        self.fit(measurements)
        if hasattr(self, "fit_result_"):
            self.last_result_ = self.fit_result_
            return self.fit_result_.images
        return self.transform(measurements)


class SoftmaxClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression on flattened feature vectors."""

    def __init__(self, epochs=500, step=0.5, l2=1e-4):
        self.epochs = epochs
        self.step = step
        self.l2 = l2

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.classes_ = np.unique(y)
        model, trace = softmax_train(X, y, n_classes=int(y.max()) + 1,
                                     epochs=self.epochs, step=self.step,
                                     l2=self.l2)
        self.model_ = model
        self.loss_trace_ = trace
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return softmax_predict(self.model_, X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return predict_labels(self.model_, X)

    def score(self, X, y):
        check_is_fitted(self, "model_")
        return accuracy(self.model_, check_array(X, dtype=np.float64), y)
