"""Scikit-learn style estimator wrapping spec construction, fitting and prediction."""
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .exceptions import ConfigError
from .model import (Hyperparameters, IrfBlockSpec, ModelSpec, RandomFactor, Standardization,
                    assemble_inputs, check_spec)
from .trainer import TrainConfig, fit
from .validation import check_events, check_is_fitted, check_responses


class CDRNNRegressor(RegressorMixin, BaseEstimator):
    """Continuous-time deconvolutional regressive neural network.

    ``fit(events, responses)`` takes an event stream (``series_id``, ``time``
    and predictor columns) and a response table (``series_id``, ``time``,
    ``y`` and optional random-factor columns). Predictions are the mean of
    the predictive normal at each response.

    Parameters
    ----------
    predictors : sequence of str, optional
        Predictor columns to use. Defaults to every non-key event column.
    irf_blocks : sequence of IrfBlockSpec or dict, optional
        IRF network layout. Defaults to one unconstrained block.
    f_in : "identity" or sequence of int
        Input-processing network widths.
    history_length : int
        Number of most recent events convolved per response.
    max_lookback : float, optional
        Events older than this delay are ignored.
    random_factors : sequence of str, optional
        Response columns holding grouping-factor levels.
    n_layers, n_units, weight_l2, ranef_l2, dropout, learning_rate,
    batch_size, inference :
        Network and optimizer hyperparameters.
    max_epochs, min_epochs, convergence_window, convergence_alpha :
        Stopping rule.
    random_state : int, optional
        Seed for initialization, shuffling and dropout.

    Attributes
    ----------
    model_ : FittedModel
    spec_ : ModelSpec
    standardization_ : Standardization
    n_epochs_ : int
    converged_ : bool
    training_log_ : list of dict
    """

    def __init__(self, predictors=None, irf_blocks=None, f_in="identity", history_length=32,
                 max_lookback=None, random_factors=None, n_layers=2, n_units=32, weight_l2=5.0,
                 ranef_l2=10.0, dropout=0.2, learning_rate=0.003, batch_size=1024, inference="mle",
                 max_epochs=5000, min_epochs=0, convergence_window=100, convergence_alpha=0.5,
                 random_state=None):
        self.predictors = predictors
        self.irf_blocks = irf_blocks
        self.f_in = f_in
        self.history_length = history_length
        self.max_lookback = max_lookback
        self.random_factors = random_factors
        self.n_layers = n_layers
        self.n_units = n_units
        self.weight_l2 = weight_l2
        self.ranef_l2 = ranef_l2
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.inference = inference
        self.max_epochs = max_epochs
        self.min_epochs = min_epochs
        self.convergence_window = convergence_window
        self.convergence_alpha = convergence_alpha
        self.random_state = random_state

    def _build_spec(self, events, responses):
        blocks = self.irf_blocks or (IrfBlockSpec(),)
        blocks = tuple(b if isinstance(b, IrfBlockSpec) else IrfBlockSpec(**b) for b in blocks)
        factors = []
        for name in self.random_factors or ():
            if name not in responses.factors:
                raise ConfigError(f"random factor {name!r} is not a response column")
            factors.append(RandomFactor(name, tuple(np.unique(responses.factors[name]))))
        hyper = Hyperparameters(self.n_layers, self.n_units, self.weight_l2, self.ranef_l2,
                                self.dropout, self.learning_rate, self.batch_size, self.inference)
        spec = ModelSpec(tuple(events.predictor_names), blocks, self.f_in, self.history_length,
                         self.max_lookback, tuple(factors), hyper)
        check_spec(spec)
        return spec

    def _train_config(self):
        return TrainConfig(max_epochs=self.max_epochs, min_epochs=self.min_epochs,
                           convergence_window=self.convergence_window,
                           convergence_alpha=self.convergence_alpha)

    def fit(self, events, responses):
        """Fit on ``events`` and ``responses``; returns ``self``."""
        events = check_events(events, self.predictors)
        responses = check_responses(responses, self.random_factors)
        self.spec_ = self._build_spec(events, responses)
        batch = assemble_inputs(events, responses, self.spec_)
        self.standardization_ = Standardization.from_data(events, batch)
        res = fit(self.spec_, batch, self.standardization_, self.random_state, self._train_config())
        self.model_ = res.model
        self.n_epochs_ = res.epochs
        self.converged_ = res.converged
        self.training_log_ = res.log
        self.n_features_in_ = self.spec_.n_predictors
        return self

    def _batch(self, events, responses):
        check_is_fitted(self)
        events = check_events(events, self.spec_.predictor_names)
        responses = check_responses(responses, [f.name for f in self.spec_.random_factors])
        return assemble_inputs(events, responses, self.spec_)

    def predict_dist(self, events, responses):
        """Predictive ``(mu, sigma)`` in response units."""
        batch = self._batch(events, responses)
        pp = self.model_.predict(batch)
        return pp.mu, pp.sigma

    def predict(self, events, responses):
        """Predictive mean at each response time."""
        return self.predict_dist(events, responses)[0]

    def loglik(self, events, responses):
        """Per-response log-likelihood in response units."""
        batch = self._batch(events, responses)
        return self.model_.loglik(batch)

    def score(self, events, responses):
        """Mean per-response log-likelihood (higher is better)."""
        return float(np.mean(self.loglik(events, responses)))
