"""scikit-learn compatible wrapper around the trainer."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .network import ModelConfig, normalize_embeddings
from .trainer import TrainConfig, Trainer


def check_partial_labels(X, candidates, n_classes=None):
    """Validate a feature matrix and its candidate-set matrix.

    ``candidates`` is an ``(n_samples, n_classes)`` 0/1 or boolean array.
    Returns ``(X, S)`` as float32 features and a boolean matrix.
    """
    X = check_array(X, dtype=np.float32, ensure_min_samples=1)
    S = check_array(candidates, dtype=None, ensure_min_features=2)
    if not np.isin(S, (0, 1)).all():
        raise ValueError("candidate matrix must be binary")
    S = S.astype(bool)
    if S.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} samples but candidates has {S.shape[0]}")
    if n_classes is not None and S.shape[1] != n_classes:
        raise ValueError(f"candidates has {S.shape[1]} columns, expected {n_classes}")
    empty = np.flatnonzero(~S.any(axis=1))
    if empty.size:
        raise ValueError(f"empty candidate sets in rows {empty[:10].tolist()}")
    return X, S


class CELClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Partial-label classifier trained with class-wise embeddings.

    ``fit(X, candidates)`` takes a binary candidate matrix in place of ``y``.
    ``predict`` returns class indices ``0 .. q-1``; ``score(X, y)`` is plain
    accuracy against true labels. ``transform`` returns the normalized
    class-wise embeddings flattened to ``(n_samples, q * embed_dim)``.

    Parameters mirror :class:`cel.trainer.TrainConfig` and
    :class:`cel.network.ModelConfig`. ``model="baseline"`` trains the
    single-embedding network with the confidence loss only.
    """

    def __init__(
        self,
        alpha=0.5,
        beta=1.0,
        gamma1=1.0,
        gamma2=1.0,
        tw=50,
        tmax=100,
        batch_size=64,
        lr=0.05,
        momentum=0.9,
        weight_decay=5e-4,
        selection_mode="strict",
        model="cel",
        hidden=(64,),
        token_count=4,
        token_dim=32,
        embed_dim=16,
        attn_dim=32,
        activation="gelu",
        random_state=0,
    ):
        self.alpha = alpha
        self.beta = beta
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.tw = tw
        self.tmax = tmax
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.selection_mode = selection_mode
        self.model = model
        self.hidden = hidden
        self.token_count = token_count
        self.token_dim = token_dim
        self.embed_dim = embed_dim
        self.attn_dim = attn_dim
        self.activation = activation
        self.random_state = random_state

    def _configs(self, d, q):
        model_config = ModelConfig(
            d=d,
            q=q,
            kind=self.model,
            hidden=tuple(self.hidden),
            token_count=self.token_count,
            token_dim=self.token_dim,
            embed_dim=self.embed_dim,
            attn_dim=self.attn_dim,
            activation=self.activation,
        )
        alpha, beta = (self.alpha, self.beta) if self.model == "cel" else (0.0, 0.0)
        config = TrainConfig(
            alpha=alpha,
            beta=beta,
            gamma1=self.gamma1,
            gamma2=self.gamma2,
            tw=self.tw,
            tmax=self.tmax,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=int(self.random_state or 0),
            selection_mode=self.selection_mode,
        )
        return model_config, config

    def fit(self, X, candidates, monitor=None):
        X, S = check_partial_labels(X, candidates)
        model_config, config = self._configs(X.shape[1], S.shape[1])
        trainer = Trainer(X, S, model_config, config, monitor=monitor)
        trainer.run()
        self.trainer_ = trainer
        self.classes_ = np.arange(S.shape[1])
        self.n_features_in_ = X.shape[1]
        self.history_ = trainer.history
        self.confidence_ = trainer.T
        self.prototypes_ = trainer.bank
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "trainer_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.trainer_.predict_proba(X)

    def predict(self, X):
        P = self.predict_proba(X)
        return self.classes_[P.argmax(axis=1)]

    def transform(self, X):
        check_is_fitted(self, "trainer_")
        if self.model != "cel":
            raise AttributeError("transform needs class-wise embeddings (model='cel')")
        X = check_array(X, dtype=np.float32)
        net = self.trainer_.model
        with torch.no_grad():
            xt = torch.as_tensor(X, dtype=net.config.torch_dtype)
            E = normalize_embeddings(net.classwise_encode(net.backbone_forward(xt)))
        return E.reshape(E.shape[0], -1).double().numpy()

    def fit_transform(self, X, candidates=None, **fit_params):
        return self.fit(X, candidates, **fit_params).transform(X)
