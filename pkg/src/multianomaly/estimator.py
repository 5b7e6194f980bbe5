"""scikit-learn style front end for the whole train / select / score pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .encoder import EncoderModel, build_encoder, encode_batch, random_backbone
from .numcore import RngState
from .scoring import anomaly_scores, predict_matrix, score_matrix
from .selection import keep_all, select
from .trainer import FewShotDataset, PromptInputs, TrainConfig, encode_prompts, train

__all__ = ["SignDrivenDetector"]


class SignDrivenDetector(ClassifierMixin, BaseEstimator):
    """Few-shot multi-anomaly detector over raw embedding vectors.

    ``fit`` trains shift adapters on an image and a text encoder that share
    one frozen backbone, encodes the prompt bank and runs sign selection.
    ``decision_function`` gives one similarity score per category,
    ``predict`` the anchor-thresholded multi-hot labels and
    ``score_samples`` a single anomaly score per image.

    Parameters
    ----------
    lam : float
        Weight of the frozen path in the adapter blend; 1.0 disables adapters.
    epochs : int
        Full-batch training epochs.  0 skips training entirely.
    learning_rate, optimizer, momentum, safeguard
        Passed to :class:`~multianomaly.trainer.TrainConfig`.
    depth : int
        Number of frozen backbone layers.
    hidden_width : int or None
        Adapter bottleneck width; ``None`` means ``ceil(dim / 4)``.
    init_scale : float
        Standard deviation of the initial adapter weights.
    backbone : {"orthogonal", "gaussian"}
        How frozen layers are drawn.
    selection : bool
        Run sign selection; ``False`` keeps every prompt.
    include_anchor_in_delta : bool
        Let the anchor compete as a pseudo-category during selection.
    random_state : int
        Seed for backbone and adapter initialisation.
    """

    def __init__(self, lam=0.8, epochs=50, learning_rate=1e-2, optimizer="gd", momentum=0.9,
                 safeguard=False, depth=4, hidden_width=None, init_scale=0.01,
                 backbone="orthogonal", selection=True, include_anchor_in_delta=False,
                 random_state=0):
        self.lam = lam
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.momentum = momentum
        self.safeguard = safeguard
        self.depth = depth
        self.hidden_width = hidden_width
        self.init_scale = init_scale
        self.backbone = backbone
        self.selection = selection
        self.include_anchor_in_delta = include_anchor_in_delta
        self.random_state = random_state

    def initial_models(self, dim: int) -> tuple[EncoderModel, EncoderModel]:
        """Untrained (image, text) encoders for this configuration."""
        root = RngState(int(self.random_state))
        layers = random_backbone(dim, self.depth, root.spawn(0), kind=self.backbone)
        image = build_encoder(layers, "image", root.spawn(1), hidden=self.hidden_width,
                              lam=self.lam, init_scale=self.init_scale)
        text = build_encoder(layers, "text", root.spawn(2), hidden=self.hidden_width,
                             lam=self.lam, init_scale=self.init_scale)
        return image, text

    def fit(self, X, Y, prompts: PromptInputs):
        X = check_array(X, dtype=np.float64)
        Y = check_array(Y, dtype=np.int64, ensure_min_features=1)
        if len(Y) != len(X):
            raise ValueError("X and Y have different numbers of samples")
        if Y.shape[1] != len(prompts.categories):
            raise ValueError(f"Y has {Y.shape[1]} columns, prompts define {len(prompts.categories)} categories")
        if X.shape[1] != prompts.anchor.shape[0]:
            raise ValueError("X and prompt vectors differ in dimension")
        image, text = self.initial_models(X.shape[1])
        report = None
        if self.epochs > 0:
            config = TrainConfig(epochs=int(self.epochs), learning_rate=self.learning_rate, lam=self.lam,
                                 seed=int(self.random_state), optimizer=self.optimizer,
                                 momentum=self.momentum, safeguard=self.safeguard)
            dataset = FewShotDataset(X, Y, prompts.categories)
            image, text, report = train(image, text, dataset, prompts, config)
        self.train_report_ = report
        return self._finish(image, text, prompts)

    def set_models(self, image_model: EncoderModel, text_model: EncoderModel, prompts: PromptInputs):
        """Adopt already trained encoders (e.g. loaded checkpoints) instead of fitting."""
        self.train_report_ = None
        return self._finish(image_model, text_model, prompts)

    def _finish(self, image, text, prompts):
        self.image_model_ = image
        self.text_model_ = text
        self.prompts_ = prompts
        self.bank_, _ = encode_prompts(text, prompts)
        if self.selection:
            self.selection_ = select(self.bank_, include_anchor=self.include_anchor_in_delta)
        else:
            self.selection_ = keep_all(self.bank_)
        self.categories_ = list(prompts.categories)
        self.n_features_in_ = image.dim
        return self

    def transform(self, X) -> np.ndarray:
        """Encoded (unit-norm) image features."""
        check_is_fitted(self, "image_model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        feats, _ = encode_batch(self.image_model_, X)
        return feats

    def decision_function(self, X) -> np.ndarray:
        return score_matrix(self.transform(X), self.bank_, self.selection_)

    def predict(self, X) -> np.ndarray:
        return predict_matrix(self.transform(X), self.bank_, self.selection_)

    def score_samples(self, X) -> np.ndarray:
        return anomaly_scores(self.transform(X), self.bank_, self.selection_)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        tags.target_tags.single_output = False
        return tags
