"""scikit-learn compatible wrappers around the isolation, feature and model stages.

They compose with ``sklearn.pipeline.Pipeline`` and support ``get_params`` /
``set_params`` / ``clone``::

    iso = KeystrokeIsolator(prominence=70.0)
    X, y = iso.transform_labeled(clips, labels)
    clf = KeystrokeClassifier(epochs=60).fit(X, y)
    clf.predict_topk(X_test, 5)
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import features, isolation, training
from .audio_io import AudioClip, to_mono
from .errors import DataError
from .nn.model import Classifier, ModelConfig, softmax_np, topk_from_logits


class KeystrokeIsolator(TransformerMixin, BaseEstimator):
    """Cut recordings (AudioClip objects or 1-D arrays) into 14400-sample segments.

    ``adaptive=True`` runs the threshold search from ``prominence`` with
    ``step``/``step_decay`` until ``target_count`` peaks remain.
    """

    def __init__(self, prominence=70.0, adaptive=False, step=10.0, target_count=25, step_decay=0.99,
                 max_iterations=2000, sample_rate=44100):
        self.prominence = prominence
        self.adaptive = adaptive
        self.step = step
        self.target_count = target_count
        self.step_decay = step_decay
        self.max_iterations = max_iterations
        self.sample_rate = sample_rate

    def _params(self):
        return isolation.IsolationParams(self.prominence, self.step, self.target_count, self.step_decay,
                                         self.max_iterations)

    def fit(self, X=None, y=None):
        self._params()  # validates the hyperparameters
        self.is_fitted_ = True
        return self

    def _clip(self, item):
        if isinstance(item, AudioClip):
            return to_mono(item)
        return AudioClip(np.asarray(item, dtype=np.float32), self.sample_rate)

    def isolate(self, recording, label=None):
        """Segments of one recording."""
        clip = self._clip(recording)
        if self.adaptive:
            return isolation.isolate_adaptive(clip, self._params(), labels=label)
        return isolation.isolate_fixed(clip, self.prominence, labels=label)

    def transform(self, X):
        """Stack every segment of every recording into an (N, 14400) array."""
        segs = [s.samples for rec in X for s in self.isolate(rec)]
        return np.stack(segs) if segs else np.zeros((0, isolation.SEGMENT_LEN), dtype=np.float32)

    def transform_labeled(self, X, labels):
        """Like ``transform`` but also returns one label per segment from its recording."""
        waves, ys = [], []
        for rec, lab in zip(X, labels, strict=True):
            for s in self.isolate(rec):
                waves.append(s.samples)
                ys.append(lab)
        if not waves:
            return np.zeros((0, isolation.SEGMENT_LEN), dtype=np.float32), np.zeros(0, dtype=np.int64)
        return np.stack(waves), np.asarray(ys)


class MelSpectrogramTransformer(TransformerMixin, BaseEstimator):
    """(N, 14400) waveforms -> (N, n_mels, 64) standardized log-mel spectrograms."""

    def __init__(self, n_mels=64, n_fft=1024, hop=225, sample_rate=44100):
        self.n_mels = n_mels
        self.n_fft = n_fft
        self.hop = hop
        self.sample_rate = sample_rate

    def _mel(self):
        return features.MelConfig(n_mels=self.n_mels, n_fft=self.n_fft, hop=self.hop)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        features.mel_filterbank(self._mel(), self.sample_rate)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float32)
        return features.featurize_batch(X, self._mel(), self.sample_rate)


class KeystrokeClassifier(ClassifierMixin, BaseEstimator):
    """The convolution + attention classifier trained with Adam and a linear schedule.

    ``fit`` takes raw segments (N, 14400), which are augmented per epoch with
    time shift and masking, or precomputed spectrograms (N, mels, 64), which
    receive masking only.  Without an explicit validation set,
    ``validation_fraction`` of the training data is held out.  ``model_`` is
    the peak-validation snapshot and ``final_model_`` the last-epoch weights.
    """

    def __init__(self, epochs=1100, batch_size=16, max_lr=5e-4, betas=(0.9, 0.999), eps=1e-8, validate_every=5,
                 validation_fraction=0.125, augment=True, max_shift_fraction=0.4, mask_fraction=0.1,
                 masks_per_axis=2, n_mels=64, n_fft=1024, hop=225, random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.betas = betas
        self.eps = eps
        self.validate_every = validate_every
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.max_shift_fraction = max_shift_fraction
        self.mask_fraction = mask_fraction
        self.masks_per_axis = masks_per_axis
        self.n_mels = n_mels
        self.n_fft = n_fft
        self.hop = hop
        self.random_state = random_state

    def _mel(self):
        return features.MelConfig(n_mels=self.n_mels, n_fft=self.n_fft, hop=self.hop)

    def _check_X(self, X):
        X = np.asarray(X)
        allow_nd = X.ndim == 3
        return check_array(X, dtype=np.float32, allow_nd=allow_nd)

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._check_X(X)
        X, y = check_X_y(X, y, dtype=np.float32, allow_nd=X.ndim == 3)
        self.encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.encoder_.classes_
        if len(self.classes_) < 2:
            raise DataError("need at least two classes")
        yi = self.encoder_.transform(y)
        if X_val is None:
            order = np.random.default_rng([self.random_state, 0xFA11]).permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            val, tr = order[:n_val], order[n_val:]
            X_tr, y_tr, X_va, y_va = X[tr], yi[tr], X[val], yi[val]
        else:
            X_va = self._check_X(X_val)
            X_tr, y_tr, y_va = X, yi, self.encoder_.transform(np.asarray(y_val))
        run = training.RunConfig(epochs=self.epochs, batch_size=self.batch_size, max_lr=self.max_lr,
                                 betas=self.betas, eps=self.eps, validate_every=self.validate_every,
                                 seed=self.random_state)
        aug = features.AugmentConfig(self.max_shift_fraction, self.mask_fraction, self.masks_per_axis) \
            if self.augment else None
        cfg = ModelConfig(input_shape=(1, self.n_mels, 64), n_classes=len(self.classes_))
        self.final_model_ = Classifier(cfg, seed=self.random_state)
        self.model_, self.history_ = training.train(self.final_model_, (X_tr, y_tr), (X_va, y_va), run,
                                                    self._mel(), aug)
        self.n_features_in_ = X.shape[1]
        return self

    def _inputs(self, X):
        X = self._check_X(X)
        if X.ndim == 2:
            return training.featurize_all(X, self._mel())
        return X[:, None]

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.logits(self._inputs(X))

    def predict_proba(self, X):
        return softmax_np(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def predict_topk(self, X, k=5):
        """The ``k`` most likely labels per sample, best first."""
        scores = self.decision_function(X)
        return self.classes_[topk_from_logits(scores, k)]
