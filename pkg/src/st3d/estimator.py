"""scikit-learn style facade over network construction, training and recognition."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .arch import make_network, named_spec
from .data import DEFAULT_SCALES, ArrayVideo, AugmentConfig, VideoRecord, compute_channel_mean
from .errors import DataError
from .train import TrainConfig, Trainer, recognize_video


def check_videos(X) -> list:
    """Coerce ``X`` into a list of video objects.

    Accepts :class:`VideoRecord` / :class:`ArrayVideo` items or raw
    ``(T, H, W, 3)`` uint8 arrays (wrapped as in-memory videos).
    """
    if isinstance(X, np.ndarray) and X.ndim == 4:
        raise DataError("X must be a sequence of videos; got a single (T, H, W, 3) array")
    videos = []
    for i, item in enumerate(X):
        if isinstance(item, (VideoRecord, ArrayVideo)):
            videos.append(item)
            continue
        arr = np.asarray(item)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise DataError(f"video {i}: expected a (T, H, W, 3) array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise DataError(f"video {i}: expected uint8 pixels, got {arr.dtype}")
        videos.append(ArrayVideo(f"video{i}", arr))
    if not videos:
        raise DataError("X contains no videos")
    return videos


def _relabel(videos: list, labels: Sequence[int]) -> list:
    out = []
    for v, y in zip(videos, labels):
        if isinstance(v, VideoRecord):
            out.append(VideoRecord(v.id, v.frame_dir, v.n_frames, int(y), v.split))
        else:
            out.append(ArrayVideo(v.id, v.data, int(y), v.split))
    return out


class VideoClassifier(ClassifierMixin, BaseEstimator):
    """Video action classifier backed by a 3D convolutional network.

    ``fit`` trains from scratch with stochastic multi-scale crops; prediction
    averages per-clip softmax scores over non-overlapping windows.
    ``channel_mean="auto"`` estimates the mean pixel from the training videos.
    """

    def __init__(self, model: str = "resnet", depth: int = 18, clip_len: int = 16,
                 sample_size: int = 112, width_divisor: int = 1, shortcut_type: Optional[str] = None,
                 learning_rate: Optional[float] = None, weight_decay: Optional[float] = None,
                 momentum: float = 0.9, batch_size: int = 8, max_epochs: int = 50,
                 patience: int = 10, scales: Sequence[float] = DEFAULT_SCALES,
                 flip_prob: float = 0.5, channel_mean="auto", random_state: int = 0):
        self.model = model
        self.depth = depth
        self.clip_len = clip_len
        self.sample_size = sample_size
        self.width_divisor = width_divisor
        self.shortcut_type = shortcut_type
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.scales = scales
        self.flip_prob = flip_prob
        self.channel_mean = channel_mean
        self.random_state = random_state

    def _augment(self, mean) -> AugmentConfig:
        return AugmentConfig(scales=tuple(self.scales), clip_len=self.clip_len,
                             out_size=self.sample_size, flip_prob=self.flip_prob,
                             channel_mean=tuple(mean))

    def fit(self, X, y, X_val=None, y_val=None):
        videos = check_videos(X)
        y = np.asarray(y)
        if len(y) != len(videos):
            raise ValueError(f"X has {len(videos)} videos but y has {len(y)} labels")
        check_classification_targets(y)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        self.n_classes_ = len(self.classes_)
        train_set = _relabel(videos, self.label_encoder_.transform(y))
        val_set = None
        if X_val is not None:
            val_set = _relabel(check_videos(X_val), self.label_encoder_.transform(np.asarray(y_val)))

        if isinstance(self.channel_mean, str) and self.channel_mean == "auto":
            self.channel_mean_ = compute_channel_mean(train_set)
        else:
            self.channel_mean_ = tuple(float(m) for m in self.channel_mean)
        spec = named_spec(self.model, self.depth, self.n_classes_, self.clip_len,
                          self.width_divisor, self.shortcut_type)
        self.network_ = make_network(spec, seed=self.random_state)
        cfg = TrainConfig("scratch", self.learning_rate, self.weight_decay, self.momentum,
                          self.batch_size, self.max_epochs, self.random_state, patience=self.patience)
        self.trainer_ = Trainer(self.network_, cfg, self._augment(self.channel_mean_))
        self.history_ = self.trainer_.fit(train_set, val_set)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        aug = self._augment(self.channel_mean_)
        return np.stack([recognize_video(self.network_, v, aug, self.batch_size)[0]
                         for v in check_videos(X)])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
