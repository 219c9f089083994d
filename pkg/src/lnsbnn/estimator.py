"""scikit-learn style classifier wrapping pretraining plus fine-tuning."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import AugmentSpec, Dataset
from .model import desk4
from .noisy_loss import NoiseRates
from .tensor import log_softmax
from .train import TrainConfig, finetune, pretrain_baseline


class BinaryNetClassifier(ClassifierMixin, BaseEstimator):
    """Four-layer binary CNN for small images.

    ``fit`` pretrains with sign binarization, then fine-tunes either with
    mapping networks (``finetune_mode="lns"``) or plainly (``"simple"``).
    Inputs are ``(n, h, w)`` or ``(n, c, h, w)`` arrays, or flat ``(n, d)``
    arrays together with ``image_shape``. Inputs are used as given, so
    standardize them first.

    Parameters
    ----------
    width : int
        Channels of the first conv; quantized convs use twice as many.
    pretrain_epochs, finetune_epochs : int
        Epoch budgets for the two phases. ``finetune_epochs=0`` skips fine-tuning.
    lr, finetune_lr : float
        Initial learning rates. Each phase decays by 10x at one half and three
        quarters (pretrain) or every third (fine-tune) of its budget.
    alpha : float
        Weight of the corrected mapping loss during LNS fine-tuning.
    rho : float
        Symmetric flip rate assumed for the pretrained signs.
    """

    def __init__(
        self,
        width: int = 16,
        pretrain_epochs: int = 20,
        finetune_epochs: int = 10,
        finetune_mode: str = "lns",
        lr: float = 0.1,
        finetune_lr: float = 0.01,
        batch_size: int = 128,
        momentum: float = 0.9,
        alpha: float = 1.0,
        rho: float = 0.005,
        augment_pad: int = 0,
        image_shape: tuple[int, ...] | None = None,
        random_state: int = 0,
    ):
        self.width = width
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.finetune_mode = finetune_mode
        self.lr = lr
        self.finetune_lr = finetune_lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.alpha = alpha
        self.rho = rho
        self.augment_pad = augment_pad
        self.image_shape = image_shape
        self.random_state = random_state

    def _to_images(self, X, fitting: bool) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.ndim == 2:
            if self.image_shape is None:
                raise ValueError("flat input needs image_shape=(c, h, w) or (h, w)")
            X = X.reshape((len(X), *self.image_shape))
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4:
            raise ValueError(f"expected images of rank 3 or 4, got shape {X.shape}")
        if fitting:
            self.input_shape_ = X.shape[1:]
            self.n_features_in_ = int(np.prod(X.shape[1:]))
        elif X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has image shape {X.shape[1:]}, but the model was fit on {self.input_shape_}")
        return np.ascontiguousarray(X, dtype=np.float32)

    def fit(self, X, y):
        if self.finetune_mode not in ("lns", "simple"):
            raise ValueError(f"finetune_mode must be 'lns' or 'simple', got {self.finetune_mode!r}")
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        images = self._to_images(X, fitting=True)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        data = Dataset(images, codes.astype(np.int64))
        spec = desk4(self.input_shape_, len(self.classes_), self.width)
        aug = AugmentSpec(pad=self.augment_pad, crop=images.shape[-1]) if self.augment_pad else None
        e = self.pretrain_epochs
        pre_cfg = TrainConfig(lr=self.lr, momentum=self.momentum, batch_size=self.batch_size, epochs=e,
                              milestones=tuple(sorted({m for m in (e // 2, 3 * e // 4) if 0 < m < e})),
                              seed=self.random_state, augment=aug)
        ck = pretrain_baseline(spec, data, pre_cfg)
        f = self.finetune_epochs
        if f > 0:
            step = max(f // 3, 1)
            ft_cfg = TrainConfig(lr=self.finetune_lr, momentum=self.momentum, batch_size=self.batch_size,
                                 epochs=f, milestones=tuple(range(step, f, step)), seed=self.random_state,
                                 alpha=self.alpha, rates=NoiseRates.symmetric(self.rho), augment=aug,
                                 warm_start_epochs=1)
            ck = finetune(ck, data, ft_cfg, self.finetune_mode)
        self.checkpoint_ = ck
        self.model_ = ck.inference_model()
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = self._to_images(X, fitting=False)
        return np.concatenate([self.model_.logits(images[i:i + 500]) for i in range(0, len(images), 500)])

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(log_softmax(self.decision_function(X).astype(np.float64)))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
