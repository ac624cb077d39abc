"""scikit-learn style facade over the curriculum trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import diffcore as dc
from .config import RunConfig
from .curriculum import MODES, build_plan, run_curriculum
from .dataio import Benchmark, PatchSample
from .metrics import confusion, summarize
from .nets import ModelBundle, forward_seg
from .uncertainty import IGNORE_INDEX

_DOWNSAMPLE = 8
_MIN_EXTENT = 16


def check_patches(X, name="X") -> np.ndarray:
    """Validate an N x C x H x W float batch of patches."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim != 4:
        raise ValueError(f"{name} must be 4-D (n_samples, channels, height, width), got {X.ndim}-D")
    h, w = X.shape[2:]
    if h < _MIN_EXTENT or w < _MIN_EXTENT or h % _DOWNSAMPLE or w % _DOWNSAMPLE:
        raise ValueError(
            f"{name}: patch extent {h}x{w} must be >= {_MIN_EXTENT} and a multiple of {_DOWNSAMPLE}"
        )
    return X


def check_label_maps(y, X: np.ndarray, n_classes: int | None = None, name="y") -> np.ndarray:
    y = check_array(y, allow_nd=True, ensure_2d=False, dtype=None, input_name=name)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"{name} shape {y.shape} does not match patches {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.round(y)):
            raise ValueError(f"{name} must hold integer class indices")
        y = y.astype(np.int64)
    valid = y[y != IGNORE_INDEX]
    if valid.size and (valid.min() < 0 or (n_classes is not None and valid.max() >= n_classes)):
        raise ValueError(f"{name} holds class indices outside [0, {n_classes})")
    return y.astype(np.uint8)


def _samples(X, y, domain, prefix):
    return [PatchSample(X[i].astype(np.float32), None if y is None else y[i], domain,
                        f"{prefix}-{i:05d}") for i in range(X.shape[0])]


class CurriculumSegmenter(BaseEstimator):
    """Patch segmenter adapted from a labelled source domain to an unlabelled target.

    ``fit(X_source, y_source, X_target)`` pretrains on the source patches and
    then runs the curriculum ``mode``; without ``X_target`` only the source
    pretraining happens. Patches are N x C x H x W arrays in [0, 1], label
    maps N x H x W class indices (255 is ignored).
    """

    def __init__(self, mode="canonical", n_classes=None, gamma=0.5, lam=0.1, lr=0.01,
                 pretrain_lr=0.02, disc_lr=None, batch_size=4, iters=500,
                 pretrain_iters=500, objective="grl", dtype="float32", random_state=0):
        self.mode = mode
        self.n_classes = n_classes
        self.gamma = gamma
        self.lam = lam
        self.lr = lr
        self.pretrain_lr = pretrain_lr
        self.disc_lr = disc_lr
        self.batch_size = batch_size
        self.iters = iters
        self.pretrain_iters = pretrain_iters
        self.objective = objective
        self.dtype = dtype
        self.random_state = random_state

    def _run_config(self, n_classes: int, seed: int) -> RunConfig:
        return RunConfig(gamma=self.gamma, lam=self.lam, lr=self.lr, pretrain_lr=self.pretrain_lr,
                         disc_lr=self.disc_lr, batch_size=self.batch_size, iters=self.iters,
                         pretrain_iters=self.pretrain_iters, objective=self.objective,
                         dtype=self.dtype, seed=seed, class_count=n_classes)

    def fit(self, X, y, X_target=None):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        seed = 0 if self.random_state is None else self.random_state
        if not isinstance(seed, (int, np.integer)):
            raise ValueError("random_state must be an int or None (runs are seeded integers)")
        X = check_patches(X)
        y = check_label_maps(y, X, self.n_classes)
        valid = y[y != IGNORE_INDEX]
        if valid.size == 0:
            raise ValueError("y holds no labelled pixels")
        n_classes = self.n_classes or int(valid.max()) + 1
        if n_classes < 2:
            raise ValueError("need at least two classes")

        cfg = self._run_config(n_classes, int(seed))
        bundle = ModelBundle.create(in_channels=X.shape[1], n_classes=n_classes, seed=int(seed),
                                    dtype=np.dtype(self.dtype))
        if X_target is None:
            plan = build_plan(self.mode)
            plan = type(plan)(plan.mode, plan.stages[:1])
            target = []
        else:
            Xt = check_patches(X_target, "X_target")
            if Xt.shape[1:] != X.shape[1:]:
                raise ValueError(f"X_target patches {Xt.shape[1:]} differ from X {X.shape[1:]}")
            plan = build_plan(self.mode)
            target = _samples(Xt, None, "target", "tgt")
        bench = Benchmark(_samples(X, y, "source", "src"), [], target, [], [])
        self.report_ = run_curriculum(plan, bench, cfg, seed=int(seed), bundle=bundle)
        self.bundle_ = bundle
        self.n_classes_ = n_classes
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.patch_shape_ = X.shape[1:]
        return self

    def _check_input(self, X):
        check_is_fitted(self, "bundle_")
        X = check_patches(X)
        if X.shape[1:] != self.patch_shape_:
            raise ValueError(f"X patches {X.shape[1:]} differ from the fitted {self.patch_shape_}")
        return X

    def predict_proba(self, X, batch_size: int = 32) -> np.ndarray:
        """Class probabilities, N x n_classes x H x W."""
        X = self._check_input(X)
        dtype = np.dtype(self.dtype)
        out = []
        with dc.no_grad():
            for start in range(0, X.shape[0], batch_size):
                _, logits = forward_seg(self.bundle_.seg, dc.Tensor(X[start:start + batch_size].astype(dtype)))
                out.append(dc.softmax(logits, axis=1).data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros((0, self.n_classes_) + X.shape[2:])

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean IoU over classes present in ``y`` or the prediction."""
        X = self._check_input(X)
        y = check_label_maps(y, X, self.n_classes_)
        cm = confusion(self.predict(X), y, self.n_classes_, ignore=IGNORE_INDEX)
        return summarize(cm)["miou"]
