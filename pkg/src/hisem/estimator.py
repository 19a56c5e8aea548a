"""scikit-learn style wrapper around the captioning model.

``X`` is an array ``[n_pairs, 2, H, W, D]`` holding the before/after grids;
``y`` is, per pair, either one caption or a list of reference captions.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import DatasetRecord, build_vocab
from .evaluation import predict_records
from .hasd import MoEConfig
from .metrics import stratified_evaluate
from .model import HiSemModel, ModelConfig
from .training import CurriculumConfig, train_loop


def check_bitemporal(X, grid=None, d_in=None) -> np.ndarray:
    """Validate a stack of bi-temporal feature pairs and return it as float64."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4 and X.shape[0] == 2:
        X = X[None]
    if X.ndim != 5 or X.shape[1] != 2:
        raise ValueError(f"expected X of shape [n_pairs, 2, H, W, D], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X holds no pairs")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains NaN or infinite values")
    if grid is not None and tuple(X.shape[2:4]) != tuple(grid):
        raise ValueError(f"grid {X.shape[2:4]} does not match the fitted grid {tuple(grid)}")
    if d_in is not None and X.shape[4] != d_in:
        raise ValueError(f"feature dim {X.shape[4]} does not match the fitted dim {d_in}")
    return X


def check_captions(y, n: int) -> list[list[str]]:
    if len(y) != n:
        raise ValueError(f"got {len(y)} caption entries for {n} pairs")
    out = []
    for item in y:
        refs = [item] if isinstance(item, str) else [str(s) for s in item]
        if not refs:
            raise ValueError("every pair needs at least one reference caption")
        out.append(refs)
    return out


def _check_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"got {labels.shape[0]} change labels for {n} pairs")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("change labels must be 0 or 1")
    return labels


def _records(X, captions, labels):
    return [
        DatasetRecord(f"pair_{i:05d}", X[i, 0], X[i, 1], int(labels[i]), captions[i])
        for i in range(X.shape[0])
    ]


class HiSemCaptioner(BaseEstimator):
    """Change captioner with image-level routing and token-level experts.

    Parameters mirror :class:`ModelConfig`, :class:`MoEConfig` and
    :class:`CurriculumConfig`; ``random_state`` seeds both initialisation and
    batch order.
    """

    def __init__(
        self,
        d_model=64,
        bdam_layers=3,
        decoder_layers=1,
        num_experts=8,
        num_groups=4,
        groups_topk=2,
        experts_topk=2,
        num_shared_experts=1,
        epochs=50,
        warmup_epochs=None,
        lr=1e-4,
        batch_size=64,
        cls_weight=0.8,
        clip_norm=5.0,
        min_freq=1,
        max_len=24,
        random_state=0,
    ):
        self.d_model = d_model
        self.bdam_layers = bdam_layers
        self.decoder_layers = decoder_layers
        self.num_experts = num_experts
        self.num_groups = num_groups
        self.groups_topk = groups_topk
        self.experts_topk = experts_topk
        self.num_shared_experts = num_shared_experts
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.cls_weight = cls_weight
        self.clip_norm = clip_norm
        self.min_freq = min_freq
        self.max_len = max_len
        self.random_state = random_state

    def _model_config(self, grid, d_in, vocab_size) -> ModelConfig:
        moe = MoEConfig(
            num_experts=self.num_experts,
            num_groups=self.num_groups,
            groups_topk=self.groups_topk,
            experts_topk=self.experts_topk,
            num_shared_experts=self.num_shared_experts,
            expert_hidden_dim=self.d_model,
        )
        return ModelConfig(
            d_in=d_in,
            d_model=self.d_model,
            grid=grid,
            bdam_layers=self.bdam_layers,
            bdam_hidden=self.d_model,
            decoder_layers=self.decoder_layers,
            max_len=self.max_len,
            vocab_size=vocab_size,
            moe=moe,
        )

    def fit(self, X, y, change_labels=None):
        """Train on pairs ``X`` with captions ``y``.

        ``change_labels`` (0/1 per pair) supervises the image-level router
        and is required.
        """
        X = check_bitemporal(X)
        captions = check_captions(y, X.shape[0])
        if change_labels is None:
            raise ValueError("change_labels are required to supervise the router")
        labels = _check_labels(change_labels, X.shape[0])
        seed = 0 if self.random_state is None else int(self.random_state)

        self.vocab_ = build_vocab([c for refs in captions for c in refs], self.min_freq)
        self.grid_ = tuple(X.shape[2:4])
        self.n_features_in_ = X.shape[4]
        self.model_ = HiSemModel(self._model_config(self.grid_, self.n_features_in_, len(self.vocab_)), seed=seed)
        cfg = CurriculumConfig(
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            cls_weight=self.cls_weight,
            lr=self.lr,
            batch_size=self.batch_size,
            clip_norm=self.clip_norm,
            seed=seed,
        )
        self.report_ = train_loop(self.model_, _records(X, captions, labels), self.vocab_, cfg)
        return self

    def _predict(self, X, routing, change_labels):
        check_is_fitted(self, "model_")
        X = check_bitemporal(X, self.grid_, self.n_features_in_)
        if routing == "gt":
            if change_labels is None:
                raise ValueError("routing='gt' needs change_labels")
            labels = _check_labels(change_labels, X.shape[0])
        else:
            labels = np.zeros(X.shape[0], dtype=np.int64)
        recs = _records(X, [[""]] * X.shape[0], labels)
        return predict_records(self.model_, recs, self.vocab_, routing)

    def predict(self, X, routing="pre", change_labels=None) -> list[str]:
        return self._predict(X, routing, change_labels)[0]

    def predict_change(self, X) -> np.ndarray:
        """Image-level router decision per pair (1 = changed)."""
        _, decisions = self._predict(X, "pre", None)
        return np.array([int(d.path) for d in decisions])

    def transform(self, X) -> np.ndarray:
        """Disentangled visual tokens ``[n_pairs, H*W, d_model]`` fed to the decoder."""
        from . import tensor as T

        check_is_fitted(self, "model_")
        X = check_bitemporal(X, self.grid_, self.n_features_in_)
        with T.no_grad():
            return self.model_.forward(X[:, 0], X[:, 1]).visual.data.copy()

    def score(self, X, y, change_labels=None, routing="pre") -> float:
        """S*_m on the whole set (falls back to BLEU-4 when it is undefined)."""
        X = check_bitemporal(X, self.grid_, self.n_features_in_)
        captions = check_captions(y, X.shape[0])
        labels = _check_labels(change_labels, X.shape[0]) if change_labels is not None else None
        preds, decisions = self._predict(X, routing, labels)
        if labels is None:
            labels = np.array([int(d.path) for d in decisions])
        reports = stratified_evaluate(preds, captions, labels, [int(d.path) for d in decisions])
        rep = reports["all"]
        return rep.s_star_m if rep.s_star_m is not None else rep.bleu4
