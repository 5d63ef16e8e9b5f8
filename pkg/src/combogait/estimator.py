"""scikit-learn style wrapper: ``fit`` trains, ``transform`` embeds, ``predict`` gives attributes."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import LossWeights, ModelConfig, TrainConfig
from .data import Dataset, SequenceRecord, SubjectMeta
from .errors import ConfigError
from .evaluation import extract_embedding
from .training import build_model, train
from .validation import check_attributes, check_ids, check_pairs


class ComboGait(TransformerMixin, BaseEstimator):
    """Gait embedding + attribute classifier trained with the combined loss.

    ``X`` is a list of ``(silhouettes (T, H, W), smpl (T, 82))`` pairs, ``y``
    the subject identity of each pair and ``attributes`` an (n, 3) array of
    (age, sex, bmi) classes. ``model_config=None`` uses the desk-scale
    reference architecture.
    """

    def __init__(
        self,
        model_config: ModelConfig | None = None,
        iterations: int = 200,
        lr: float = 0.01,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        p_subjects: int = 4,
        k_seqs: int = 2,
        frames: int = 30,
        margin: float = 0.2,
        alpha: float = 1.0,
        beta: float = 0.01,
        random_state: int = 0,
    ):
        self.model_config = model_config
        self.iterations = iterations
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.p_subjects = p_subjects
        self.k_seqs = k_seqs
        self.frames = frames
        self.margin = margin
        self.alpha = alpha
        self.beta = beta
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return self.model_config if self.model_config is not None else ModelConfig.reference()

    def fit(self, X, y, attributes=None):
        cfg = self._model_config()
        pairs = check_pairs(X, cfg.height, cfg.width, cfg.smpl_dim)
        y = check_ids(y, len(pairs))
        if attributes is None:
            if self.beta != 0:
                raise ConfigError("attributes are required unless beta == 0")
            attributes = np.zeros((len(pairs), 3), dtype=np.int64)
        attributes = check_attributes(attributes, len(pairs))
        records = [
            SequenceRecord(
                SubjectMeta(str(sid), 0.0, "female", 0.0, 0.0, 0.0),
                sil,
                smpl,
                attribute_labels=tuple(int(v) for v in att),
            )
            for (sil, smpl), sid, att in zip(pairs, y, attributes)
        ]
        ds = Dataset(records)
        tcfg = TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            iterations=self.iterations,
            p_subjects=min(self.p_subjects, len(ds.subject_ids())),
            k_seqs=self.k_seqs,
            frames=self.frames,
            margin=self.margin,
            seed=self.random_state,
        )
        model = build_model(dataclasses.replace(cfg, init_seed=self.random_state), ds)
        result = train(model, ds, tcfg, LossWeights.with_beta(self.beta, self.alpha))
        self.model_ = result.model.eval()
        self.classes_ = np.array(ds.subject_ids())
        self.loss_trace_ = np.array([row[1:] for row in result.trace], dtype=np.float64).reshape(-1, 6)
        return self

    def _forward_all(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        pairs = check_pairs(X, cfg.height, cfg.width, cfg.smpl_dim)
        embs, preds = zip(*(extract_embedding(self.model_, sil, smpl) for sil, smpl in pairs))
        return np.stack(embs), np.stack(preds)

    def transform(self, X) -> np.ndarray:
        """(n, C''*P) flattened gait embeddings."""
        return self._forward_all(X)[0]

    def predict(self, X) -> np.ndarray:
        """(n, 3) predicted (age, sex, bmi) classes."""
        return self._forward_all(X)[1]
