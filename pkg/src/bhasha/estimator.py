"""Scikit-learn estimator facade over the training pipeline.

``TransferTextClassifier`` exposes fit/predict/score + get_params/set_params
so the cross-lingual methods drop into sklearn tooling (grid search,
cross-validation, pipelines). ``X`` is a sequence of tokenized sentences
(lists of words, or whitespace-joined strings); ``language`` tags each row as
high- or low-resource. Evaluation targets low-resource rows.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import Dataset, Instance, SENTENCE_TASK, encode_instance
from .errors import ConfigError
from .lexicon import Lexicon
from .training import TrainConfig, method_flags, train_run, _predict


def _as_words(row) -> list[str]:
    if isinstance(row, str):
        return row.split()
    return list(row)


class TransferTextClassifier(BaseEstimator, ClassifierMixin):
    """Sentence classifier with optional cross-lingual transfer mechanisms.

    Parameters mirror :class:`bhasha.training.TrainConfig` and the encoder
    hyperparameters; ``method`` picks the transfer mechanism combination.
    ``lexicon`` (a dict or :class:`bhasha.lexicon.Lexicon` mapping
    low-resource words to high-resource words) is required by methods using
    translation-based initialization and feeds translation edges for
    graph-enhanced methods.
    """

    def __init__(self, method="joint", epochs=10, batch_size=16, learning_rate=1e-3,
                 weight_decay=0.01, lambda_aug=1.0, rho=1.0, alpha=0.2, hal_depth=2,
                 gnn_depth=2, neighbors_n=10, strategic_fraction=0.7,
                 batches_per_epoch=None, d_model=64, num_heads=4, d_ff=128,
                 num_layers=4, max_len=32, validation_fraction=0.2, lexicon=None,
                 seed=0):
        self.method = method
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lambda_aug = lambda_aug
        self.rho = rho
        self.alpha = alpha
        self.hal_depth = hal_depth
        self.gnn_depth = gnn_depth
        self.neighbors_n = neighbors_n
        self.strategic_fraction = strategic_fraction
        self.batches_per_epoch = batches_per_epoch
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_ff = d_ff
        self.num_layers = num_layers
        self.max_len = max_len
        self.validation_fraction = validation_fraction
        self.lexicon = lexicon
        self.seed = seed

    # -- helpers ------------------------------------------------------------

    def _split(self, instances, rng):
        """Seeded train/validation split within one language."""
        idx = np.arange(len(instances))
        rng.shuffle(idx)
        n_val = max(1, int(round(self.validation_fraction * len(instances))))
        if n_val >= len(instances):
            raise ConfigError("not enough rows to hold out a validation set")
        val = {int(i) for i in idx[:n_val]}
        return ([inst for k, inst in enumerate(instances) if k not in val],
                [inst for k, inst in enumerate(instances) if k in val])

    def _make_instances(self, X, y, language, prefix):
        langs = ["LRL"] * len(X) if language is None else list(language)
        if len(langs) != len(X):
            raise ConfigError("language must align with X")
        out = []
        for k, row in enumerate(X):
            label = None if y is None else int(self._class_index[y[k]])
            out.append(Instance(id=f"{prefix}-{k}", language=langs[k],
                                words=_as_words(row),
                                sentence_label=label if y is not None else 0))
        return out

    # -- sklearn API ----------------------------------------------------------

    def fit(self, X, y, language=None):
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        self._class_index = {c: i for i, c in enumerate(self.classes_)}
        label_set = [str(c) for c in self.classes_]

        insts = self._make_instances(X, y, language, "fit")
        rng = np.random.default_rng(self.seed)
        by_lang = {"HRL": [i for i in insts if i.language == "HRL"],
                   "LRL": [i for i in insts if i.language == "LRL"]}
        flags = method_flags(self.method)
        if not by_lang["LRL"]:
            raise ConfigError("no low-resource rows to learn the target task from")
        if not flags["scratch"] and not by_lang["HRL"]:
            raise ConfigError(f"method {self.method!r} needs high-resource rows")

        def make_ds(lang):
            ds = Dataset(task=SENTENCE_TASK, label_set=label_set)
            pool = by_lang[lang]
            if pool:
                tr, va = self._split(pool, rng)
            else:
                tr, va = [], []
            ds.splits["train"], ds.splits["validation"], ds.splits["test"] = tr, va, []
            return ds

        hrl, lrl = make_ds("HRL"), make_ds("LRL")
        if not hrl.splits["train"]:
            # transfer-free methods still need a syntactically valid HRL dataset
            hrl.splits["validation"] = []

        tcfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            seed=self.seed, lambda_aug=self.lambda_aug, rho=self.rho,
            method=self.method, neighbors_n=self.neighbors_n,
            strategic_fraction=self.strategic_fraction,
            batches_per_epoch=self.batches_per_epoch, max_len=self.max_len,
        )
        enc_base = {
            "d_model": self.d_model, "num_heads": self.num_heads,
            "d_ff": self.d_ff, "num_layers": self.num_layers, "max_len": self.max_len,
            "hal": {"alpha": self.alpha, "depth": self.hal_depth},
            "getr": {"gnn_depth": self.gnn_depth},
        }
        lex = self.lexicon
        if isinstance(lex, dict):
            lex = Lexicon(lex)
        self.model_, self.report_ = train_run(enc_base, tcfg, hrl, lrl, lex)
        self._train_pools = (lrl.splits["train"], hrl.splits["train"])
        return self

    def predict(self, X, language=None):
        check_is_fitted(self, "model_")
        m = self.model_
        insts = self._make_instances(X, None, language, "pred")
        for inst in insts:
            encode_instance(inst, m.tokenizer, m.train_cfg.max_len)
        lrl_train, hrl_train = self._train_pools
        flags = method_flags(self.method)
        preds, _, _, _ = _predict(m.params, m.cfg, insts, flags, m.lexicon,
                                  m.train_cfg.rho, lrl_train, hrl_train, m.train_cfg)
        return self.classes_[np.asarray(preds)]

    def predict_language(self, X, language):
        """Convenience: predict with an explicit per-row language list."""
        return self.predict(X, language=language)
