"""Losses, AdamW, the training loop with validation-loss checkpoint selection,
and macro-F1 evaluation.

A run is driven by a method name from the closed set
``scratch, joint, hal, hal+tet, getr_gcn, getr_gat, getr_gat+hal,
getr_gat+tet, getr_gat+hal+tet``. All methods that use high-resource data
share the same balanced batch planner (strategic formation is active only for
graph-enhanced methods), so method comparisons differ only in the transfer
mechanism under test.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import numerics as nm
from .batching import plan_epoch, inference_neighborhood
from .corpus import (Dataset, TokenizerModel, build_tokenizer,
                     encode_instance, expand_tags_to_pieces, SENTENCE_TASK)
from .errors import ConfigError, ContractError, MissingPrerequisiteError, NumericError
from .graph import build_token_graph, apply_edge_retention
from .lexicon import Lexicon, tet_initialize
from .model import (EncoderConfig, GetrConfig, HalConfig, Tensor, apply_tet_vectors,
                    count_parameters, dynamic_alpha, forward, init_params)
from .numerics import Tape, backward

VALID_METHODS = (
    "scratch", "joint", "hal", "hal+tet",
    "getr_gcn", "getr_gat", "getr_gat+hal", "getr_gat+tet", "getr_gat+hal+tet",
)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    lambda_aug: float = 1.0          # weight of the soft-label loss term
    rho: float = 1.0                 # cross-lingual edge retention
    method: str = "joint"
    neighbors_n: int = 10            # anchor group size (anchor + 9 neighbors)
    strategic_fraction: float = 0.7
    batches_per_epoch: Optional[int] = None
    tokenizer_vocab_size: Optional[int] = None
    max_len: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lambda_aug < 0:
            raise ConfigError("lambda_aug must be >= 0")
        if self.method not in VALID_METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {VALID_METHODS}")


def method_flags(method: str) -> dict:
    parts = method.split("+")
    return {
        "scratch": method == "scratch",
        "hal": "hal" in parts,
        "tet": "tet" in parts,
        "getr": None if not parts[0].startswith("getr") else parts[0].split("_")[1].upper(),
    }


@dataclass
class MetricsReport:
    method: str
    seed: int
    parameter_count: int
    epochs: list = field(default_factory=list)   # {epoch, train_loss, val_loss, val_macro_f1}
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    split_macro_f1: dict = field(default_factory=dict)
    per_class_f1: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)   # wall-clock; excluded from canonical form

    def to_json(self, include_timing: bool = True) -> str:
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json(include_timing=False))

    def save_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_loss,val_macro_f1\n")
            for row in self.epochs:
                fh.write(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r},"
                         f"{row['val_macro_f1']!r}\n")


# ---------------------------------------------------------------------------
# losses


def _one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.reshape(-1)] = 1.0
    return out.reshape(labels.shape + (num_classes,))


def cross_entropy_loss(logits: Tensor, labels, valid_mask=None) -> Tensor:
    """Mean over valid positions of -log softmax(logits)[label]."""
    flat = nm.reshape(logits, (-1, logits.shape[-1]))
    n, c = flat.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != n:
        raise ContractError(f"{labels.size} labels for {n} rows")
    if labels.size and labels.max() >= c:
        raise ContractError(f"label {labels.max()} out of range for {c} classes")
    mask = np.ones(n, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool).reshape(-1)
    nvalid = int(mask.sum())
    if nvalid == 0:
        raise ContractError("cross_entropy_loss: every position is masked")
    logp = nm.log_softmax(flat, axis=-1)
    weights = np.zeros((n, c), dtype=flat.dtype)
    rows = np.nonzero(mask)[0]
    weights[rows, labels[rows]] = -1.0 / nvalid
    return nm.sum_all(nm.mul_const(logp, weights))


def kl_divergence_loss(logits: Tensor, soft_labels, valid_mask=None) -> Tensor:
    """Mean over valid positions of KL(soft_labels || softmax(logits))."""
    flat = nm.reshape(logits, (-1, logits.shape[-1]))
    n, c = flat.shape
    y = np.asarray(soft_labels, dtype=float).reshape(n, c)
    mask = np.ones(n, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool).reshape(-1)
    nvalid = int(mask.sum())
    if nvalid == 0:
        raise ContractError("kl_divergence_loss: every position is masked")
    sums = y[mask].sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("soft labels must sum to 1 within 1e-6 on every valid row")
    logp = nm.log_softmax(flat, axis=-1)
    # KL = sum(y log y) - sum(y log p); the first term is constant
    with np.errstate(divide="ignore", invalid="ignore"):
        ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0)), 0.0)
    const = float(ylogy[mask].sum()) / nvalid
    weights = np.where(mask[:, None], -y / nvalid, 0.0).astype(flat.dtype)
    ce_term = nm.sum_all(nm.mul_const(logp, weights))
    return nm.add_const(ce_term, np.asarray(const, dtype=flat.dtype))


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# metrics


def macro_f1(preds, golds, label_set, valid_mask=None):
    """Unweighted mean of per-class F1 over the full label set.

    A class with zero predicted and zero gold instances contributes F1 = 0
    (fixed convention so numbers are reproducible).
    """
    preds = np.asarray(preds).reshape(-1)
    golds = np.asarray(golds).reshape(-1)
    if valid_mask is not None:
        m = np.asarray(valid_mask, dtype=bool).reshape(-1)
        preds, golds = preds[m], golds[m]
    if preds.size == 0:
        raise ContractError("macro_f1: empty evaluation set")
    per_class = {}
    for c, name in enumerate(label_set):
        tp = int(np.sum((preds == c) & (golds == c)))
        fp = int(np.sum((preds == c) & (golds != c)))
        fn = int(np.sum((preds != c) & (golds == c)))
        f1 = (2 * tp / (2 * tp + fp + fn)) if (2 * tp + fp + fn) else 0.0
        per_class[name] = f1
    return float(np.mean(list(per_class.values()))), per_class


# ---------------------------------------------------------------------------
# batch assembly


def _pad_batch(instances, max_len: int):
    """Stack encoded instances into (B, S) ids plus lengths/spans/words/langs."""
    lengths = [len(inst.token_ids) for inst in instances]
    S = min(max(lengths), max_len)
    B = len(instances)
    ids = np.zeros((B, S), dtype=np.int64)
    for b, inst in enumerate(instances):
        ids[b, :lengths[b]] = inst.token_ids
    return {
        "ids": ids,
        "lengths": lengths,
        "spans": [inst.spans for inst in instances],
        "words": [inst.words for inst in instances],
        "languages": [inst.language for inst in instances],
        "instances": instances,
    }


def _batch_labels(batch, task: str, num_labels: int):
    """Per-position (sequence) or per-sentence labels with loss masks."""
    insts = batch["instances"]
    if task == SENTENCE_TASK:
        labels = np.array([i.sentence_label for i in insts], dtype=np.int64)
        return labels, None
    B, S = batch["ids"].shape
    labels = np.zeros((B, S), dtype=np.int64)
    mask = np.zeros((B, S), dtype=bool)
    for b, inst in enumerate(insts):
        tags = expand_tags_to_pieces(inst)
        labels[b, 1:1 + len(tags)] = tags
        mask[b, 1:1 + len(tags)] = True
    return labels, mask


def _hal_pairs(batch, rng: np.random.Generator):
    """Pair each low-resource instance with a random high-resource one."""
    langs = batch["languages"]
    hrl = [i for i, l in enumerate(langs) if l == "HRL"]
    lrl = [i for i, l in enumerate(langs) if l == "LRL"]
    if not hrl or not lrl:
        return []
    return [(int(hrl[rng.integers(len(hrl))]), li) for li in lrl]


def _mixed_soft_labels(batch, pairs, alpha: float, task: str, num_labels: int):
    """Soft labels (and loss mask) for augmented samples."""
    labels, mask = _batch_labels(batch, task, num_labels)
    if task == SENTENCE_TASK:
        onehot = _one_hot(labels, num_labels)
        soft = np.stack([alpha * onehot[hi] + (1 - alpha) * onehot[li] for hi, li in pairs])
        return soft, None
    onehot = _one_hot(labels, num_labels)
    soft, aug_mask = [], []
    for hi, li in pairs:
        soft.append(alpha * onehot[hi] + (1 - alpha) * onehot[li])
        aug_mask.append(mask[hi] & mask[li])
    return np.stack(soft), np.stack(aug_mask)


# ---------------------------------------------------------------------------
# training run


class TrainedModel:
    """Best-checkpoint bundle returned by :func:`train_run`."""

    def __init__(self, cfg: EncoderConfig, params, tokenizer: TokenizerModel,
                 label_set, train_cfg: TrainConfig, lexicon):
        self.cfg = cfg
        self.params = params
        self.tokenizer = tokenizer
        self.label_set = label_set
        self.train_cfg = train_cfg
        self.lexicon = lexicon


def _encode_all(datasets, tok: TokenizerModel, max_len: int):
    for ds in datasets:
        for inst in ds.all_instances():
            encode_instance(inst, tok, max_len)


def _forward_batch(params, cfg, batch, flags, lexicon, rho, rng, pairs=None, alpha=None):
    g = None
    if flags["getr"]:
        g = build_token_graph(batch["ids"], batch["lengths"], batch["spans"],
                              batch["languages"], lex=lexicon, words=batch["words"])
        if rho < 1.0:
            g = apply_edge_retention(g, rho, rng)
    return forward(params, cfg, batch["ids"], batch["lengths"], g=g,
                   hal_pairs=pairs, alpha=alpha)


def _predict(params, cfg, instances, flags, lexicon, rho, train_lrl, train_hrl,
             tcfg: TrainConfig, collect_loss=False, num_labels=None):
    """Predictions (and optional mean loss) for a list of encoded instances.

    Graph-enhanced models evaluate each instance inside its own training-data
    neighborhood, one at a time, so test instances never influence each other.
    """
    task = cfg.task
    preds, golds, masks = [], [], []
    losses = []
    rng = np.random.default_rng(tcfg.seed + 7919)
    if flags["getr"]:
        by_id = {i.id: i for i in list(train_lrl) + list(train_hrl)}
        for k, inst in enumerate(instances):
            plan = inference_neighborhood(inst, train_lrl, train_hrl,
                                          tcfg.batch_size, tcfg.neighbors_n,
                                          seed=tcfg.seed * 100003 + k)
            members = [inst] + [by_id[i] for i in plan.ids[1:]]
            batch = _pad_batch(members, tcfg.max_len)
            out = _forward_batch(params, cfg, batch, flags, lexicon, rho, rng)
            _collect_instance(out, batch, 0, task, preds, golds, masks, losses,
                              collect_loss, num_labels)
    else:
        B = tcfg.batch_size
        for s in range(0, len(instances), B):
            chunk = instances[s:s + B]
            batch = _pad_batch(chunk, tcfg.max_len)
            out = _forward_batch(params, cfg, batch, flags, lexicon, rho, rng)
            for b in range(len(chunk)):
                _collect_instance(out, batch, b, task, preds, golds, masks, losses,
                                  collect_loss, num_labels)
    if task == SENTENCE_TASK:
        preds_arr, golds_arr, mask_arr = np.array(preds), np.array(golds), None
    else:
        preds_arr = np.concatenate(preds)
        golds_arr = np.concatenate(golds)
        mask_arr = None
    mean_loss = float(np.mean(losses)) if collect_loss else None
    return preds_arr, golds_arr, mask_arr, mean_loss


def _collect_instance(out, batch, b, task, preds, golds, masks, losses, collect_loss, num_labels):
    inst = batch["instances"][b]
    logits = out["logits"].data
    if task == SENTENCE_TASK:
        row = logits[b]
        preds.append(int(np.argmax(row)))
        golds.append(inst.sentence_label)
        if collect_loss:
            logp = row - np.log(np.exp(row - row.max()).sum()) - row.max()
            losses.append(float(-logp[inst.sentence_label]))
    else:
        tags = expand_tags_to_pieces(inst)
        npos = len(tags)
        rows = logits[b, 1:1 + npos]
        preds.append(np.argmax(rows, axis=-1))
        golds.append(np.asarray(tags))
        if collect_loss:
            shifted = rows - rows.max(axis=-1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            losses.append(float(-logp[np.arange(npos), tags].mean()))


def train_run(enc_cfg_base: dict, tcfg: TrainConfig, hrl: Dataset, lrl: Dataset,
              lexicon: Optional[Lexicon] = None):
    """Train one method end to end; returns ``(TrainedModel, MetricsReport)``.

    Fully deterministic per seed: batch plans, parameter init, update order,
    and metric computation all derive from ``tcfg.seed``.
    """
    flags = method_flags(tcfg.method)
    if flags["tet"] and lexicon is None:
        raise MissingPrerequisiteError("TET requires a lexicon")
    if isinstance(lexicon, dict):
        lexicon = Lexicon(lexicon)

    t0 = time.perf_counter()
    task = lrl.task
    label_set = lrl.label_set
    if not flags["scratch"] and hrl.label_set != label_set:
        raise ConfigError("HRL and LRL label sets must agree for transfer methods")

    # joint tokenizer over the training vocabularies in play
    words = [w for inst in lrl.splits["train"] for w in inst.words]
    if not flags["scratch"]:
        words += [w for inst in hrl.splits["train"] for w in inst.words]
    if tcfg.tokenizer_vocab_size is None:
        chars = {c for w in words for c in w}
        subs = {w[i:j] for w in set(words) for i in range(len(w)) for j in range(i + 2, len(w) + 1)}
        vocab_size = 3 + len(chars) + len(subs)
    else:
        vocab_size = tcfg.tokenizer_vocab_size
    tok = build_tokenizer(words, vocab_size)
    _encode_all((hrl, lrl) if not flags["scratch"] else (lrl,), tok, tcfg.max_len)

    # method decides which mechanisms are on; enc_cfg_base may still tune
    # their hyperparameters (depth, alpha, insertion point, ...)
    base = dict(enc_cfg_base)
    hal_over = dict(base.pop("hal", {}))
    getr_over = dict(base.pop("getr", {}))
    hal_over.pop("enabled", None)
    getr_over.pop("enabled", None)
    getr_over.setdefault("gnn_kind", flags["getr"] or "GAT")
    cfg = EncoderConfig(
        vocab_size=len(tok), num_labels=len(label_set), task=task,
        getr=GetrConfig(enabled=flags["getr"] is not None, **getr_over),
        hal=HalConfig(enabled=flags["hal"], **hal_over),
        seed=tcfg.seed,
        **base,
    )
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(cfg, rng)

    if flags["tet"]:
        lrl_vocab = sorted({w for inst in lrl.splits["train"] for w in inst.words})
        vectors, _report = tet_initialize(lrl_vocab, tok, tok, params["tok_emb"].data, lexicon)
        apply_tet_vectors(params, vectors)

    opt = AdamW(params, lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay)
    report = MetricsReport(method=tcfg.method, seed=tcfg.seed,
                           parameter_count=count_parameters(cfg))

    lrl_train = lrl.splits["train"]
    hrl_train = hrl.splits["train"] if not flags["scratch"] else []
    strategic = tcfg.strategic_fraction if flags["getr"] else 0.0
    if flags["scratch"]:
        batches_per_epoch = max(1, len(lrl_train) // min(tcfg.batch_size, len(lrl_train)))
    else:
        batches_per_epoch = tcfg.batches_per_epoch or max(1, len(hrl_train) // (tcfg.batch_size // 2))
    total_steps = tcfg.epochs * batches_per_epoch

    by_id = {i.id: i for i in lrl_train + hrl_train}
    best_params = None
    step = 0
    for epoch in range(tcfg.epochs):
        ep_start = time.perf_counter()
        train_losses = []
        if flags["scratch"]:
            order = np.arange(len(lrl_train))
            rng_e = np.random.default_rng(tcfg.seed * 1000 + epoch)
            rng_e.shuffle(order)
            bs = min(tcfg.batch_size, len(lrl_train))
            batch_members = [[lrl_train[i] for i in order[s:s + bs]]
                             for s in range(0, len(order), bs)][:batches_per_epoch]
        else:
            plan = plan_epoch(lrl_train, hrl_train, tcfg.batch_size, tcfg.neighbors_n,
                              seed=tcfg.seed * 1000 + epoch, strategic_fraction=strategic,
                              num_batches=batches_per_epoch)
            batch_members = [[by_id[i] for i in b.ids] for b in plan.batches]

        for bi, members in enumerate(batch_members):
            batch = _pad_batch(members, tcfg.max_len)
            labels, loss_mask = _batch_labels(batch, task, cfg.num_labels)
            pairs = _hal_pairs(batch, rng) if flags["hal"] else None
            if cfg.hal.alpha_mode == "dynamic":
                alpha = dynamic_alpha(step, total_steps)
            else:
                alpha = cfg.hal.alpha
            with Tape() as tape:
                out = _forward_batch(params, cfg, batch, flags, lexicon, tcfg.rho, rng,
                                     pairs=pairs, alpha=alpha)
                loss = cross_entropy_loss(out["logits"], labels, loss_mask)
                if pairs and "aug_logits" in out:
                    soft, aug_mask = _mixed_soft_labels(batch, pairs, alpha, task, cfg.num_labels)
                    aug = kl_divergence_loss(out["aug_logits"], soft, aug_mask)
                    loss = nm.add(loss, nm.scale(aug, tcfg.lambda_aug))
                lv = loss.item()
                if not np.isfinite(lv):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
                backward(loss, tape)
            opt.step()
            opt.zero_grad()
            train_losses.append(lv)
            step += 1

        val_insts = lrl.splits["validation"]
        vp, vg, vm, val_loss = _predict(params, cfg, val_insts, flags, lexicon, tcfg.rho,
                                        lrl_train, hrl_train, tcfg, collect_loss=True,
                                        num_labels=cfg.num_labels)
        val_f1, _ = macro_f1(vp, vg, label_set, vm)
        report.epochs.append({
            "epoch": epoch,
            "train_loss": float(np.mean(train_losses)),
            "val_loss": val_loss,
            "val_macro_f1": val_f1,
        })
        report.timing.setdefault("epoch_seconds", []).append(time.perf_counter() - ep_start)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_params = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in params.items()}

    params = best_params if best_params is not None else params
    for split in ("validation", "test"):
        insts = lrl.splits[split]
        if not insts:
            continue
        p, gold, m, _ = _predict(params, cfg, insts, flags, lexicon, tcfg.rho,
                                 lrl_train, hrl_train, tcfg)
        f1, per_class = macro_f1(p, gold, label_set, m)
        report.split_macro_f1[split] = f1
        report.per_class_f1[split] = per_class
    report.timing["total_seconds"] = time.perf_counter() - t0

    model = TrainedModel(cfg, params, tok, label_set, tcfg, lexicon)
    return model, report


def evaluate_model(model: TrainedModel, instances, hrl_train, lrl_train):
    """Macro-F1 of a trained model on freshly supplied encoded instances."""
    flags = method_flags(model.train_cfg.method)
    p, g, m, _ = _predict(model.params, model.cfg, instances, flags, model.lexicon,
                          model.train_cfg.rho, lrl_train, hrl_train, model.train_cfg)
    return macro_f1(p, g, model.label_set, m)
