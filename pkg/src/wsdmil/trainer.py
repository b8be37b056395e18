"""Cross-validated training, evaluation and the memory benchmark."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .estimator import WSDMILClassifier
from .model import WsdModel
from .metrics import accuracy, f1, roc_auc, summarize
from .sampler import DEFAULT_CLUSTERS, ClusterSampler, SampledSequence

logger = logging.getLogger(__name__)

DEFAULT_LR = 1e-5
DEFAULT_EPOCHS = 100
DEFAULT_FOLDS = 5


@dataclass
class TrainConfig:
    lr: float = DEFAULT_LR
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = 1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    folds: int = DEFAULT_FOLDS
    seed: int = 0
    alpha: float = 20.0
    n_clusters: int = DEFAULT_CLUSTERS

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if not 0 < self.alpha <= 100:
            raise ValueError(f"alpha must be in (0, 100], got {self.alpha}")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class FoldResult:
    fold: int
    acc: float
    auc: float
    f1: float
    peak_bytes: int
    n_test: int = 0


@dataclass
class FoldReport:
    folds: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_folds(cls, folds: Sequence[FoldResult], metadata: Optional[dict] = None) -> "FoldReport":
        rep = cls(list(folds), {}, {}, dict(metadata or {}))
        for key in ("acc", "auc", "f1", "peak_bytes"):
            mu, sd = summarize([getattr(f, key) for f in folds])
            rep.mean[key], rep.std[key] = mu, sd
        return rep

    def to_dict(self) -> dict:
        return {"folds": [asdict(f) for f in self.folds], "mean": self.mean,
                "std": self.std, "metadata": self.metadata}

    def to_json(self) -> str:
        # NaN (undefined AUC) is emitted as null
        def clean(x):
            if isinstance(x, float) and x != x:
                return None
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            return x

        return json.dumps(clean(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldReport":
        d = json.loads(text)
        nan = float("nan")
        folds = [FoldResult(**{k: (nan if v is None else v) for k, v in f.items()}) for f in d["folds"]]
        fix = lambda m: {k: (nan if v is None else v) for k, v in m.items()}  # noqa: E731
        return cls(folds, fix(d["mean"]), fix(d["std"]), d.get("metadata", {}))


def evaluate(estimator: WSDMILClassifier, seqs: Sequence[SampledSequence], fold: int = 0) -> FoldResult:
    """Acc by arg-max, rank AUC (NaN for single-class sets), F1, and peak bytes."""
    y = np.array([s.label for s in seqs])
    proba = estimator.predict_proba(seqs)
    pred = estimator.classes_[proba.argmax(1)]
    num_classes = proba.shape[1]
    if num_classes == 2:
        auc = roc_auc(y == estimator.classes_[1], proba[:, 1])
    else:
        per = [roc_auc(y == c, proba[:, j]) for j, c in enumerate(estimator.classes_)]
        auc = summarize(per)[0]
    peak = max(estimator.train_step_peak_bytes(s) for s in seqs)
    return FoldResult(fold, accuracy(y, pred), auc, f1(y, pred, num_classes), int(peak), len(seqs))


def stratified_folds(labels, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    labels = np.asarray(labels)
    if labels.size < folds:
        raise ValueError(f"cannot split {labels.size} bags into {folds} folds")
    _, counts = np.unique(labels, return_counts=True)
    if counts.min() < folds:
        raise ValueError(f"every class needs at least {folds} bags for stratified folds")
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    return list(skf.split(np.zeros(labels.size), labels))


def make_estimator(train_cfg: TrainConfig, **model_params) -> WSDMILClassifier:
    return WSDMILClassifier(lr=train_cfg.lr, epochs=train_cfg.epochs, betas=train_cfg.betas,
                            eps=train_cfg.eps, alpha=train_cfg.alpha,
                            n_clusters=train_cfg.n_clusters, random_state=train_cfg.seed,
                            **model_params)


def run_cv(bags, train_cfg: TrainConfig, jobs: int = 1, return_models: bool = False,
           **model_params):
    """Stratified k-fold CV: sample every bag once, train per fold, evaluate.

    ``model_params`` are :class:`WSDMILClassifier` architecture parameters
    (ablation flags, aggregator, ...). Returns a :class:`FoldReport`, plus
    the fitted estimators when ``return_models`` is set.
    """
    sampler = ClusterSampler(train_cfg.alpha, train_cfg.n_clusters,
                             model_params.get("window_base", 4), train_cfg.seed)
    seqs = sampler.fit(bags).transform(bags)
    labels = np.array([s.label for s in seqs])
    splits = stratified_folds(labels, train_cfg.folds, train_cfg.seed)

    def one(fold):
        tr, te = splits[fold]
        est = make_estimator(train_cfg, **model_params)
        est.set_params(random_state=train_cfg.seed * 1000 + fold)
        est.fit([seqs[i] for i in tr])
        res = evaluate(est, [seqs[i] for i in te], fold)
        logger.info("fold %d: acc %.3f auc %.3f f1 %.3f", fold, res.acc, res.auc, res.f1)
        return res, est

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, range(train_cfg.folds)))
    else:
        results = [one(f) for f in range(train_cfg.folds)]
    meta = {"seed": train_cfg.seed, "train_config": train_cfg.to_dict(),
            "model_params": {k: v for k, v in model_params.items()},
            "num_bags": len(seqs)}
    report = FoldReport.from_folds([r for r, _ in results], meta)
    if return_models:
        return report, [e for _, e in results]
    return report


def bench_memory(bags, alphas: Sequence[float], seed: int = 0, n_clusters: int = DEFAULT_CLUSTERS,
                 **model_params) -> list[dict]:
    """Peak live tensor bytes of one forward+backward per bag at each alpha.

    Rows are ordered by decreasing alpha; ``ratio`` is relative to alpha=100
    (measured even if 100 is not requested).
    """
    alphas = sorted({float(a) for a in alphas}, reverse=True)
    if not alphas:
        raise ValueError("need at least one alpha")
    for a in alphas:
        if not 0 < a <= 100:
            raise ValueError(f"alpha must be in (0, 100], got {a}")
    measure = alphas if alphas[0] == 100.0 else [100.0] + alphas
    est = None
    peaks = {}
    for a in measure:
        seqs = ClusterSampler(a, n_clusters, model_params.get("window_base", 4), seed).transform(bags)
        if est is None:
            cfg = WSDMILClassifier(**model_params).make_config(seqs[0].features.shape[-1], 2)
            est = WSDMILClassifier.from_model(WsdModel(cfg, seed=seed))
        peaks[a] = max(est.train_step_peak_bytes(s) for s in seqs)
    base = peaks[100.0]
    return [{"alpha": a, "peak_bytes": int(peaks[a]), "ratio": peaks[a] / base} for a in alphas]
