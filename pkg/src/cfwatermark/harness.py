"""Bootstrap evaluation, ablations and robustness sweeps.

One evaluation trains the proprietary model, draws B bootstrap subsets of M
test rows and, for each subset, runs every configured attack against a fresh
defender session, then verifies each extracted model against the defender's
retained CF pairs. CF-using attacks are the ground-truth positives.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import dataio, explain, extract, nnmodel, verify
from . import watermark as wm
from ._backend import BACKEND
from .nnmodel import TrainConfig
from .rng import derive_seed

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _sub(cls, doc, name):
    if doc is None:
        return cls()
    if isinstance(doc, cls):
        return doc
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "blobs"
    schema: str | None = None
    dataset_options: dict = field(default_factory=dict)
    test_fraction: float = 0.2
    model: TrainConfig = field(default_factory=TrainConfig)
    attacker: TrainConfig = field(default_factory=TrainConfig)
    explainer: explain.CfConfig = field(default_factory=explain.CfConfig)
    watermark: wm.WatermarkConfig = field(default_factory=wm.WatermarkConfig)
    attacks: tuple = extract.ATTACKS
    B: int = 20
    M: int = 64
    tau: float = verify.DEFAULT_TAU
    alpha: float = verify.DEFAULT_ALPHA
    n_verify: int = verify.DEFAULT_MAX_PAIRS
    finetune_epochs: tuple = (0, 2, 5, 10)
    finetune_lr: float = 0.01
    prune_rates: tuple = (0.0, 0.2, 0.4, 0.5, 0.6)
    lambda3_values: tuple = (0.0, 0.5, 1.0)
    per_round_dual: bool = False
    seed: int = 0

    def __post_init__(self):
        for a in self.attacks:
            if a not in extract.ATTACKS:
                raise ConfigError(f"unknown attack {a!r}")
        if not self.attacks:
            raise ConfigError("attack list is empty")
        if self.B < 1 or self.M < 2 or self.M % 2:
            raise ConfigError("B must be >= 1 and M an even number >= 2")
        if self.n_verify < 2:
            raise ConfigError("n_verify must be >= 2")
        object.__setattr__(self, "attacks", tuple(self.attacks))
        for name in ("finetune_epochs", "prune_rates", "lambda3_values"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        doc = dict(doc)
        nested = {"model": TrainConfig, "attacker": TrainConfig, "explainer": explain.CfConfig,
                  "watermark": wm.WatermarkConfig}
        for key, cls_ in nested.items():
            doc[key] = _sub(cls_, doc.get(key), key)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# shared setup


@dataclass
class Context:
    cfg: ExperimentConfig
    train: dataio.TabularDataset
    test: dataio.TabularDataset
    model: nnmodel.MlpParams
    mask: np.ndarray
    pool: dataio.AttackPool

    def service(self, watermark: bool = True) -> extract.DefenderService:
        c = self.cfg
        return extract.DefenderService(self.model, c.explainer, c.watermark, self.train.X, self.train.y,
                                       self.mask, seed=c.seed, watermark=watermark,
                                       per_round_dual=c.per_round_dual,
                                       provenance={"experiment_digest": c.digest(), "dataset": c.dataset})


def load_dataset(cfg: ExperimentConfig):
    if cfg.schema is not None:
        raw = dataio.load_csv(cfg.dataset, cfg.schema)
        name = Path(cfg.dataset).stem
    else:
        raw = dataio.load_builtin(cfg.dataset, seed=cfg.seed, **cfg.dataset_options)
        name = cfg.dataset
    return dataio.fit_transform(raw, split_seed=cfg.seed, test_fraction=cfg.test_fraction, name=name)


def setup(cfg: ExperimentConfig) -> Context:
    train, test = load_dataset(cfg)
    model = nnmodel.train(train.X, train.y, cfg.model)
    pool = dataio.bootstrap(test, cfg.B, cfg.M, cfg.seed)
    return Context(cfg, train, test, model, dataio.immutable_mask(train), pool)


# ---------------------------------------------------------------------------
# one bootstrap subset


def _suspect_poison(model, x_cf, x_wm, labels) -> float:
    if x_cf.shape[0] == 0:
        return float("nan")
    return wm.poison_loss(model, x_cf, x_wm - x_cf, labels)


def _attack_training_data(tr: extract.AttackTranscript):
    """Rows and labels the attacker trained on (used for fine-tuning sweeps)."""
    if tr.kind == "querying":
        return tr.x_query, None
    if tr.kind == "mrce":
        b = tr.served[0]
        return np.vstack([tr.x_query, b.x_wm]), np.concatenate([np.full(tr.x_query.shape[0], np.nan), b.labels])
    return np.vstack([b.x_wm for b in tr.served]), np.concatenate([b.labels for b in tr.served])


def run_subset(ctx: Context, b: int, keep_models: bool = False) -> dict:
    """All attacks on subset ``b``; returns run records, CF quality and theta artifacts."""
    cfg = ctx.cfg
    svc = ctx.service()
    rows = ctx.test.X[ctx.pool.subsets[b]]
    half = rows[: cfg.M // 2]
    # the defender's watermark for this subset: CFs of the first M/2 rows
    reference = svc.session((b,)).counterfactuals(half)
    runs, models, failures = [], {}, []
    for kind in cfg.attacks:
        try:
            session = svc.session((b,) if kind == "mrce" else (b, kind))
            tr = extract.run_attack(kind, session, rows, cfg.M, cfg.attacker)
            x_cf, x_wm, labels = ((reference.x_cf, reference.x_wm, reference.labels) if kind != "dualcf"
                                  else tr.verification_pairs())
            res = verify.verify_ownership(tr.model, x_cf, x_wm, labels, cfg.tau, cfg.alpha, cfg.n_verify,
                                          seed=cfg.seed)
            runs.append({
                "subset": b, "attack": kind, "truth": tr.positive, "decision": res.positive,
                "p_value": res.p_value, "t_stat": res.t_stat, "mean_diff": res.mean_diff,
                "sd_diff": res.sd_diff, "n": res.n,
                "poison": _suspect_poison(tr.model, x_cf, x_wm, labels),
                "agreement": nnmodel.agreement(tr.model, ctx.model, ctx.test.X),
                "queries": tr.log.to_dict(),
            })
            if keep_models:
                X_att, y_att = _attack_training_data(tr)
                models[kind] = {"model": nnmodel.to_dict(tr.model), "pairs": (x_cf, x_wm, labels),
                                "train": (X_att, y_att)}
        except Exception as exc:  # a failing run is recorded, the rest continue
            log.exception("subset %d attack %s failed", b, kind)
            failures.append({"subset": b, "attack": kind, "error": f"{type(exc).__name__}: {exc}"})
    quality = cf_quality(ctx.model, reference.x_src, reference.x_cf, reference.x_wm, reference.labels)
    theta = reference.theta
    return {"subset": b, "runs": runs, "failures": failures, "quality": quality,
            "theta": theta.to_dict(), "trace": theta.trace, "models": models}


def cf_quality(model, x_src, x_cf, x_wm, labels) -> dict:
    batch = explain.CfBatch(x_src, x_cf, labels, np.ones(len(labels), dtype=bool))
    return {
        "n": int(x_cf.shape[0]),
        "validity": explain.validity(batch, model),
        "validity_wm": explain.validity(batch, model, x_wm),
        "proximity": explain.proximity(batch),
        "proximity_wm": explain.proximity(batch, x_wm),
    }


# ---------------------------------------------------------------------------
# reports


def confusion(runs: list) -> dict:
    c = {"TP": 0, "FP": 0, "TN": 0, "FN": 0}
    for r in runs:
        key = ("T" if r["decision"] == r["truth"] else "F") + ("P" if r["decision"] else "N")
        c[key] += 1
    return c


def f1_score(c: dict) -> float:
    denom = 2 * c["TP"] + c["FP"] + c["FN"]
    return 2 * c["TP"] / denom if denom else float("nan")


def rates(c: dict) -> dict:
    pos, neg = c["TP"] + c["FN"], c["TN"] + c["FP"]
    return {"tpr": c["TP"] / pos if pos else float("nan"), "fpr": c["FP"] / neg if neg else float("nan")}


def _pct_change(before: float, after: float) -> float:
    return 100.0 * (after - before) / before if before else float("nan")


def quality_table(qualities: list) -> dict:
    n = sum(q["n"] for q in qualities)
    if not n:
        return {}
    avg = {k: sum(q[k] * q["n"] for q in qualities) / n
           for k in ("validity", "validity_wm", "proximity", "proximity_wm")}
    avg["validity_change_pp"] = 100.0 * (avg["validity_wm"] - avg["validity"])
    avg["validity_change_pct"] = _pct_change(avg["validity"], avg["validity_wm"])
    avg["proximity_change_pct"] = _pct_change(avg["proximity"], avg["proximity_wm"])
    avg["n"] = n
    return avg


@dataclass
class Report:
    config: dict
    confusion: dict
    per_attack: dict
    f1: float
    cf_quality: dict
    runs: list
    failures: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    robustness: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def to_dict(self) -> dict:
        return _clean({
            "config": self.config,
            "config_digest": ExperimentConfig.from_dict(self.config).digest(),
            "backend": BACKEND,
            "f1": self.f1,
            "confusion": self.confusion,
            "per_attack": self.per_attack,
            "cf_quality": self.cf_quality,
            "robustness": self.robustness,
            "extras": self.extras,
            "failures": self.failures,
            "runs": self.runs,
        })


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats become null."""
    obj = nnmodel._jsonable(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def summarize(cfg: ExperimentConfig, results: list) -> Report:
    results = sorted(results, key=lambda r: r["subset"])
    runs = [r for res in results for r in res["runs"]]
    failures = [f for res in results for f in res["failures"]]
    per_attack = {}
    for kind in cfg.attacks:
        c = confusion([r for r in runs if r["attack"] == kind])
        per_attack[kind] = {**c, **rates(c),
                            "mean_poison": float(np.nanmean([r["poison"] for r in runs if r["attack"] == kind]))
                            if any(r["attack"] == kind for r in runs) else float("nan")}
    total = confusion(runs)
    return Report(cfg.to_dict(), total, per_attack, f1_score(total),
                  quality_table([res["quality"] for res in results]), runs, failures,
                  [res["theta"] for res in results], [res["trace"] for res in results])


_WORKER_CTX: dict = {}


def _worker_init(cfg_doc):
    _WORKER_CTX["ctx"] = setup(ExperimentConfig.from_dict(cfg_doc))


def _worker_run(args):
    b, keep = args
    return _safe_subset(_WORKER_CTX["ctx"], b, keep)


def _safe_subset(ctx, b, keep):
    try:
        return run_subset(ctx, b, keep)
    except Exception as exc:
        log.exception("subset %d failed", b)
        return {"subset": b, "runs": [], "quality": {"n": 0}, "theta": {}, "trace": [], "models": {},
                "failures": [{"subset": b, "attack": "*", "error": f"{type(exc).__name__}: {exc}"}]}


def _run_subsets(cfg: ExperimentConfig, workers: int, keep_models: bool, ctx: Context | None = None):
    if workers > 1 and cfg.B > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(cfg.to_dict(),)) as ex:
            return list(ex.map(_worker_run, [(b, keep_models) for b in range(cfg.B)]))
    ctx = ctx or setup(cfg)
    return [_safe_subset(ctx, b, keep_models) for b in range(cfg.B)]


def run_evaluation(cfg: ExperimentConfig, workers: int = 1) -> Report:
    """Full bootstrap protocol: B subsets x attacks, each verified once."""
    return summarize(cfg, _run_subsets(cfg, workers, keep_models=False))


def run_ablation_losses(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """F1 and CF-quality change for every (poison form, validity form) pair."""
    rows = []
    for pf in wm.LOSS_FORMS:
        for vf in wm.LOSS_FORMS:
            sub = replace(cfg, watermark=replace(cfg.watermark, poison_form=pf, validity_form=vf))
            rep = run_evaluation(sub, workers)
            q = rep.cf_quality
            rows.append({"poison_form": pf, "validity_form": vf, "f1": rep.f1,
                         "validity_change_pct": q.get("validity_change_pct"),
                         "proximity_change_pct": q.get("proximity_change_pct"),
                         "failures": len(rep.failures)})
    return rows


def run_ablation_regularization(cfg: ExperimentConfig, values=None, workers: int = 1) -> list[dict]:
    """Confusion counts and mean suspect poison loss per attack for each lambda3."""
    values = cfg.lambda3_values if values is None else tuple(values)
    rows = []
    for lam in values:
        sub = replace(cfg, watermark=replace(cfg.watermark, lambda3=float(lam)))
        rep = run_evaluation(sub, workers)
        rows.append({"lambda3": float(lam), "f1": rep.f1, "confusion": rep.confusion,
                     **rates(rep.confusion), "per_attack": rep.per_attack,
                     "failures": len(rep.failures)})
    return rows


def _finetune_data(X, y, suspect):
    # attacker-side relabelling for rows whose label came from a query
    y = np.where(np.isnan(y), nnmodel.predict_proba(suspect, X), y) if y is not None else \
        nnmodel.predict_proba(suspect, X)
    return X, y


def run_robustness(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """Fine-tuning and pruning sweeps over every positive (CF-using) extracted model.

    Fine-tuning continues training on the attacker's own training set, with
    query rows relabelled by the suspect's current scores. Each derived
    model is verified against the same pairs as the original.
    """
    ctx = setup(cfg)
    results = _run_subsets(cfg, workers, keep_models=True, ctx=ctx)
    base = summarize(cfg, results)
    suspects = []
    for res in results:
        for kind, m in res["models"].items():
            if kind in extract.CF_ATTACKS:
                suspects.append((res["subset"], kind, nnmodel.from_dict(m["model"]), m["pairs"], m["train"]))

    def verdicts(derive):
        pos, agree = [], []
        for b, kind, model, (x_cf, x_wm, lab), train in suspects:
            sus = derive(b, kind, model, train)
            r = verify.verify_ownership(sus, x_cf, x_wm, lab, cfg.tau, cfg.alpha, cfg.n_verify, seed=cfg.seed)
            pos.append(r.positive)
            agree.append(nnmodel.agreement(sus, ctx.model, ctx.test.X))
        n = len(pos)
        return {"tpr": sum(pos) / n if n else float("nan"),
                "agreement": float(np.mean(agree)) if n else float("nan"), "n": n}

    finetune = []
    for ep in cfg.finetune_epochs:
        def derive(b, kind, model, train, ep=ep):
            X, y = _finetune_data(*train, model)
            return nnmodel.finetune(model, X, y, ep, cfg.finetune_lr, seed=derive_seed(cfg.seed, "finetune", b, kind))
        finetune.append({"epochs": ep, **verdicts(derive)})
    prune = []
    for rate in cfg.prune_rates:
        prune.append({"rate": rate, **verdicts(lambda b, kind, model, train, rate=rate: nnmodel.prune(model, rate))})
    base.robustness = {"baseline_tpr": rates(confusion([r for r in base.runs if r["truth"]]))["tpr"],
                       "finetune": finetune, "prune": prune}
    return base


# ---------------------------------------------------------------------------
# output


def emit_report(report: Report, out_dir) -> dict:
    """Write report.json, tables.csv, runs.jsonl, config.json plus theta and trace artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    paths = {"report": out / "report.json", "tables": out / "tables.csv", "runs": out / "runs.jsonl",
             "config": out / "config.json"}
    paths["report"].write_text(json.dumps(doc, indent=2) + "\n")
    paths["config"].write_text(json.dumps(report.config, indent=2, sort_keys=True) + "\n")
    with open(paths["runs"], "w") as fh:
        for r in doc["runs"]:
            fh.write(json.dumps(r) + "\n")
    with open(paths["tables"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["table", "key", "value"])
        w.writerow(["detection", "f1", repr(report.f1)])
        for k, v in report.confusion.items():
            w.writerow(["detection", k, v])
        for kind, stats in doc["per_attack"].items():
            for k, v in stats.items():
                w.writerow([f"attack:{kind}", k, v])
        for k, v in doc["cf_quality"].items():
            w.writerow(["cf_quality", k, v])
    art = out / "artifacts"
    art.mkdir(exist_ok=True)
    for i, (theta, trace) in enumerate(zip(report.thetas, report.traces)):
        if theta:
            (art / f"theta_{i:03d}.json").write_text(json.dumps(_clean(theta)))
        wm.write_trace(trace, art / f"trace_{i:03d}.jsonl")
    return {k: str(v) for k, v in paths.items()}


def write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_clean(obj), indent=2) + "\n")


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
