"""End-to-end synthetic experiment: calibration, test phase, LfD conditions, report.

A run directory holds every artifact; each stage reads what the previous one
wrote, so stages can be re-run individually from the command line.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as mt
from . import model as mm
from .demonstrators import MAX_SHIFT, NOISE_SIGMA, LabelSequence, StyleProfile, corrupt, read_manifest, sample_style, write_manifest
from .policy import CONDITIONS, PolicyConfig, StyledExpert, run_dagger
from .world import Trajectory, World, make_calibration_rollouts, planner_labels, random_world, trajectory_labels

log = logging.getLogger(__name__)

REFERENCE = {"calibration": 0.61, "holdout": 0.55, "magnitude_corr": -0.69, "timing_corr": 0.70}


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    seed: int = 0
    m_train: int = 32
    n_test: int = 8
    calibration_tasks: int = 12
    holdout_tasks: tuple[int, ...] = (12, 13, 14, 15)
    styles: str = "random"  # random | identity
    label_source: str = "bearing"  # bearing | planner
    world_size: float = 30.0
    rollout_noise: float = 1.0
    rollout_steps: int = 120
    max_shift: int = MAX_SHIFT
    noise_sigma: float = NOISE_SIGMA
    # model
    window: int = mm.WINDOW
    stride: int = 4
    lr: float = 1e-3
    embed_lr: float = 1e-2
    mi_weight: float = 0.1
    batch_size: int = 64
    epochs: int = 200
    patience: int = 20
    min_delta: float = 1e-4
    infer_lr: float = 0.01
    infer_steps: int = 300
    holdout_mode: str = "frozen"  # frozen | joint
    joint_epochs: int = 10
    # LfD conditions
    condition_demonstrators: int = 8
    dagger_iters: int = 5
    dagger_rollouts: int = 2
    demo_rollouts: int = 4
    policy_epochs: int = 300
    eval_starts: int = 20
    # acceptance thresholds
    min_calibration: float = 0.5
    min_holdout: float = 0.4
    min_test: float = 0.4
    min_abs_corr: float = 0.6
    min_probe: float = 0.7

    def __post_init__(self):
        self.holdout_tasks = tuple(int(k) for k in self.holdout_tasks)
        self.validate()

    def validate(self) -> None:
        if self.m_train < 1 or self.n_test < 0 or self.calibration_tasks < 1:
            raise ValueError("need m_train >= 1, n_test >= 0 and calibration_tasks >= 1")
        if set(self.holdout_tasks) & set(self.calibration_task_ids):
            raise ValueError("holdout tasks overlap calibration tasks")
        if self.styles not in ("random", "identity"):
            raise ValueError(f"unknown styles {self.styles!r}")
        if self.label_source not in ("bearing", "planner"):
            raise ValueError(f"unknown label_source {self.label_source!r}")
        if self.holdout_mode not in ("frozen", "joint"):
            raise ValueError(f"unknown holdout_mode {self.holdout_mode!r}")

    @property
    def calibration_task_ids(self) -> list[int]:
        return list(range(self.calibration_tasks))

    @property
    def train_ids(self) -> list[int]:
        return list(range(self.m_train))

    @property
    def test_ids(self) -> list[int]:
        return list(range(self.m_train, self.m_train + self.n_test))

    def train_config(self) -> mm.TrainConfig:
        return mm.TrainConfig(
            lr=self.lr, embed_lr=self.embed_lr, mi_weight=self.mi_weight, batch_size=self.batch_size,
            epochs=self.epochs, patience=self.patience, min_delta=self.min_delta,
            infer_lr=self.infer_lr, infer_steps=self.infer_steps,
        )

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            epochs=self.policy_epochs, demo_rollouts=self.demo_rollouts, dagger_iters=self.dagger_iters,
            dagger_rollouts=self.dagger_rollouts, eval_starts=self.eval_starts,
        )

    # key=value text
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        values.update({k: str(v) for k, v in overrides.items()})
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            default = known[key].default
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(x) for x in val.replace(",", " ").split())
            elif isinstance(default, bool):
                kwargs[key] = val.lower() in ("1", "true", "yes")
            else:
                kwargs[key] = type(default)(val)
        return cls(**kwargs)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


# ---------------------------------------------------------------- run directory


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def reports(self) -> Path:
        return self.path("reports")

    def config(self) -> ExperimentConfig:
        return ExperimentConfig.load(self.require("config.txt", "gen"))

    def require(self, rel: str, stage: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise StageError(f"missing {rel}: run the '{stage}' stage first")
        return p

    def manifest(self) -> dict:
        p = self.path("manifest.json")
        return json.loads(p.read_text()) if p.exists() else {}

    def mark(self, stage: str, **info) -> None:
        m = self.manifest()
        m.setdefault("stages", {})[stage] = {"finished": time.strftime("%Y-%m-%dT%H:%M:%S"), **info}
        self.path("manifest.json").write_text(json.dumps(m, indent=1, sort_keys=True))


def label_path(run: RunDir, p: int, k: int) -> Path:
    return run.path("labels", f"p{p:03d}_t{k:02d}.csv")


# ---------------------------------------------------------------- generation


def make_styles(cfg: ExperimentConfig) -> list[StyleProfile]:
    ids = cfg.train_ids + cfg.test_ids
    if cfg.styles == "identity":
        return [StyleProfile(p, 0, 1.0, cfg.noise_sigma, cfg.seed) for p in ids]
    return [sample_style(cfg.seed * 100_003 + p, id=p, max_shift=cfg.max_shift, noise_sigma=cfg.noise_sigma) for p in ids]


def make_task(cfg: ExperimentConfig, task_id: int) -> tuple[World, Trajectory, np.ndarray]:
    """World, rollout and ground-truth labels for one task (retries short rollouts)."""
    for attempt in range(100):
        world = random_world(np.random.default_rng([cfg.seed, task_id, attempt]), cfg.world_size)
        traj = make_calibration_rollouts(
            world, 1, seed=cfg.seed * 1000 + task_id + 100_000 * attempt,
            noise_scale=cfg.rollout_noise, max_steps=cfg.rollout_steps,
        )[0]
        if len(traj) >= 2 * cfg.window:
            break
    else:
        raise StageError(f"task {task_id}: could not produce a rollout of {2 * cfg.window} steps")
    if cfg.label_source == "planner":
        o = planner_labels(traj, world, seed=cfg.seed * 1000 + task_id)
    else:
        o = trajectory_labels(traj, world)
    return world, traj, o


def generate(cfg: ExperimentConfig, out) -> RunDir:
    run = RunDir(out)
    for sub in ("tasks", "labels", "model", "reports"):
        run.path(sub).mkdir(parents=True, exist_ok=True)
    run.path("config.txt").write_text(cfg.to_text())
    m = {"seed": cfg.seed, "package_version": __version__, "numpy": np.__version__, "python": platform.python_version()}
    run.path("manifest.json").write_text(json.dumps(m, indent=1, sort_keys=True))
    styles = make_styles(cfg)
    write_manifest(styles, run.path("styles.json"))
    for k in cfg.calibration_task_ids + list(cfg.holdout_tasks):
        world, traj, o = make_task(cfg, k)
        run.path("tasks", f"task_{k:02d}.json").write_text(json.dumps(world.to_json()))
        traj.write_csv(run.path("tasks", f"task_{k:02d}.csv"))
        for st in styles:
            corrupt(o, st, seed=cfg.seed, task_id=k).write_csv(label_path(run, st.id, k))
    run.mark("gen", tasks=cfg.calibration_tasks + len(cfg.holdout_tasks), demonstrators=len(styles))
    return run


def load_sequences(run: RunDir, ids, tasks) -> list[LabelSequence]:
    out = []
    for p in ids:
        for k in tasks:
            path = run.require(str(label_path(run, p, k).relative_to(run.root)), "gen")
            out.append(LabelSequence.read_csv(path, demonstrator_id=p, task_id=k))
    return out


def windows_for(seqs, cfg: ExperimentConfig) -> mm.WindowBatch:
    return mm.WindowBatch.concat(
        [mm.make_windows(s, cfg.window, stride=cfg.stride, offset=i) for i, s in enumerate(seqs)]
    )


# ---------------------------------------------------------------- improvement


@dataclass
class ImprovementRow:
    demonstrator_id: int
    raw_error: float
    corrected_error: float

    @property
    def improvement(self) -> float:
        return 1.0 - self.corrected_error / self.raw_error if self.raw_error > 0 else math.nan


@dataclass
class ImprovementReport:
    rows: list[ImprovementRow] = field(default_factory=list)

    @property
    def mean(self) -> float:
        vals = [r.improvement for r in self.rows if not math.isnan(r.improvement)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def std(self) -> float:
        vals = [r.improvement for r in self.rows if not math.isnan(r.improvement)]
        return float(np.std(vals)) if vals else math.nan

    @property
    def pooled(self) -> float:
        """Improvement of total error summed over demonstrators."""
        raw = sum(r.raw_error for r in self.rows)
        return 1.0 - sum(r.corrected_error for r in self.rows) / raw if raw > 0 else math.nan

    HEADER = ["demonstrator_id", "raw_error", "corrected_error", "improvement"]

    def write(self, path) -> None:
        rows = [dict(demonstrator_id=r.demonstrator_id, raw_error=r.raw_error, corrected_error=r.corrected_error,
                     improvement=r.improvement) for r in self.rows]
        mt.write_rows(path, self.HEADER, rows)

    @classmethod
    def read(cls, path) -> "ImprovementReport":
        with open(path, newline="") as fh:
            return cls([ImprovementRow(int(r["demonstrator_id"]), float(r["raw_error"]), float(r["corrected_error"]))
                        for r in csv.DictReader(fh)])


def improvement(params: mm.MindMeldParams, embeddings: dict[int, np.ndarray], seqs, window: int) -> ImprovementReport:
    by_id: dict[int, list] = {}
    for s in seqs:
        by_id.setdefault(s.demonstrator_id, []).append(s)
    report = ImprovementReport()
    for p in sorted(by_id):
        raw = np.concatenate([np.abs(s.a - s.o) for s in by_id[p]])
        fixed = np.concatenate([np.abs(mm.correct_labels(params, embeddings[p], s, window) - s.o) for s in by_id[p]])
        report.rows.append(ImprovementRow(p, float(raw.mean()), float(fixed.mean())))
    return report


def write_embeddings(path, table: dict[int, np.ndarray], styles: dict[int, StyleProfile]) -> None:
    dim = len(next(iter(table.values()))) if table else mm.EMBED_DIM
    header = ["demonstrator_id", *[f"w{i}" for i in range(dim)], "timing", "magnitude"]
    rows = []
    for p in sorted(table):
        row = {"demonstrator_id": p, "timing": styles[p].timing, "magnitude": styles[p].magnitude}
        row.update({f"w{i}": float(v) for i, v in enumerate(table[p])})
        rows.append(row)
    mt.write_rows(path, header, rows)


def read_embeddings(path) -> dict[int, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for r in rows:
        keys = sorted((k for k in r if k.startswith("w") and k[1:].isdigit()), key=lambda k: int(k[1:]))
        out[int(r["demonstrator_id"])] = np.array([float(r[k]) for k in keys])
    return out


# ---------------------------------------------------------------- phases


def run_calibration_phase(run: RunDir):
    cfg = run.config()
    styles = {s.id: s for s in read_manifest(run.require("styles.json", "gen"))}
    seqs = load_sequences(run, cfg.train_ids, cfg.calibration_task_ids)
    data = windows_for(seqs, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    params = mm.MindMeldParams.init(rng)
    t0 = time.time()
    try:
        params, table, trace = mm.train_calibration(data, cfg.train_config(), seed=cfg.seed, ids=cfg.train_ids, params=params)
    except mm.TrainingError as e:
        raise StageError(f"train stage: {e}") from e
    seconds = time.time() - t0
    mm.save_checkpoint(run.path("model", "checkpoint.json"), params, table)
    mt.write_rows(run.path("model", "loss_trace.csv"), ["epoch", "loss"],
                  [{"epoch": i, "loss": v} for i, v in enumerate(trace.epochs)])
    emb = table.as_dict()
    cal = improvement(params, emb, seqs, cfg.window)
    hold = improvement(params, emb, load_sequences(run, cfg.train_ids, cfg.holdout_tasks), cfg.window)
    cal.write(run.reports / "improvement_calibration.csv")
    hold.write(run.reports / "improvement_holdout.csv")
    write_embeddings(run.reports / "embeddings_train.csv", emb, styles)
    run.mark("train", epochs=len(trace.epochs), seconds=round(seconds, 1))
    return params, table, cal, hold


def run_test_phase(run: RunDir):
    """Infer embeddings for unseen demonstrators and score them on holdout tasks."""
    cfg = run.config()
    params, table = mm.load_checkpoint(run.require("model/checkpoint.json", "train"))
    styles = {s.id: s for s in read_manifest(run.require("styles.json", "gen"))}
    tcfg = cfg.train_config()
    inferred: dict[int, np.ndarray] = {}
    if cfg.test_ids and cfg.holdout_mode == "frozen":
        for p in cfg.test_ids:
            data = windows_for(load_sequences(run, [p], cfg.calibration_task_ids), cfg)
            inferred[p] = mm.infer_new_embedding(params, data, table.mean(), tcfg, seed=cfg.seed * 1000 + p)
    elif cfg.test_ids:
        # joint: network weights keep training alongside the new embeddings
        data = windows_for(load_sequences(run, cfg.test_ids, cfg.calibration_task_ids), cfg)
        init = mm.EmbeddingTable(cfg.test_ids, np.tile(table.mean(), (len(cfg.test_ids), 1)))
        jcfg = dataclasses.replace(tcfg, epochs=cfg.joint_epochs)
        params, new, _ = mm.train_calibration(data, jcfg, seed=cfg.seed + 1, ids=cfg.test_ids, params=params, table=init)
        inferred = new.as_dict()
    holdout = load_sequences(run, cfg.test_ids, cfg.holdout_tasks)
    report = improvement(params, inferred, holdout, cfg.window)
    baseline = improvement(params, {p: table.mean() for p in cfg.test_ids}, holdout, cfg.window)
    report.write(run.reports / "improvement_test.csv")
    baseline.write(run.reports / "improvement_test_mean_embedding.csv")
    write_embeddings(run.reports / "embeddings_test.csv", inferred, styles)
    run.mark("infer", mode=cfg.holdout_mode, demonstrators=len(inferred))
    return inferred, report


CONDITION_HEADER = ["demonstrator_id", "timing", "magnitude", "strong", "condition", "final_success",
                    "success_by_iteration", "dataset_size", "mean_time", "mean_cross_track", "uncorrected"]


def is_strong(style: StyleProfile) -> bool:
    return not (0.8 <= style.magnitude <= 1.25) or abs(style.timing) >= 3


def run_conditions(run: RunDir) -> list[dict]:
    """BC, DAgger and MIND-MELD-corrected DAgger for test demonstrators (same worlds per cell)."""
    cfg = run.config()
    params, _ = mm.load_checkpoint(run.require("model/checkpoint.json", "train"))
    emb = read_embeddings(run.require("reports/embeddings_test.csv", "infer"))
    styles = {s.id: s for s in read_manifest(run.require("styles.json", "gen"))}
    pcfg = cfg.policy_config()
    rows = []
    for p in sorted(emb)[: cfg.condition_demonstrators]:
        style = styles[p]
        cell_seed = cfg.seed * 1000 + p
        world = random_world(np.random.default_rng([cfg.seed, 9000 + p]), cfg.world_size)
        expert = StyledExpert(style, seed=cell_seed)

        def corrector(seq, w=emb[p]):
            return mm.correct_labels(params, w, seq, cfg.window)

        for cond in CONDITIONS:
            res = run_dagger(
                expert, world, pcfg, cell_seed,
                corrector=corrector if cond == "MM_DAGGER" else None,
                iterations=0 if cond == "BC" else pcfg.dagger_iters, condition=cond,
            )
            rows.append({
                "demonstrator_id": p, "timing": style.timing, "magnitude": style.magnitude,
                "strong": int(is_strong(style)), "condition": cond, "final_success": res.final_success,
                "success_by_iteration": " ".join(f"{s:g}" for s in res.success),
                "dataset_size": res.dataset_sizes[-1], "mean_time": res.mean_time,
                "mean_cross_track": res.mean_cross_track, "uncorrected": res.uncorrected,
            })
    mt.write_rows(run.reports / "conditions.csv", CONDITION_HEADER, rows)
    run.mark("conditions", cells=len(rows))
    return rows


# ---------------------------------------------------------------- report


def projection_correlations(W: np.ndarray, y: np.ndarray, construct: str) -> list[mt.CorrelationRow]:
    """Correlate ``y`` with its least-squares projection onto the embedding plane."""
    X = np.c_[W, np.ones(len(W))]
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    return mt.correlate_both(X @ coef, y, construct)


def _probe(seed: int):
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    # standardised so the penalty does not depend on the embedding's scale
    return make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))


def style_probe(W_train, cls_train, W_eval, cls_eval, seed: int) -> float:
    """Accuracy on ``W_eval`` of a timing-class probe fitted on ``W_train``."""
    if len(set(cls_train)) < 2 or len(W_eval) == 0:
        return math.nan
    return float(_probe(seed).fit(W_train, cls_train).score(W_eval, cls_eval))


def style_probe_cv(W, cls, seed: int) -> float:
    """Leave-one-out accuracy of the timing-class probe on one embedding set."""
    from sklearn.model_selection import LeaveOneOut, cross_val_score

    if len(set(cls)) < 2 or min(list(cls).count(c) for c in set(cls)) < 2:
        return math.nan
    return float(np.mean(cross_val_score(_probe(seed), W, cls, cv=LeaveOneOut())))


def magnitude_r2(W_train, m_train, W_eval, m_eval) -> float:
    from sklearn.linear_model import LinearRegression

    if len(W_eval) < 2:
        return math.nan
    return float(LinearRegression().fit(W_train, m_train).score(W_eval, m_eval))


@dataclass
class ReportBundle:
    summary: dict
    checks: dict[str, bool]
    content_hash: str

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def content_hash(reports: Path) -> str:
    """SHA-256 over report tables; the manifest (timestamps) is not included."""
    h = hashlib.sha256()
    for p in sorted(reports.glob("*.csv")) + [reports / "summary.json"]:
        if p.exists():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _timing_class(style: StyleProfile) -> str:
    return style.timing_class


def report(run: RunDir) -> ReportBundle:
    cfg = run.config()
    styles = {s.id: s for s in read_manifest(run.require("styles.json", "gen"))}
    cal = ImprovementReport.read(run.require("reports/improvement_calibration.csv", "train"))
    hold = ImprovementReport.read(run.require("reports/improvement_holdout.csv", "train"))
    train_emb = read_embeddings(run.require("reports/embeddings_train.csv", "train"))

    seqs = load_sequences(run, cfg.train_ids, cfg.calibration_task_ids)
    style_rows = mt.style_report_rows(seqs)
    mt.write_rows(run.reports / "style_report.csv", mt.STYLE_REPORT_HEADER, style_rows)

    ids = sorted(train_emb)
    W = np.array([train_emb[p] for p in ids])
    mag = np.array([styles[p].magnitude for p in ids])
    tau = np.array([styles[p].timing for p in ids], dtype=float)
    amp = np.array([np.mean([r["amplitude_norm"] for r in style_rows if r["demonstrator_id"] == p]) for p in ids])
    lag = np.array([np.mean([r["timing_norm"] for r in style_rows if r["demonstrator_id"] == p]) for p in ids])
    corr = []
    for y, name in ((mag, "magnitude"), (tau, "timing"), (amp, "amplitude_D"), (lag, "timing_metric")):
        try:
            corr += projection_correlations(W, y, name)
        except ValueError as e:  # degenerate style population
            log.warning("correlation for %s skipped: %s", name, e)
    mt.write_rows(run.reports / "correlation.csv", ["construct", "test", "coefficient", "p_value"],
                  [dataclasses.asdict(r) for r in corr])
    corr_of = {(r.construct, r.test): r.coefficient for r in corr}

    summary = {
        "calibration_improvement": cal.mean, "calibration_improvement_std": cal.std, "calibration_pooled": cal.pooled,
        "holdout_improvement": hold.mean, "holdout_improvement_std": hold.std, "holdout_pooled": hold.pooled,
        "magnitude_corr": corr_of.get(("magnitude", "pearson"), math.nan),
        "timing_corr": corr_of.get(("timing", "pearson"), math.nan),
        "reference": REFERENCE,
    }
    cls_train = [_timing_class(styles[p]) for p in ids]
    summary["probe_train_accuracy"] = style_probe(W, cls_train, W, cls_train, cfg.seed)
    summary["probe_loo_accuracy"] = style_probe_cv(W, cls_train, cfg.seed)
    summary["magnitude_r2_train"] = magnitude_r2(W, mag, W, mag)

    test_path = run.reports / "embeddings_test.csv"
    test_emb = read_embeddings(test_path) if test_path.exists() and cfg.n_test else {}
    if test_emb:
        tids = sorted(test_emb)
        Wt = np.array([test_emb[p] for p in tids])
        test = ImprovementReport.read(run.reports / "improvement_test.csv")
        base = ImprovementReport.read(run.reports / "improvement_test_mean_embedding.csv")
        summary.update({
            "test_improvement": test.mean, "test_pooled": test.pooled, "test_mean_embedding_improvement": base.mean,
            "probe_test_accuracy": style_probe(W, cls_train, Wt, [_timing_class(styles[p]) for p in tids], cfg.seed),
            "magnitude_r2_test": magnitude_r2(W, mag, Wt, np.array([styles[p].magnitude for p in tids])),
        })
        embs = {**train_emb, **test_emb}
    else:
        summary["test_phase"] = "absent"
        embs = train_emb
    scatter = []
    for p in sorted(embs):
        row = {"demonstrator_id": p, "split": "train" if p in train_emb else "test",
               "timing": styles[p].timing, "magnitude": styles[p].magnitude,
               "timing_class": styles[p].timing_class, "over_corrector": int(styles[p].over_corrector)}
        row.update({f"w{i}": float(v) for i, v in enumerate(embs[p])})
        scatter.append(row)
    dim = len(W[0])
    mt.write_rows(run.reports / "embedding_scatter.csv",
                  ["demonstrator_id", *[f"w{i}" for i in range(dim)], "timing", "magnitude", "timing_class",
                   "over_corrector", "split"], scatter)

    cond_path = run.reports / "conditions.csv"
    if cond_path.exists():
        with open(cond_path, newline="") as fh:
            crow = list(csv.DictReader(fh))
        for cond in CONDITIONS:
            vals = [float(r["final_success"]) for r in crow if r["condition"] == cond]
            strong = [float(r["final_success"]) for r in crow if r["condition"] == cond and r["strong"] == "1"]
            summary[f"success_{cond}"] = float(np.mean(vals)) if vals else math.nan
            summary[f"success_strong_{cond}"] = float(np.mean(strong)) if strong else math.nan
    else:
        summary["conditions"] = "absent"

    checks = {
        "calibration_improvement": cal.mean >= cfg.min_calibration,
        "holdout_improvement": hold.mean >= cfg.min_holdout,
        "magnitude_corr": abs(summary["magnitude_corr"]) >= cfg.min_abs_corr,
        "timing_corr": abs(summary["timing_corr"]) >= cfg.min_abs_corr,
    }
    if test_emb:
        checks["test_improvement"] = summary["test_improvement"] >= cfg.min_test
        checks["probe_test_accuracy"] = summary["probe_test_accuracy"] > cfg.min_probe
    summary["checks"] = checks
    run.reports.joinpath("summary.json").write_text(json.dumps(_clean(summary), indent=1, sort_keys=True))
    digest = content_hash(run.reports)
    run.reports.joinpath("content_hash.txt").write_text(digest + "\n")
    run.mark("report", content_hash=digest, passed=all(checks.values()))
    return ReportBundle(summary, checks, digest)


def _clean(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def run_all(cfg: ExperimentConfig, out, conditions: bool = True) -> ReportBundle:
    run = generate(cfg, out)
    run_calibration_phase(run)
    run_test_phase(run)
    if conditions:
        run_conditions(run)
    return report(run)
