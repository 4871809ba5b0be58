"""``astra-tda`` command-line workbench.

Every subcommand reads one INI experiment config, works inside a run
directory named after the config hash and records what it wrote in
``manifest.json``. Re-running a finished stage is a no-op unless ``--force``.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import (
    AttributionMatrix,
    SourcePlan,
    ensemble,
    if_attribute,
    load_matrix,
    save_matrix,
    source_attribute,
    source_damping,
    write_scores_csv,
)
from .data import Dataset, load_csv, read_raw_csv, save_manifest, split, synth_classification, synth_regression, write_csv
from .ekfac import fit_ekfac, load_state, save_state
from .evaluation import (
    BIN_THRESHOLDS,
    GroundTruth,
    MaskSet,
    compute_ground_truth,
    curvature_scan,
    generate_masks,
    lds,
    null_lds_bound,
    write_scan_csv,
)
from .ihvp import SolverConfig, SolverDivergence, astra_solve, effective_damping, sni_solve, truncated_response
from .seeding import derive_seed
from .model import CLASSIFICATION, REGRESSION, MlpSpec, measurement_grads
from .trainer import TrainConfig, TrainingDivergence, load_trajectory, save_trajectory, segment_trajectory, train

log = logging.getLogger("astra_tda")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4
RUN_ROOT_ENV = "ASTRA_TDA_RUN_ROOT"
METHODS = ("ekfac", "astra", "sni", "identity")


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# section -> key -> (type, default)
SCHEMA = {
    "experiment": {"name": (str, "run")},
    "data": {
        "kind": (str, "synth_regression"),
        "n": (int, 544),
        "d": (int, 16),
        "noise_std": (float, 0.1),
        "classes": (int, 3),
        "margin": (float, 2.0),
        "label_noise": (float, 0.0),
        "seed": (int, 0),
        "path": (str, ""),
        "target_column": (str, "target"),
        "task": (str, REGRESSION),
        "n_query": (int, 32),
        "split_seed": (int, 0),
    },
    "model": {"hidden": (str, "32,32")},
    "train": {
        "lr": (float, 0.03),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-5),
        "batch_size": (int, 32),
        "epochs": (int, 20),
        "init_seed": (int, 0),
        "order_seed": (int, 1),
        "lr_schedule": (str, "constant"),
        "lr_decay_factor": (float, 0.1),
        "lr_decay_every": (int, 10),
        "checkpoint_every": (int, 0),
    },
    "solver": {
        "damping": (str, "auto"),
        "precond_damping": (str, "same"),
        "lr": (float, 0.1),
        "batch_size": (int, 256),
        "iterations": (int, 200),
        "momentum": (float, 0.9),
        "lr_decay_factor": (float, 0.5),
        "lr_decay_every": (int, 50),
        "repeats": (int, 1),
        "seed": (int, 0),
        "sni_lr": (float, 0.01),
        "sni_iterations": (int, 1000),
        "ekfac_seed": (int, 0),
    },
    "source": {"segments": (int, 3)},
    "eval": {
        "masks": (int, 50),
        "beta": (float, 0.5),
        "repeats": (int, 20),
        "mask_seed": (int, 1),
        "grid_seed": (int, 7),
        "bins": (str, ",".join(repr(b) for b in BIN_THRESHOLDS)),
        "scan_damping": (float, 1e-4),
        "scan_queries": (int, 8),
        "scan_iterations": (int, 1000),
        "scan_sni_lr": (float, 0.1),
        "scan_snapshot_every": (int, 10),
    },
    "neumann": {
        "lr": (float, 0.1),
        "iterations": (int, 200),
        "damping": (float, 1e-3),
        "sigma_min": (float, 1e-6),
        "sigma_max": (float, 10.0),
        "points": (int, 61),
    },
}


def _parse_value(section, key, raw, typ):
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {typ.__name__}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    source_path: str = ""

    def __getitem__(self, section) -> dict:
        return self.values[section]

    @property
    def digest(self) -> str:
        canon = json.dumps(self.values, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def spec(self) -> MlpSpec:
        d = self["data"]
        hidden = [int(h) for h in self["model"]["hidden"].split(",") if h.strip()]
        n_out = 1 if d["task"] == REGRESSION else d["classes"]
        return MlpSpec(tuple([d["d"]] + hidden + [n_out]), d["task"])

    def train_config(self, member: int = 0) -> TrainConfig:
        t = dict(self["train"])
        t["init_seed"] += member
        t["order_seed"] += member
        return TrainConfig(**t)

    def solver_config(self, damping: float, seed: int | None = None) -> SolverConfig:
        s = self["solver"]
        pd = s["precond_damping"]
        return SolverConfig(
            lr=s["lr"],
            damping=damping,
            precond_damping=None if pd == "same" else float(pd),
            batch_size=None if s["batch_size"] == 0 else s["batch_size"],
            iterations=s["iterations"],
            momentum=s["momentum"],
            lr_decay_factor=s["lr_decay_factor"],
            lr_decay_every=s["lr_decay_every"],
            repeats=s["repeats"],
            seed=s["seed"] if seed is None else seed,
        )

    @property
    def bins(self) -> tuple[float, ...]:
        return tuple(float(b) for b in self["eval"]["bins"].split(","))


def parse_config(text: str, source_path: str = "") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source_path or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (typ, default) in keys.items():
            if cp.has_option(section, key):
                values[section][key] = _parse_value(section, key, cp[section][key].strip(), typ)
            else:
                values[section][key] = default
    cfg = ExperimentConfig(values, source_path)
    validate(cfg)
    return cfg


def render_config(values: dict) -> str:
    """INI text that parses back to ``values`` (e.g. a manifest's config)."""
    cp = configparser.ConfigParser(interpolation=None)
    for section, keys in values.items():
        cp[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in keys.items()}
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in cp[section].items())
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))


def validate(cfg: ExperimentConfig) -> None:
    d, s, e = cfg["data"], cfg["solver"], cfg["eval"]
    if d["kind"] not in ("synth_regression", "synth_classification", "csv"):
        raise ConfigError(f"[data] kind = {d['kind']!r} must be synth_regression, synth_classification or csv")
    if d["task"] not in (REGRESSION, CLASSIFICATION):
        raise ConfigError(f"[data] task = {d['task']!r} must be regression or classification")
    if d["kind"] == "synth_regression" and d["task"] != REGRESSION:
        raise ConfigError("[data] task must be regression for kind = synth_regression")
    if d["kind"] == "synth_classification" and d["task"] != CLASSIFICATION:
        raise ConfigError("[data] task must be classification for kind = synth_classification")
    if d["kind"] == "csv" and not d["path"]:
        raise ConfigError("[data] path is required for kind = csv")
    if d["task"] == CLASSIFICATION and d["classes"] < 2:
        raise ConfigError("[data] classes must be >= 2")
    if not 0 <= d["n_query"] < d["n"]:
        raise ConfigError("[data] n_query must be in [0, n)")
    try:
        cfg.spec
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"[model]/[train] {exc}") from None
    if s["damping"] != "auto":
        try:
            lam = float(s["damping"])
        except ValueError:
            raise ConfigError(f"[solver] damping = {s['damping']!r} must be 'auto' or a number") from None
        if not lam > 0:
            raise ConfigError("[solver] damping must be > 0")
    if s["precond_damping"] != "same":
        try:
            if not float(s["precond_damping"]) > 0:
                raise ConfigError("[solver] precond_damping must be > 0")
        except ValueError:
            raise ConfigError("[solver] precond_damping must be 'same' or a number") from None
    try:
        cfg.solver_config(1.0)
    except ValueError as exc:
        raise ConfigError(f"[solver] {exc}") from None
    if cfg["source"]["segments"] < 1:
        raise ConfigError("[source] segments must be >= 1")
    if not 0 < e["beta"] < 1:
        raise ConfigError("[eval] beta must be in (0, 1)")
    if e["masks"] < 1 or e["repeats"] < 1:
        raise ConfigError("[eval] masks and repeats must be >= 1")
    try:
        bins = cfg.bins
    except ValueError:
        raise ConfigError(f"[eval] bins = {e['bins']!r} must be comma-separated numbers") from None
    if any(b >= a for a, b in zip(bins, bins[1:])) or min(bins) <= 0:
        raise ConfigError("[eval] bins must be positive and strictly descending")
    if not e["scan_damping"] > 0:
        raise ConfigError("[eval] scan_damping must be > 0")
    if not cfg["neumann"]["damping"] > 0 or cfg["neumann"]["iterations"] < 1:
        raise ConfigError("[neumann] damping must be > 0 and iterations >= 1")


class Run:
    """Run directory with a JSON manifest of completed stages."""

    def __init__(self, cfg: ExperimentConfig, root: Path):
        self.cfg = cfg
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
            if self.manifest.get("config_hash") != cfg.digest:
                raise ConfigError(
                    f"run directory {root} belongs to config hash {self.manifest.get('config_hash', '?')[:12]}, "
                    f"not {cfg.digest[:12]}"
                )
        else:
            self.manifest = {"config_hash": cfg.digest, "config": cfg.values, "version": __version__, "stages": {}}
            (root / "config.json").write_text(json.dumps(cfg.values, indent=2, sort_keys=True) + "\n")
            self._flush()

    def _flush(self):
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.manifest_path)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def done(self, stage: str) -> bool:
        rec = self.manifest["stages"].get(stage)
        return rec is not None and all(self.path(p).exists() for p in rec["artifacts"])

    def record(self, stage: str, artifacts, **info):
        rels = sorted(str(Path(a).relative_to(self.root)) for a in artifacts)
        self.manifest["stages"][stage] = {"artifacts": rels, **info}
        self._flush()

    def require(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingArtifact(f"missing artifact {p}; run the upstream command first")
        return p


def resolve_run_dir(cfg: ExperimentConfig, run_dir: str | None) -> Path:
    if run_dir:
        return Path(run_dir)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{cfg['experiment']['name']}-{cfg.digest[:12]}"


def bundled_config(name: str = "tiny") -> Path:
    return Path(__file__).with_name("configs") / f"{name}.ini"


def _notice(msg: str):
    print(msg)


# data / model loaders shared by commands

def load_data(run: Run) -> tuple[Dataset, Dataset]:
    d = run.cfg["data"]
    task = d["task"]
    n_classes = d["classes"] if task == CLASSIFICATION else None
    tr = read_raw_csv(run.require("data", "train.csv"), task, n_classes)
    q = read_raw_csv(run.require("data", "queries.csv"), task, n_classes)
    return tr, q


def load_final(run: Run, member: int = 0) -> np.ndarray:
    traj = load_trajectory(run.require("train", f"member{member}"), run.cfg.spec)
    return traj.final


def if_damping(run: Run, member: int = 0) -> float:
    s = run.cfg["solver"]["damping"]
    if s != "auto":
        return float(s)
    traj = load_trajectory(run.require("train", f"member{member}"), run.cfg.spec)
    return source_damping(segment_trajectory(traj, run.cfg["source"]["segments"]))


# commands

def cmd_gen_data(run: Run, args) -> None:
    if run.done("gen-data") and not args.force:
        return _notice("gen-data: data already generated for this config; nothing to do")
    d = run.cfg["data"]
    if d["kind"] == "synth_regression":
        full = synth_regression(d["n"], d["d"], d["noise_std"], d["seed"])
    elif d["kind"] == "synth_classification":
        full = synth_classification(d["n"], d["d"], d["classes"], d["margin"], d["seed"], d["label_noise"])
    else:
        src = Path(d["path"])
        if not src.exists():
            raise MissingArtifact(f"data file {src} does not exist ([data] path)")
        full = load_csv(src, d["target_column"], d["task"])
        if full.n_features != d["d"]:
            raise ConfigError(f"[data] d = {d['d']} but {src} has {full.n_features} feature columns")
    if d["task"] == CLASSIFICATION and full.t.size and full.t.max() >= d["classes"]:
        raise ConfigError(f"[data] classes = {d['classes']} but labels reach {int(full.t.max())}")
    tr, q = split(full, d["n_query"], d["split_seed"])
    run.path("data").mkdir(exist_ok=True)
    out = [run.path("data", "train.csv"), run.path("data", "queries.csv"), run.path("data", "manifest.json")]
    write_csv(tr, out[0])
    write_csv(q, out[1])
    save_manifest(full, out[2])
    run.record("gen-data", out, n_train=len(tr), n_query=len(q))
    print(f"gen-data: {len(tr)} training examples, {len(q)} queries -> {run.path('data')}")


def cmd_train(run: Run, args) -> None:
    tr, _ = load_data(run)
    members = range(max(1, args.ensemble))
    if all(run.done(f"train/member{m}") for m in members) and not args.force:
        return _notice("train: checkpoints already exist for this config; nothing to do")
    for m in members:
        if run.done(f"train/member{m}") and not args.force:
            continue
        traj = train(run.cfg.spec, tr, run.cfg.train_config(m))
        paths = save_trajectory(traj, run.path("train", f"member{m}"))
        run.record(f"train/member{m}", paths + [run.path("train", f"member{m}", "lrs.csv")],
                   steps=traj.total_steps, final_loss=traj.losses[-1] if traj.losses else None)
        print(f"train: member {m}, {traj.total_steps} steps, final loss {traj.losses[-1]:.6g}")


def cmd_ekfac(run: Run, args) -> None:
    members = range(max(1, args.ensemble))
    stage = lambda m: f"ekfac/member{m}"
    if all(run.done(stage(m)) for m in members) and not args.force:
        return _notice("ekfac: factors already fitted for this config; nothing to do")
    tr, _ = load_data(run)
    spec = run.cfg.spec
    seed = run.cfg["solver"]["ekfac_seed"]
    for m in members:
        traj = load_trajectory(run.require("train", f"member{m}"), spec)
        out_dir = run.path("ekfac", f"member{m}")
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "final.ekfc"]
        save_state(fit_ekfac(spec, traj.final, tr, seed=seed + m), paths[0])
        for seg in segment_trajectory(traj, run.cfg["source"]["segments"]):
            p = out_dir / f"segment{seg.index}.ekfc"
            save_state(fit_ekfac(spec, seg.mean_params, tr, seed=derive_seed(seed + m, seg.index)), p)
            paths.append(p)
        run.record(stage(m), paths)
        print(f"ekfac: member {m}, {len(paths)} states -> {out_dir}")


def cmd_ihvp_solve(run: Run, args) -> None:
    method = args.method or "astra"
    if method not in ("astra", "sni"):
        raise ConfigError("ihvp-solve supports --method astra or sni")
    stage = f"ihvp/{method}-q{args.query}"
    if run.done(stage) and not args.force:
        return _notice(f"ihvp-solve: {stage} already solved; nothing to do")
    tr, q = load_data(run)
    if not 0 <= args.query < len(q):
        raise ConfigError(f"--query {args.query} out of range for {len(q)} queries")
    spec = run.cfg.spec
    params = load_final(run)
    v = measurement_grads(spec, params, q.x[args.query : args.query + 1], q.t[args.query : args.query + 1])[0]
    cfg = run.cfg.solver_config(if_damping(run), args.seed)
    if method == "astra":
        state = load_state(run.require("ekfac", "member0", "final.ekfc"), spec)
        theta, trace = astra_solve(spec, params, tr, state, v, cfg)
    else:
        s = run.cfg["solver"]
        cfg = replace(cfg, lr=s["sni_lr"], iterations=s["sni_iterations"], momentum=0.0, lr_decay_every=0)
        theta, trace = sni_solve(spec, params, tr, v, cfg)
    run.path("ihvp").mkdir(exist_ok=True)
    sol = run.path("ihvp", f"{method}-q{args.query}.npy")
    np.save(sol, theta)
    tpath = run.path("ihvp", f"{method}-q{args.query}-trace.csv")
    trace.to_csv(tpath)
    run.record(stage, [sol, tpath], damping=cfg.damping, seed=cfg.seed)
    print(f"ihvp-solve: {method} query {args.query}, final objective {trace.objective[-1]:.6g}")


def _score_name(method: str, member: int) -> str:
    return f"{method}_member{member}"


def cmd_attribute(run: Run, args) -> None:
    method = args.method or "astra"
    if method not in METHODS:
        raise ConfigError(f"--method must be one of {METHODS}")
    members = range(max(1, args.ensemble))
    stage = lambda m: f"scores/{_score_name(method + '-if', m)}"
    if all(run.done(stage(m)) for m in members) and not args.force:
        return _notice(f"attribute: {method}-if scores already computed; nothing to do")
    tr, q = load_data(run)
    spec = run.cfg.spec
    run.path("scores").mkdir(exist_ok=True)
    for m in members:
        if run.done(stage(m)) and not args.force:
            continue
        params = load_final(run, m)
        lam = if_damping(run, m)
        cfg = run.cfg.solver_config(lam, m if args.seed is None else args.seed + m)
        if method == "sni":
            s = run.cfg["solver"]
            cfg = replace(cfg, lr=s["sni_lr"], iterations=s["sni_iterations"], momentum=0.0, lr_decay_every=0)
        state = None
        if method in ("ekfac", "astra"):
            state = load_state(run.require("ekfac", f"member{m}", "final.ekfc"), spec)
        mat = if_attribute(spec, params, tr, q, method, cfg, state=state, workers=args.workers)
        base = run.path("scores", _score_name(mat.method, m))
        save_matrix(mat, base.with_suffix(".attr"))
        write_scores_csv(mat, base.with_suffix(".csv"))
        run.record(stage(m), [base.with_suffix(".attr"), base.with_suffix(".csv")], damping=lam, seed=cfg.seed)
        print(f"attribute: {mat.method} member {m} (damping {lam:.4g}) -> {base}.attr")


def cmd_source_attribute(run: Run, args) -> None:
    mode = args.method or "astra"
    if mode not in ("ekfac", "astra"):
        raise ConfigError("source-attribute supports --method ekfac or astra")
    members = range(max(1, args.ensemble))
    stage = lambda m: f"scores/{_score_name(mode + '-source', m)}"
    if all(run.done(stage(m)) for m in members) and not args.force:
        return _notice(f"source-attribute: {mode}-source scores already computed; nothing to do")
    tr, q = load_data(run)
    spec = run.cfg.spec
    run.path("scores").mkdir(exist_ok=True)
    for m in members:
        if run.done(stage(m)) and not args.force:
            continue
        traj = load_trajectory(run.require("train", f"member{m}"), spec)
        segs = segment_trajectory(traj, run.cfg["source"]["segments"])
        states = tuple(load_state(run.require("ekfac", f"member{m}", f"segment{s.index}.ekfc"), spec) for s in segs)
        plan = SourcePlan(tuple(segs), states, traj.final)
        cfg = run.cfg.solver_config(plan.if_damping, m if args.seed is None else args.seed + m)
        mat = source_attribute(spec, plan, tr, q, mode, cfg)
        base = run.path("scores", _score_name(mat.method, m))
        save_matrix(mat, base.with_suffix(".attr"))
        write_scores_csv(mat, base.with_suffix(".csv"))
        run.record(stage(m), [base.with_suffix(".attr"), base.with_suffix(".csv")], seed=cfg.seed)
        print(f"source-attribute: {mat.method} member {m} -> {base}.attr")


def _masks(run: Run, n: int) -> MaskSet:
    e = run.cfg["eval"]
    return generate_masks(n, e["beta"], e["masks"], e["mask_seed"])


def cmd_retrain_grid(run: Run, args) -> None:
    if run.done("ground-truth") and not args.force:
        return _notice("retrain-grid: ground truth already computed; nothing to do")
    tr, q = load_data(run)
    e = run.cfg["eval"]
    masks = _masks(run, len(tr))
    run.path("ground_truth").mkdir(exist_ok=True)
    np.save(run.path("ground_truth", "masks.npy"), masks.masks)
    gt = compute_ground_truth(
        run.cfg.spec, tr, run.cfg.train_config(), masks, e["repeats"], q,
        base_seed=e["grid_seed"], workers=args.workers, cache_dir=run.path("ground_truth", "cells"),
    )
    out = run.path("ground_truth", "ground_truth.csv")
    gt.to_csv(out)
    run.record("ground-truth", [out, run.path("ground_truth", "masks.npy")], failed_cells=len(gt.failed))
    print(f"retrain-grid: {masks.n_masks} masks x {gt.repeats} repeats, {len(gt.failed)} failed cells -> {out}")


def _load_scores(run: Run, family: str, method: str, k: int) -> AttributionMatrix:
    tag = f"{method}-{family}"
    mats = [load_matrix(run.require("scores", _score_name(tag, m) + ".attr")) for m in range(k)]
    return ensemble(mats)


def cmd_lds(run: Run, args) -> None:
    method = args.method or "astra"
    k = max(1, args.ensemble)
    name = f"{method}-{args.family}_ens{k}"
    if run.done(f"lds/{name}") and not args.force:
        return _notice(f"lds: report {name} already exists; nothing to do")
    scores = _load_scores(run, args.family, method, k)
    gt = GroundTruth.from_csv(run.require("ground_truth", "ground_truth.csv"))
    tr, q = load_data(run)
    masks = _masks(run, len(tr))
    report = lds(scores, masks, gt)
    run.path("lds").mkdir(exist_ok=True)
    out = run.path("lds", f"{name}.json")
    payload = report.to_json()
    payload["null_3sigma"] = null_lds_bound(masks.n_masks, len(q))
    out.write_text(json.dumps(payload, indent=2) + "\n")
    run.record(f"lds/{name}", [out], mean=report.mean)
    print(f"lds: {scores.method} ensemble {k}: mean {report.mean:.4f} +- {report.stderr:.4f} "
          f"({report.excluded} excluded) -> {out}")


def cmd_curvature_scan(run: Run, args) -> None:
    if run.done("curvature-scan") and not args.force:
        return _notice("curvature-scan: scan already computed; nothing to do")
    tr, q = load_data(run)
    e = run.cfg["eval"]
    spec = run.cfg.spec
    params = load_final(run)
    state = load_state(run.require("ekfac", "member0", "final.ekfc"), spec)
    nq = min(e["scan_queries"], len(q))
    qs = q.subset(np.arange(nq))
    masks = gt = None
    gt_path = run.path("ground_truth", "ground_truth.csv")
    if gt_path.exists():
        full_gt = GroundTruth.from_csv(gt_path)
        gt = GroundTruth(full_gt.values[:, :, :nq], full_gt.failed)
        masks = _masks(run, len(tr))
    lam = e["scan_damping"]
    base = run.cfg.solver_config(lam, args.seed)
    acfg = replace(base, batch_size=None, snapshot_every=e["scan_snapshot_every"])
    scfg = replace(acfg, lr=e["scan_sni_lr"], iterations=e["scan_iterations"], momentum=0.0, lr_decay_every=0)
    rows = curvature_scan(spec, params, tr, state, qs, acfg, masks, gt, thresholds=run.cfg.bins, sni_config=scfg)
    run.path("scan").mkdir(exist_ok=True)
    out = run.path("scan", "curvature_scan.csv")
    write_scan_csv(rows, out)
    run.record("curvature-scan", [out])
    print(f"curvature-scan: {len(rows)} rows -> {out}")


def cmd_neumann_damping(run: Run, args) -> None:
    if run.done("neumann-damping") and not args.force:
        return _notice("neumann-damping: table already written; nothing to do")
    n = run.cfg["neumann"]
    sigma = np.logspace(np.log10(n["sigma_min"]), np.log10(n["sigma_max"]), n["points"])
    f = truncated_response(sigma, n["lr"], n["damping"], n["iterations"])
    lam_hat = effective_damping(n["lr"], n["damping"], n["iterations"])
    run.path("neumann").mkdir(exist_ok=True)
    out = run.path("neumann", "damping.csv")
    with out.open("w") as fh:
        fh.write("sigma,truncated,damped_inverse,exact_inverse\n")
        for s, fs in zip(sigma.tolist(), f.tolist()):
            fh.write(f"{s!r},{fs!r},{1.0 / (s + lam_hat)!r},{1.0 / (s + n['damping'])!r}\n")
    run.record("neumann-damping", [out], effective_damping=lam_hat)
    print(f"neumann-damping: effective damping {lam_hat:.6g} -> {out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "retrain-grid": cmd_retrain_grid,
    "ekfac": cmd_ekfac,
    "ihvp-solve": cmd_ihvp_solve,
    "attribute": cmd_attribute,
    "source-attribute": cmd_source_attribute,
    "lds": cmd_lds,
    "curvature-scan": cmd_curvature_scan,
    "neumann-damping": cmd_neumann_damping,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="astra-tda", description="Training data attribution workbench")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="INI experiment config (default: bundled tiny config)")
        c.add_argument("--run-dir", help=f"run directory (default: ${RUN_ROOT_ENV}/<name>-<hash>)")
        c.add_argument("--workers", type=int, default=1)
        c.add_argument("--seed", type=int, default=None, help="override the solver seed")
        c.add_argument("--method", choices=METHODS, default=None)
        c.add_argument("--ensemble", type=int, default=1, help="number of seeded ensemble members")
        c.add_argument("--family", choices=("if", "source"), default="if")
        c.add_argument("--query", type=int, default=0)
        c.add_argument("--force", action="store_true", help="recompute even if outputs exist")
        c.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1 or args.ensemble < 1:
            raise ConfigError("--workers and --ensemble must be >= 1")
        cfg = load_config(args.config or bundled_config())
        run = Run(cfg, resolve_run_dir(cfg, args.run_dir))
        COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (SolverDivergence, TrainingDivergence) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
