"""Experiment orchestration: configs, replicated runs, sweeps and artifacts.

A run directory contains

* ``config.json``: the normalized configuration,
* ``replica_XXX.csv``: one trajectory per replica (columns ``TRAJECTORY_COLUMNS``),
* ``mean.csv``: replica means of the same columns plus ``mse_weighted_se``,
* ``summary.json``: parameters, fitted exponents, audit counts and
  bound-versus-measured curves aligned by ``k``.

Everything written is a deterministic function of the configuration.
"""

import copy
import csv
import hashlib
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .algorithm import TRAJECTORY_COLUMNS, DivergenceError, StepSchedule, run, write_csv
from .analysis import (
    AnalysisError,
    InequalityAuditor,
    fit_lemma2_constants,
    fit_rate_exponent,
    lemma1_bound,
    lemma2_bound,
    make_bound_params,
    theorem1_bound,
)
from .network import build_topology, lazy_weights, sigma_pair, validate_assumption3
from .noise import make_noise_model
from .numerics import min_real_eigenvalue
from .problem import (
    exact_solution,
    gtd_instance,
    load_system,
    random_instance,
    scale_to_assumption2,
    schur_complement,
    validate_assumptions,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "DTSA_WORKERS"
MEAN_COLUMNS = TRAJECTORY_COLUMNS + ("mse_weighted_se",)
SWEEP_KEYS = ("topology", "laziness", "alpha0", "beta0", "N")
SWEEP_COLUMNS = ("point", "status", "sigma", "exponent", "final_consensus_sq", "tail_consensus_sq",
                 "final_mse_weighted", "violations", "error")

TOP_KEYS = {
    "system", "topology", "topology_v", "alpha0", "beta0", "delta", "noise", "K", "record_every",
    "replicas", "seed", "output_dir", "audit", "D0", "D1", "gain_rule", "fit_window",
}
SYSTEM_KEYS = {
    "random": {"kind", "d", "N", "seed", "delta_margin"},
    "gtd": {"kind", "d", "N", "states", "gamma", "seed"},
    "file": {"kind", "path"},
}
TOPOLOGY_KINDS = ("ring", "path", "star", "complete", "erdos_renyi")
TOPOLOGY_KEYS = {"kind", "laziness", "edge_prob", "seed"}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    system: dict
    topology: dict
    topology_v: dict
    alpha0: float
    beta0: float
    delta: float
    noise: object
    K: int
    record_every: int
    replicas: int
    seed: int
    output_dir: str
    audit: bool = True
    D0: float = None
    D1: float = None
    gain_rule: dict = None
    fit_window: tuple = (1e3, 1e5)
    theorem_checks: bool = True
    warnings: list = field(default_factory=list)
    defaults_applied: list = field(default_factory=list)

    def to_dict(self):
        """Canonical JSON-ready form, used for the config echo and the run hash."""
        return {
            "system": self.system,
            "topology": self.topology,
            "topology_v": self.topology_v,
            "alpha0": self.alpha0,
            "beta0": self.beta0,
            "delta": self.delta,
            "noise": self.noise,
            "K": self.K,
            "record_every": self.record_every,
            "replicas": self.replicas,
            "seed": self.seed,
            "audit": self.audit,
            "D0": self.D0,
            "D1": self.D1,
            "gain_rule": self.gain_rule,
            "fit_window": list(self.fit_window),
        }

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- parsing

def parse_value(text):
    """Override values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc, assignment):
    """Apply one ``path.to.key=value`` assignment to a raw config dict."""
    if "=" not in assignment:
        raise ConfigError([f"override {assignment!r} must look like path.to.key=value"])
    path, _, text = assignment.partition("=")
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError([f"override {assignment!r} has an empty path"])
    node = doc
    for key in keys[:-1]:
        if isinstance(node.get(key), str):
            # shorthand "ring" becomes {"kind": "ring"} so sub-keys can be set
            node[key] = {"kind": node[key]}
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError([f"override {assignment!r}: {key!r} is not an object"])
    node[keys[-1]] = parse_value(text)
    return doc


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _normalize_topology(node, where, errors):
    if isinstance(node, str):
        node = {"kind": node}
    if not isinstance(node, dict):
        errors.append(f"{where}: must be a string or an object")
        return None
    node = dict(node)
    for key in sorted(set(node) - TOPOLOGY_KEYS):
        errors.append(f"{where}: unknown key {key!r}")
    if node.get("kind") not in TOPOLOGY_KINDS:
        errors.append(f"{where}.kind: must be one of {', '.join(TOPOLOGY_KINDS)}")
    node.setdefault("laziness", 0.0)
    if not _is_num(node["laziness"]) or not 0.0 <= node["laziness"] < 1.0:
        errors.append(f"{where}.laziness: must be a number in [0, 1)")
    if node.get("kind") == "erdos_renyi":
        p = node.get("edge_prob")
        if not _is_num(p) or not 0.0 < p <= 1.0:
            errors.append(f"{where}.edge_prob: required in (0, 1] for erdos_renyi")
        node.setdefault("seed", 0)
    elif "edge_prob" in node:
        errors.append(f"{where}.edge_prob: only valid for erdos_renyi")
    return node


def _normalize_system(node, errors):
    if not isinstance(node, dict):
        errors.append("system: must be an object")
        return None
    node = dict(node)
    kind = node.get("kind")
    if kind not in SYSTEM_KEYS:
        errors.append(f"system.kind: must be one of {', '.join(SYSTEM_KEYS)}")
        return node
    for key in sorted(set(node) - SYSTEM_KEYS[kind]):
        errors.append(f"system: unknown key {key!r} for kind {kind!r}")
    if kind == "file":
        if not isinstance(node.get("path"), str):
            errors.append("system.path: required string")
        return node
    for key in ("d", "N"):
        if not _is_int(node.get(key)) or node[key] < 1:
            errors.append(f"system.{key}: required integer >= 1")
    node.setdefault("seed", 0)
    if not _is_int(node["seed"]) or node["seed"] < 0:
        errors.append("system.seed: must be a nonnegative integer")
    if kind == "random":
        node.setdefault("delta_margin", 0.5)
        if not _is_num(node["delta_margin"]) or node["delta_margin"] <= 0:
            errors.append("system.delta_margin: must be positive")
    else:
        node.setdefault("states", 5)
        node.setdefault("gamma", 0.9)
        if not _is_int(node["states"]) or node["states"] < 1:
            errors.append("system.states: must be an integer >= 1")
        elif _is_int(node.get("d")) and node["d"] > node["states"]:
            errors.append("system.d: cannot exceed system.states (features would be rank deficient)")
        if not _is_num(node["gamma"]) or not 0.0 <= node["gamma"] < 1.0:
            errors.append("system.gamma: must lie in [0, 1)")
    return node


def _normalize_noise(node, errors):
    if node in ("none", "gtd"):
        return node
    if isinstance(node, dict) and set(node) == {"iso"}:
        if not _is_num(node["iso"]) or node["iso"] < 0:
            errors.append("noise.iso: must be a nonnegative number")
        return node
    if isinstance(node, dict) and set(node) == {"matrix"}:
        try:
            make_noise_model(node["matrix"])
        except (ValueError, TypeError) as exc:
            errors.append(f"noise.matrix: {exc}")
        return node
    errors.append('noise: must be "none", "gtd", {"iso": variance} or {"matrix": [[...]]}')
    return node


def _default(doc, key, value, applied):
    if key not in doc:
        doc[key] = value
        applied.append(key)
        log.info("config default %s = %r", key, value)


def config_from_dict(raw, base_dir="."):
    """Validate a raw config dict; every problem is collected before raising."""
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be an object"])
    doc = copy.deepcopy(raw)
    errors, applied, warns = [], [], []
    for key in sorted(set(doc) - TOP_KEYS):
        errors.append(f"unknown key {key!r}")
    for key in ("system", "topology", "K"):
        if key not in doc:
            errors.append(f"missing required key {key!r}")
    system = _normalize_system(doc.get("system"), errors) if "system" in doc else None
    if system is not None and system.get("kind") == "file" and isinstance(system.get("path"), str):
        system["path"] = str(Path(base_dir, system["path"]))
    topo = _normalize_topology(doc["topology"], "topology", errors) if "topology" in doc else None
    if "topology_v" in doc:
        topo_v = _normalize_topology(doc["topology_v"], "topology_v", errors)
    else:
        topo_v = copy.deepcopy(topo)

    K = doc.get("K")
    if "K" in doc and (not _is_int(K) or K < 1):
        errors.append("K: must be an integer >= 1")
    _default(doc, "alpha0", 0.5, applied)
    _default(doc, "beta0", 0.1, applied)
    _default(doc, "replicas", 32, applied)
    _default(doc, "seed", 0, applied)
    _default(doc, "noise", {"iso": 0.01}, applied)
    _default(doc, "audit", True, applied)
    _default(doc, "output_dir", "runs", applied)
    if _is_int(K) and K >= 1:
        _default(doc, "record_every", max(1, K // 1000), applied)
    else:
        doc.setdefault("record_every", 1)
    for key in ("alpha0", "beta0"):
        if not _is_num(doc[key]) or doc[key] <= 0:
            errors.append(f"{key}: must be a positive number")
    for key in ("replicas", "record_every"):
        if not _is_int(doc[key]) or doc[key] < 1:
            errors.append(f"{key}: must be an integer >= 1")
    if not _is_int(doc["seed"]) or doc["seed"] < 0:
        errors.append("seed: must be a nonnegative integer")
    if not isinstance(doc["audit"], bool):
        errors.append("audit: must be true or false")
    if not isinstance(doc["output_dir"], str):
        errors.append("output_dir: must be a string")
    delta = doc.get("delta")
    if delta is not None and (not _is_num(delta) or not 0.0 < delta < 1.0):
        errors.append("delta: must lie in (0, 1)")
    if delta is None:
        applied.append("delta")
        log.info("config default delta = (1 + sigma) / 2")
    for key in ("D0", "D1"):
        v = doc.get(key)
        if v is not None and (not _is_num(v) or v < 0):
            errors.append(f"{key}: must be a nonnegative number")
    gain = doc.get("gain_rule")
    if gain is not None:
        if not isinstance(gain, dict) or set(gain) != {"schur_rate"} or not _is_num(gain["schur_rate"]) \
                or gain["schur_rate"] <= 0:
            errors.append('gain_rule: must be {"schur_rate": positive number}')
    window = doc.get("fit_window", [1e3, 1e5])
    if not (isinstance(window, (list, tuple)) and len(window) == 2 and all(_is_num(v) for v in window)
            and 0 < window[0] < window[1]):
        errors.append("fit_window: must be [lo, hi] with 0 < lo < hi")
        window = [1e3, 1e5]
    noise = _normalize_noise(doc["noise"], errors)
    if noise == "gtd" and system is not None and system.get("kind") not in ("gtd", None):
        errors.append('noise: "gtd" requires a gtd system')
    if errors:
        raise ConfigError(errors)

    theorem_checks = True
    if gain is None and doc["beta0"] > doc["alpha0"]:
        warns.append("beta0 > alpha0: beta_k / alpha_k can exceed 1, theorem checks disabled")
        theorem_checks = False
    if noise == "gtd":
        warns.append("gtd sampling noise is iterate dependent and unbounded a priori; theorem checks disabled")
        theorem_checks = False
    for w in warns:
        log.warning(w)
    return ExperimentConfig(
        system=system,
        topology=topo,
        topology_v=topo_v,
        alpha0=float(doc["alpha0"]),
        beta0=float(doc["beta0"]),
        delta=None if delta is None else float(delta),
        noise=noise,
        K=K,
        record_every=doc["record_every"],
        replicas=doc["replicas"],
        seed=doc["seed"],
        output_dir=doc["output_dir"],
        audit=doc["audit"],
        D0=doc.get("D0"),
        D1=doc.get("D1"),
        gain_rule=gain,
        fit_window=(float(window[0]), float(window[1])),
        theorem_checks=theorem_checks,
        warnings=warns,
        defaults_applied=applied,
    )


def load_config(path, overrides=()):
    """Read a JSON config, apply ``path=value`` overrides and validate.

    Parse errors report the line and column; semantic errors are all listed
    in one :class:`ConfigError`.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from exc
    for assignment in overrides:
        if not isinstance(raw, dict):
            break
        apply_override(raw, assignment)
    return config_from_dict(raw, base_dir=path.parent)


# ---------------------------------------------------------------- building

def gtd_mdp(states, d, N, gamma, seed):
    """Random ergodic MDP with Gaussian features and per-agent rewards."""
    rng = np.random.default_rng(seed)
    P = rng.random((states, states)) + 0.05
    P /= P.sum(axis=1, keepdims=True)
    rewards = rng.random((N, states))
    features = rng.standard_normal((states, d))
    return P, rewards, features, gamma


def build_system(node):
    kind = node["kind"]
    if kind == "random":
        return random_instance(node["d"], node["N"], seed=node["seed"], delta_margin=node["delta_margin"])
    if kind == "gtd":
        sys = gtd_instance(*gtd_mdp(node["states"], node["d"], node["N"], node["gamma"], node["seed"]))
        return scale_to_assumption2(sys)[0]
    return load_system(node["path"])


def build_weights(node, N):
    topo = build_topology(node["kind"], N, edge_prob=node.get("edge_prob"), seed=node.get("seed", 0))
    return lazy_weights(topo, node["laziness"])


def build_noise(node, d):
    if node == "none":
        return None
    if node == "gtd":
        return "gtd"
    if "iso" in node:
        return make_noise_model(node["iso"] * np.eye(2 * d))
    model = make_noise_model(node["matrix"])
    if model.d != d:
        raise ExperimentError(f"noise matrix is {2 * model.d}x{2 * model.d}, system needs {2 * d}x{2 * d}")
    return model


def schur_gain(sys, rate):
    """Common gain ``alpha0 = beta0 = rate / lambda_min(Re eig(Delta))``.

    With this gain the linearized slow dynamics ``dy/dt = -beta0 Delta y``
    contract at exponential rate ``rate`` in ``log k``, so a deterministic
    slow-iterate error decays like ``k^-rate``.
    """
    lam = min_real_eigenvalue(schur_complement(sys))
    if lam <= 0:
        raise ExperimentError("Schur complement is not positive stable")
    return rate / lam


@dataclass
class Setup:
    sys: object
    W: object
    V: object
    schedule: StepSchedule
    noise: object
    params: object
    solution: object


def prepare(cfg):
    """Materialize the system, graphs, schedule and bound parameters."""
    sys = build_system(cfg.system)
    W = build_weights(cfg.topology, sys.N)
    V = build_weights(cfg.topology_v, sys.N)
    noise = build_noise(cfg.noise, sys.d)
    alpha0, beta0 = cfg.alpha0, cfg.beta0
    if cfg.gain_rule is not None:
        alpha0 = beta0 = schur_gain(sys, cfg.gain_rule["schur_rate"])
    s = StepSchedule(alpha0, beta0)
    sigma = sigma_pair(W, V)
    delta = cfg.delta
    if delta is not None and not sigma < delta:
        raise ExperimentError(f"delta = {delta} must exceed sigma = {sigma}")
    C = noise.C if hasattr(noise, "C") else 0.0
    params = make_bound_params(W.sigma2, V.sigma2, alpha0, beta0, sys.N, sys.R, C, delta=delta,
                               D0=cfg.D0 or 0.0, D1=cfg.D1 or 0.0)
    return Setup(sys, W, V, s, noise, params, exact_solution(sys))


# ---------------------------------------------------------------- running

def _replica_seed(cfg, r):
    return [cfg.seed, r]


def _run_replica(cfg, r, setup=None):
    setup = setup or prepare(cfg)
    auditor = None
    if cfg.audit and setup.noise != "gtd":
        auditor = InequalityAuditor(setup.params, residual_checks=cfg.theorem_checks)
    try:
        traj = run(setup.sys, setup.W, setup.V, setup.schedule, setup.noise, K=cfg.K,
                   record_every=cfg.record_every, seed=_replica_seed(cfg, r), solution=setup.solution,
                   auditor=auditor)
    except DivergenceError as exc:
        raise ExperimentError(f"replica {r} diverged at k = {exc.k}") from exc
    return traj, None if auditor is None else auditor.report()


def _replica_task(args):
    cfg, r = args
    return _run_replica(cfg, r)


def worker_count():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer %s=%r", WORKERS_ENV, raw)
        return 1


def run_replicas(cfg, setup=None, workers=None):
    """All replicas in replica order, concurrently when a worker cap above 1 is set."""
    workers = min(worker_count() if workers is None else workers, cfg.replicas)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_replica_task, [(cfg, r) for r in range(cfg.replicas)]))
    setup = setup or prepare(cfg)
    return [_run_replica(cfg, r, setup) for r in range(cfg.replicas)]


def _clean(v):
    """JSON-safe scalar: non-finite floats become null."""
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def _clean_tree(obj):
    if isinstance(obj, dict):
        return {str(k): _clean_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_tree(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean_tree(v) for v in obj.tolist()]
    return _clean(obj)


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean_tree(doc), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def mean_table(trajs):
    """Replica means of every trajectory column plus the standard error of the MSE."""
    cols = {c: np.mean([t.column(c) for t in trajs], axis=0) for c in TRAJECTORY_COLUMNS}
    mse = np.array([t.column("mse_weighted") for t in trajs])
    n = mse.shape[0]
    cols["mse_weighted_se"] = mse.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(mse.shape[1])
    cols["k"] = trajs[0].column("k").astype(int)
    return cols


def _fit(ks, vals, window):
    try:
        f = fit_rate_exponent((ks, vals), window=window)
    except AnalysisError as exc:
        return {"exponent": None, "error": str(exc)}
    return {"exponent": f.exponent, "intercept": f.intercept, "r_squared": f.r_squared,
            "window": list(f.window), "samples": f.samples}


def _tail_window(cfg):
    lo = min(cfg.fit_window[0], cfg.K / 10)
    return lo, float(cfg.K)


def summarize(cfg, setup, table, reports):
    """Summary document of one run; pure function of its inputs."""
    p = setup.params
    ks = table["k"]
    centralized = table["ybar_err"] + np.array([setup.schedule.ratio(int(k)) for k in ks]) * table["xbar_err"]
    fitted = None
    if cfg.D0 is None or cfg.D1 is None:
        fitted = fit_lemma2_constants(ks, centralized)
    D0 = cfg.D0 if cfg.D0 is not None else (fitted[0] if fitted else None)
    D1 = cfg.D1 if cfg.D1 is not None else (fitted[1] if fitted else None)
    lem1 = [lemma1_bound(int(k), p) for k in ks]
    curves = {"k": ks, "consensus_sq": table["consensus_sq"], "lemma1_bound": lem1,
              "mse_weighted": table["mse_weighted"], "centralized_err": centralized}
    theorem = {"conditional_on": {"D0": D0, "D1": D1, "fitted": fitted is not None and cfg.D0 is None},
               "enabled": cfg.theorem_checks and D0 is not None}
    if theorem["enabled"]:
        pt = replace(p, D0=D0, D1=D1)
        lem2 = [lemma2_bound(int(k), D0, D1) for k in ks]
        thm = [theorem1_bound(int(k), pt) for k in ks]
        curves["lemma2_bound"] = lem2
        curves["theorem1_bound"] = thm
        over = [int(k) for k, m, b in zip(ks, table["mse_weighted"], thm) if m > b]
        theorem["dominance_failures"] = len(over)
        theorem["first_failure_k"] = over[0] if over else None
    lo, hi = _tail_window(cfg)
    tail = (ks >= lo) & (ks <= hi)
    audit = None
    if reports and reports[0] is not None:
        names = reports[0]["checks"].keys()
        audit = {
            "violations": sum(r["violations"] for r in reports),
            "checks": {n: {"checked": sum(r["checks"][n]["checked"] for r in reports),
                           "violations": sum(r["checks"][n]["violations"] for r in reports)} for n in names},
            "per_replica_violations": [r["violations"] for r in reports],
            "max_lemma1_ratio": max(r["max_lemma1_ratio"] for r in reports),
        }
    return {
        "parameters": {
            "N": setup.sys.N, "d": setup.sys.d, "alpha0": setup.schedule.alpha0, "beta0": setup.schedule.beta0,
            "sigma_W": p.sigma_W, "sigma_V": p.sigma_V, "sigma": p.sigma, "delta": p.delta,
            "R": p.R, "C": p.C, "K": cfg.K, "replicas": cfg.replicas, "seed": cfg.seed,
            "min_real_schur": min_real_eigenvalue(schur_complement(setup.sys)),
        },
        "Kstar": p.Kstar,
        "D": p.D,
        "lemma2_constants": {"D0": D0, "D1": D1, "source": "config" if fitted is None else "fitted"},
        "exponents": {
            "mse_weighted": _fit(ks, table["mse_weighted"], cfg.fit_window),
            "consensus_sq": _fit(ks, table["consensus_sq"], cfg.fit_window),
        },
        "final": {"mse_weighted": table["mse_weighted"][-1], "consensus_sq": table["consensus_sq"][-1]},
        "tail_consensus_sq": float(np.mean(table["consensus_sq"][tail])) if np.any(tail) else None,
        "audit": audit,
        "theorem1": theorem,
        "theorem_checks": cfg.theorem_checks,
        "warnings": cfg.warnings,
        "curves": curves,
    }


def run_dir(cfg):
    return Path(cfg.output_dir) / f"run-{cfg.digest()[:16]}"


@dataclass
class RunResult:
    path: Path
    summary: dict

    @property
    def violations(self):
        audit = self.summary.get("audit")
        return 0 if audit is None else audit["violations"]

    @property
    def exit_code(self):
        return 0 if self.violations == 0 else 1


def run_experiment(cfg, out=None, workers=None):
    """Run every replica and write the artifact directory.

    ``workers`` overrides the worker cap read from ``DTSA_WORKERS``.
    """
    path = Path(out) if out is not None else run_dir(cfg)
    path.mkdir(parents=True, exist_ok=True)
    setup = prepare(cfg)
    results = run_replicas(cfg, setup, workers)
    trajs = [t for t, _ in results]
    reports = [r for _, r in results]
    write_json(path / "config.json", cfg.to_dict())
    for r, traj in enumerate(trajs):
        traj.to_csv(path / f"replica_{r:03d}.csv")
    table = mean_table(trajs)
    write_csv(path / "mean.csv", MEAN_COLUMNS, zip(*(table[c] for c in MEAN_COLUMNS)))
    summary = summarize(cfg, setup, table, reports)
    write_json(path / "summary.json", summary)
    return RunResult(path, summary)


def read_mean_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ExperimentError(f"{path} has no rows")
    table = {c: np.array([float(r[c]) for r in rows]) for c in MEAN_COLUMNS}
    table["k"] = table["k"].astype(int)
    return table


def analyze_run(path):
    """Recompute the summary of an existing run directory from its mean table.

    Audit counts need every step and are carried over from the stored
    summary when present.
    """
    path = Path(path)
    cfg = config_from_dict(json.loads((path / "config.json").read_text(encoding="utf-8")))
    setup = prepare(cfg)
    table = read_mean_table(path / "mean.csv")
    summary = summarize(cfg, setup, table, None)
    old = path / "summary.json"
    if old.exists():
        summary["audit"] = json.loads(old.read_text(encoding="utf-8")).get("audit")
    return summary


def validate_experiment(cfg):
    """Check the configured system and graphs against the standing assumptions."""
    setup = prepare(cfg)
    return {
        "system": validate_assumptions(setup.sys),
        "W": validate_assumption3(setup.W),
        "V": validate_assumption3(setup.V),
        "Kstar": setup.params.Kstar,
        "D": setup.params.D,
        "sigma": setup.params.sigma,
        "delta": setup.params.delta,
        "warnings": cfg.warnings,
        "ok": bool(validate_assumptions(setup.sys)["ok"] and validate_assumption3(setup.W)["ok"]
                   and validate_assumption3(setup.V)["ok"]),
    }


# ---------------------------------------------------------------- sweeps

def _point_config(cfg, point):
    doc = cfg.to_dict()
    doc["output_dir"] = cfg.output_dir
    for key, value in point.items():
        if key == "topology":
            kind = value if isinstance(value, str) else value.get("kind")
            doc["topology"] = dict(doc["topology"], kind=kind) if isinstance(value, str) else dict(value)
            doc["topology"].setdefault("laziness", 0.0)
            doc["topology_v"] = copy.deepcopy(doc["topology"])
        elif key == "laziness":
            doc["topology"] = dict(doc["topology"], laziness=value)
            doc["topology_v"] = dict(doc["topology_v"], laziness=value)
        elif key == "N":
            if doc["system"]["kind"] == "file":
                raise ConfigError(["sweep over N needs a generated system"])
            doc["system"] = dict(doc["system"], N=value)
        else:
            doc[key] = value
    if doc["delta"] is None:
        del doc["delta"]
    return config_from_dict(doc)


def expand_grid(grid):
    """Cartesian product of a ``{key: [values]}`` grid, in sorted key order."""
    if not isinstance(grid, dict) or not grid:
        raise ConfigError(["grid: must be a nonempty object"])
    errors = [f"grid: unknown key {k!r}" for k in sorted(set(grid) - set(SWEEP_KEYS))]
    errors += [f"grid.{k}: must be a nonempty list" for k in sorted(grid)
               if not isinstance(grid[k], list) or not grid[k]]
    if errors:
        raise ConfigError(errors)
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def summary_row(point, summary):
    return {
        "point": json.dumps(point, sort_keys=True, separators=(",", ":")),
        "status": "ok",
        "sigma": summary["parameters"]["sigma"],
        "exponent": summary["exponents"]["mse_weighted"]["exponent"],
        "final_consensus_sq": summary["final"]["consensus_sq"],
        "tail_consensus_sq": summary["tail_consensus_sq"],
        "final_mse_weighted": summary["final"]["mse_weighted"],
        "violations": None if summary["audit"] is None else summary["audit"]["violations"],
        "error": "",
    }


def _sweep_task(args):
    cfg, point, workers = args
    try:
        pcfg = _point_config(cfg, point)
        res = run_experiment(pcfg, workers=workers)
        return summary_row(point, res.summary)
    except (ConfigError, ExperimentError, ValueError) as exc:
        row = dict.fromkeys(SWEEP_COLUMNS)
        row.update(point=json.dumps(point, sort_keys=True, separators=(",", ":")), status="failed",
                   error=str(exc))
        return row


def _point_key(point):
    # numbers sort numerically, everything else by canonical JSON
    return tuple(
        (k, (0, float(v), "") if _is_num(v) else (1, 0.0, json.dumps(v, sort_keys=True)))
        for k, v in sorted(point.items())
    )


def run_sweep(cfg, grid):
    """Run one experiment per grid point; failures are recorded, not raised.

    Rows are sorted by point (numbers numerically), so the table does not
    depend on grid order or scheduling. The table is also written to
    ``<output_dir>/sweep-<hash>.csv``.
    """
    points = expand_grid(grid)
    workers = min(worker_count(), len(points))
    # parallelism goes to grid points; replicas inside a point then run serially
    tasks = [(cfg, p, 1 if workers > 1 else None) for p in points]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_task, tasks))
    else:
        rows = [_sweep_task(t) for t in tasks]
    rows.sort(key=lambda r: _point_key(json.loads(r["point"])))
    blob = json.dumps({"config": cfg.to_dict(), "grid": grid}, sort_keys=True).encode("utf-8")
    out = Path(cfg.output_dir) / f"sweep-{hashlib.sha256(blob).hexdigest()[:16]}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, SWEEP_COLUMNS, ([_csv_cell(r[c]) for c in SWEEP_COLUMNS] for r in rows))
    return rows, out


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float) and not math.isfinite(v):
        return ""
    return v
