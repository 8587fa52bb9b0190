"""Run configuration: a TOML document with dotted sections, validated before any work starts.

Sections::

    mdp.*     finite problem for ``solve`` (``kind`` or ``path``)
    env.*     environment for ``train`` (``kind`` = pendulum or a finite kind, or ``path``)
    solve.*   eta, gamma, em_iterations, lam, e_step, initial_policy
    solver.*  tolerance, max_sweeps, improvement_mode
    train.*   any TrainConfig field
    check.*   names, fault
    run.*     seeds
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import agent, checks, solvers
from .envs import PendulumEnv, TabularEnv, make_finite
from .errors import ConfigError
from .mdp import FiniteMdp, discount_transform, load_mdp, uniform_policy, validate

SECTIONS = ("mdp", "env", "solve", "solver", "train", "check", "run")
FINITE_KINDS = {
    "chain": (),
    "twist2": (),
    "gridworld": ("size", "step_reward", "goal_reward"),
    "random": ("n_states", "n_actions", "layers", "seed", "max_successors", "single_start"),
}

# Pendulum returns run to the hundreds, so eta is scaled down, and nu learns ten times
# slower than the model: on a deterministic kernel its dual target keeps growing and
# otherwise swamps eta * r in the critic target. train.* still overrides these.
PENDULUM_DEFAULTS = dict(eta=0.1, lr_log_ratio=3e-5, max_episode_steps=200, eval_interval=2000)


def load_document(path) -> tuple[dict, Path]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"--config: no such file {str(path)!r}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"--config: not a valid TOML document ({err})") from err
    for key, value in doc.items():
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown section; expected one of {SECTIONS}")
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: must be a section of dotted keys")
    return doc, path.parent


def _coerce(name: str, value, like):
    """Check ``value`` against the type of the default ``like``."""
    if isinstance(like, bool):
        ok = isinstance(value, bool)
    elif isinstance(like, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(like, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(like, str):
        ok = isinstance(value, str)
    elif isinstance(like, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{name}: expected {type(like).__name__}, got {value!r}")
    return value


def _section(doc: dict, name: str, defaults: dict) -> dict:
    raw = doc.get(name, {})
    out = {}
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"{name}.{key}: unknown key; expected one of {sorted(defaults)}")
        out[key] = _coerce(f"{name}.{key}", value, defaults[key]) if defaults[key] is not None else value
    return out


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as err:
        raise ConfigError(f"--seed: expected comma-separated integers, got {text!r}") from err
    if not seeds:
        raise ConfigError("--seed: empty seed list")
    return seeds


def seeds_from(doc: dict, override: str | None) -> list[int]:
    if override is not None:
        return parse_seeds(override)
    run = _section(doc, "run", {"seeds": None})
    seeds = run.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool)
                                                           for s in seeds):
        raise ConfigError(f"run.seeds: expected a nonempty list of integers, got {seeds!r}")
    return seeds


def _finite(section: str, spec: dict, base: Path) -> FiniteMdp:
    spec = dict(spec)
    if "path" in spec:
        if len(spec) > 1:
            raise ConfigError(f"{section}.path: cannot be combined with other {section} keys")
        path = (base / spec["path"]).resolve()
        if not path.is_file():
            raise ConfigError(f"{section}.path: no such file {str(path)!r}")
        try:
            mdp = load_mdp(path)
        except (ValueError, KeyError, TypeError) as err:
            raise ConfigError(f"{section}.path: unreadable MDP document ({err})") from err
    else:
        kind = spec.get("kind")
        if kind not in FINITE_KINDS:
            raise ConfigError(f"{section}.kind: expected one of {sorted(FINITE_KINDS)} or {section}.path, "
                              f"got {kind!r}")
        for key in spec:
            if key != "kind" and key not in FINITE_KINDS[kind]:
                raise ConfigError(f"{section}.{key}: not a parameter of kind {kind!r}")
        try:
            mdp = make_finite(spec)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"{section}: {err}") from err
    problems = validate(mdp)
    if problems:
        raise ConfigError(f"{section}: invalid MDP: " + "; ".join(problems))
    return mdp


# ---------------------------------------------------------------------------
# solve


SOLVE_DEFAULTS = dict(eta=1.0, gamma=None, em_iterations=10, lam=0.0, e_step="value_iteration",
                      initial_policy="uniform")


@dataclass
class SolveRun:
    mdp: FiniteMdp
    eta: float
    em_iterations: int
    lam: float
    e_step: str
    initial_policy: str
    solver: solvers.SolverConfig

    def baseline(self, seed: int) -> np.ndarray:
        if self.initial_policy == "uniform":
            return uniform_policy(self.mdp)
        rng = np.random.default_rng(seed)
        return rng.dirichlet(np.ones(self.mdp.n_actions), size=self.mdp.n_states)


def solve_run(doc: dict, base: Path) -> SolveRun:
    if "mdp" not in doc:
        raise ConfigError("mdp: section required for solve (mdp.kind or mdp.path)")
    mdp = _finite("mdp", doc["mdp"], base)
    s = {**SOLVE_DEFAULTS, **_section(doc, "solve", SOLVE_DEFAULTS)}
    eta = _coerce("solve.eta", s["eta"], 1.0)
    if not eta > 0:
        raise ConfigError(f"solve.eta: must be positive, got {eta!r}")
    if s["gamma"] is not None:
        gamma = _coerce("solve.gamma", s["gamma"], 1.0)
        if not 0 < gamma < 1:
            raise ConfigError(f"solve.gamma: must lie in (0, 1), got {gamma!r}")
        mdp = discount_transform(mdp, gamma)
    if s["em_iterations"] < 1:
        raise ConfigError(f"solve.em_iterations: must be >= 1, got {s['em_iterations']!r}")
    if s["lam"] < 0:
        raise ConfigError(f"solve.lam: must be >= 0, got {s['lam']!r}")
    if s["e_step"] not in solvers.E_STEP_SOLVERS:
        raise ConfigError(f"solve.e_step: expected one of {sorted(solvers.E_STEP_SOLVERS)}, got {s['e_step']!r}")
    if s["initial_policy"] not in ("uniform", "random"):
        raise ConfigError(f"solve.initial_policy: expected uniform or random, got {s['initial_policy']!r}")
    defaults = {f.name: f.default for f in dataclasses.fields(solvers.SolverConfig)}
    cfg = solvers.SolverConfig(**{**defaults, **_section(doc, "solver", defaults)})
    return SolveRun(mdp, eta, s["em_iterations"], s["lam"], s["e_step"], s["initial_policy"], cfg)


# ---------------------------------------------------------------------------
# train


TRAIN_FIELDS = {f.name: f.default for f in dataclasses.fields(agent.TrainConfig)}
ENV_DEFAULTS = dict(kind=None, path=None, size=None, step_reward=None, goal_reward=None, n_states=None,
                    n_actions=None, layers=None, seed=None, max_successors=None, single_start=None)


@dataclass
class TrainRun:
    env: object
    cfg: agent.TrainConfig


def train_run(doc: dict, base: Path) -> TrainRun:
    if "env" not in doc:
        raise ConfigError("env: section required for train (env.kind or env.path)")
    spec = dict(doc["env"])
    for key in spec:
        if key not in ENV_DEFAULTS:
            raise ConfigError(f"env.{key}: unknown key")
    overrides = _section(doc, "train", TRAIN_FIELDS)
    if spec.get("kind") == "pendulum":
        if len(spec) > 1:
            raise ConfigError(f"env.{next(k for k in spec if k != 'kind')}: not a pendulum parameter")
        env, defaults = PendulumEnv(), PENDULUM_DEFAULTS
    else:
        mdp = _finite("env", spec, base)
        defaults = agent.TABULAR_DEFAULTS
        env = None
    cfg = agent.TrainConfig(**{**defaults, **overrides})
    if env is None:
        env = TabularEnv(mdp, cfg.max_episode_steps)
    return TrainRun(env, cfg)


# ---------------------------------------------------------------------------
# check


CHECK_DEFAULTS = dict(names=None, fault=None)


def check_run(doc: dict) -> dict:
    c = {**CHECK_DEFAULTS, **_section(doc, "check", CHECK_DEFAULTS)}
    names = c["names"]
    if names is not None:
        if not isinstance(names, list) or not all(n in checks.CHECKS for n in names):
            raise ConfigError(f"check.names: expected a list drawn from {list(checks.CHECKS)}, got {names!r}")
    if c["fault"] is not None and c["fault"] not in checks.FAULTS:
        raise ConfigError(f"check.fault: expected one of {sorted(checks.FAULTS)}, got {c['fault']!r}")
    return c
