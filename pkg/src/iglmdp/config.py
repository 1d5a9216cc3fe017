"""Experiment configuration and declarative environment files.

A config file is TOML with three sections::

    [env]       preset = "synthetic-v1"   (or file = "my_env.toml", or an inline definition)
    [decoder]   epsilon, delta, homing_episodes, n0, bonus_scale, levels
    [online]    episodes or total_episodes, gamma_mode, gamma, oracle, eta, lr

plus top-level ``seeds``, ``out`` and ``workers``.  An inline environment
definition (also the format of an env file) looks like::

    layers = [["s1"], ["a", "b"], ["t1", "t2"]]
    actions = 2
    M = 0.5
    theta = 0.9
    c = 0.0
    [contexts]
    labels = ["x0"]
    probs = [1.0]
    [[transition]]
    from = "s1"
    action = "*"
    to = { a = 0.5, b = 0.5 }
    [[reward]]
    context = "*"
    state = "t1"
    values = [0.9, 0.1]
    [feedback]
    symbols = ["0", "1"]
    [[feedback.channel]]
    context = "*"
    state = "*"
    r0 = [1.0, 0.0]
    r1 = [0.0, 1.0]

Transition rows, reward rows and channel rows not listed default to zero,
and every non-terminal (state, action) row must end up a distribution.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import PRESETS, ContextModel, FeedbackModel, IglEnv, LayeredMdp
from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


GAMMA_MODES = ("schedule", "constant", "theory")
ORACLES = ("aggregation", "ogd")


# ---------------------------------------------------------------------------
# environments


def _pick(spec, labels, what):
    if spec == "*":
        return list(range(len(labels)))
    if isinstance(spec, int):
        if not 0 <= spec < len(labels):
            raise ConfigError(f"{what} index {spec} out of range")
        return [spec]
    try:
        return [labels.index(str(spec))]
    except ValueError:
        raise ConfigError(f"unknown {what} {spec!r}") from None


def env_from_mapping(d: dict, name: str = "custom") -> IglEnv:
    """Build an :class:`IglEnv` from a parsed declarative definition."""
    try:
        layers_lab = [[str(s) for s in layer] for layer in d["layers"]]
        K = int(d["actions"])
        ctx = d["contexts"]
        fb = d["feedback"]
        M, theta, c = float(d["M"]), float(d["theta"]), float(d["c"])
    except KeyError as e:
        raise ConfigError(f"environment definition is missing key {e}") from None
    labels = [s for layer in layers_lab for s in layer]
    if len(set(labels)) != len(labels):
        raise ConfigError("state labels must be unique")
    S = len(labels)
    layers = []
    i = 0
    for layer in layers_lab:
        layers.append(list(range(i, i + len(layer))))
        i += len(layer)
    actions = [str(a) for a in range(K)]

    P = np.zeros((S, K, S))
    for row in d.get("transition", []):
        for s in _pick(row["from"], labels, "state"):
            for a in _pick(row.get("action", "*"), actions, "action"):
                for t, p in row["to"].items():
                    P[s, a, _pick(t, labels, "state")[0]] = float(p)

    ctx_labels = [str(x) for x in ctx["labels"]]
    X = len(ctx_labels)
    f = np.zeros((X, S, K))
    for row in d.get("reward", []):
        vals = np.asarray(row["values"], dtype=float)
        if vals.shape != (K,):
            raise ConfigError(f"reward values for {row.get('state')!r} must have length {K}")
        for x in _pick(row.get("context", "*"), ctx_labels, "context"):
            for s in _pick(row["state"], labels, "state"):
                f[x, s] = vals

    symbols = [str(y) for y in fb.get("symbols", ["0", "1"])]
    C = np.zeros((X, S, 2, len(symbols)))
    for row in fb.get("channel", []):
        r0 = np.asarray(row["r0"], dtype=float)
        r1 = np.asarray(row["r1"], dtype=float)
        if r0.shape != (len(symbols),) or r1.shape != (len(symbols),):
            raise ConfigError("channel rows must have one entry per feedback symbol")
        for x in _pick(row.get("context", "*"), ctx_labels, "context"):
            for s in _pick(row.get("state", "*"), labels, "state"):
                C[x, s, 0], C[x, s, 1] = r0, r1

    mdp = LayeredMdp(layers=tuple(layers), n_actions=K, transition=P, state_labels=tuple(labels))
    return IglEnv(mdp=mdp, contexts=ContextModel(tuple(ctx_labels), ctx["probs"]),
                  feedback=FeedbackModel(f, C, tuple(symbols)), M=M, theta=theta, c=c, name=name)


def load_env_file(path) -> IglEnv:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    except OSError as e:
        raise OSError(f"cannot read environment file {path}: {e.strerror}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return env_from_mapping(d.get("env", d), name=path.stem)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentConfig:
    """Every knob of a full run.  Defaults reproduce the synthetic experiment.

    ``online_episodes`` fixes the length of the online phase directly.  When
    it is None the online phase gets whatever ``total_episodes`` leaves after
    exploration.
    """

    env: str = "synthetic-v1"
    env_params: dict = field(default_factory=dict)
    env_file: str | None = None
    env_inline: dict | None = None
    epsilon: float = 0.05
    delta: float = 0.05
    homing_episodes: int = 5000
    n0: int = 5000
    bonus_scale: float = 1.0
    levels: tuple = (0.0, 0.5, 1.0, 1.5)
    total_episodes: int | None = None
    online_episodes: int | None = 40000
    gamma_mode: str = "schedule"
    gamma: float = 1000.0
    oracle: str = "aggregation"
    eta: float = 0.5
    lr: float = 0.05
    final_window: int = 2000
    seeds: tuple = (0,)
    out: str = "runs"
    workers: int = 1
    _env_cache: IglEnv | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.levels = tuple(float(v) for v in self.levels)

    def build_env(self) -> IglEnv:
        if self._env_cache is None:
            if self.env_inline is not None:
                self._env_cache = env_from_mapping(self.env_inline, name="inline")
            elif self.env_file is not None:
                self._env_cache = load_env_file(self.env_file)
            elif self.env in PRESETS:
                self._env_cache = PRESETS[self.env](**self.env_params)
            else:
                raise ConfigError(f"unknown environment preset {self.env!r}; "
                                  f"choose from {sorted(PRESETS)} or give env.file")
        return self._env_cache

    def exploration_floor(self, env: IglEnv | None = None) -> int:
        """Episodes phases 1-3 need at least: N per terminal state plus N0 for one collected state."""
        env = env or self.build_env()
        return self.homing_episodes * len(env.mdp.terminal_states) + self.n0

    def validate(self) -> "ExperimentConfig":
        if not 0 < self.epsilon < 0.25:
            raise ConfigError(f"epsilon={self.epsilon} must lie in (0, 1/4)")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta={self.delta} must lie in (0, 1)")
        for name in ("homing_episodes", "n0", "final_window", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.gamma_mode not in GAMMA_MODES:
            raise ConfigError(f"gamma_mode must be one of {GAMMA_MODES}")
        if self.oracle not in ORACLES:
            raise ConfigError(f"oracle must be one of {ORACLES}")
        if self.gamma <= 0 or self.lr <= 0 or self.eta < 0 or self.bonus_scale <= 0:
            raise ConfigError("gamma, lr and bonus_scale must be positive and eta non-negative")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.total_episodes is None and self.online_episodes is None:
            raise ConfigError("set total_episodes or online_episodes")
        if self.online_episodes is not None and self.online_episodes < 1:
            raise ConfigError("online_episodes must be at least 1")
        if self.total_episodes is not None:
            floor = self.exploration_floor()
            if self.total_episodes <= floor:
                raise ConfigError(f"total_episodes={self.total_episodes} does not exceed the "
                                  f"exploration budget of at least {floor} episodes")
        else:
            self.build_env()
        return self

    def horizon_T(self) -> int:
        """Episode count used for theory-mode parameters."""
        if self.total_episodes is not None:
            return self.total_episodes
        return self.online_episodes + self.exploration_floor()

    def override(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return dataclasses.replace(self, _env_cache=None, **kw)

    def echo(self) -> str:
        """Resolved configuration as TOML-style text."""
        lines = []
        for f in dataclasses.fields(self):
            if f.name.startswith("_"):
                continue
            lines.append(f"{f.name} = {_toml_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _toml_value(v):
    if v is None:
        return '"none"'
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else f'"{v}"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(x)}" for k, x in sorted(v.items())) + " }"
    return str(v)


_SECTION_KEYS = {
    "decoder": ("epsilon", "delta", "homing_episodes", "n0", "bonus_scale", "levels"),
    "online": ("total_episodes", "episodes", "gamma_mode", "gamma", "oracle", "eta", "lr",
               "final_window"),
}


def config_from_mapping(d: dict, base_dir=None) -> ExperimentConfig:
    kw = {}
    env = dict(d.get("env", {}))
    if "file" in env:
        p = Path(env.pop("file"))
        kw["env_file"] = str(p if p.is_absolute() or base_dir is None else Path(base_dir) / p)
    elif "layers" in env:
        kw["env_inline"] = env
        kw["env"] = "inline"
        env = {}
    if "preset" in env:
        kw["env"] = env.pop("preset")
    if "params" in env:
        kw["env_params"] = dict(env.pop("params"))
    if env:
        raise ConfigError(f"unknown [env] keys {sorted(env)}")
    for section, keys in _SECTION_KEYS.items():
        sec = dict(d.get(section, {}))
        for k in keys:
            if k in sec:
                kw["online_episodes" if k == "episodes" else k] = sec.pop(k)
        if sec:
            raise ConfigError(f"unknown [{section}] keys {sorted(sec)}")
    if "total_episodes" in kw and "online_episodes" not in kw:
        kw["online_episodes"] = None
    for k in ("seeds", "out", "workers"):
        if k in d:
            kw[k] = d[k]
    unknown = set(d) - {"env", "decoder", "online", "seeds", "out", "workers"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    try:
        return ExperimentConfig(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_mapping(d, base_dir=path.parent)
