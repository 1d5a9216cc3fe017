"""Full two-stage run: explore and fit the decoder, then learn a policy online.

Phases, each drawing from its own named random stream under the master seed:

1. ``homing``      one optimistic learner per terminal state, N episodes each
2. ``reachable``   keep terminal states whose hit rate clears 4 eps (no episodes)
3. ``collection``  roll homing mixtures until N0 tuples land on each kept state
4. ``erm``         fit a posterior per kept state (no episodes)
5. ``online``      the remaining episodes against decoded rewards
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .decoder import (collect_tuples, default_hypothesis_class, env_constants, fit_decoder,
                      matches_truth, posterior_risk, true_hypothesis_index)
from .env import IglEnv, rng_stream
from .errors import ConfigError, PipelineError
from .online import (METRIC_COLUMNS, AggregationOracle, OgdOracle, OnlineMetrics, TheoryParams,
                     compute_theory_params, constant_gamma, gamma_schedule, run_online_loop)
from .reachability import build_reachable_set, learn_homing_policies, visitation_from_training

SENTINEL = "NA"


@dataclass(eq=False)
class RunReport:
    seed: int
    config: ExperimentConfig
    env: IglEnv
    phase_episodes: dict = field(default_factory=dict)
    visitation: object = None
    reachable: object = None
    hypotheses: dict = field(default_factory=dict)
    true_index: dict = field(default_factory=dict)
    risks: dict = field(default_factory=dict)
    is_true: dict = field(default_factory=dict)
    metrics: OnlineMetrics | None = None
    theory: TheoryParams | None = None
    completed: bool = False

    @property
    def total_episodes(self) -> int:
        return sum(self.phase_episodes.values())

    def summary(self) -> dict:
        """Flat key/value summary; only deterministic quantities."""
        labels = self.env.mdp.state_labels
        out = {"seed": self.seed, "env": self.env.name, "completed": self.completed}
        for phase in ("homing", "collection", "online"):
            out[f"episodes_{phase}"] = self.phase_episodes.get(phase, 0)
        out["episodes_total"] = self.total_episodes
        if self.visitation is not None:
            for s, p in zip(self.visitation.states, self.visitation.p_hat):
                out[f"visit_freq_{labels[s]}"] = float(p)
            out["visit_beta"] = float(self.visitation.beta)
        if self.reachable is not None:
            out["reachable"] = " ".join(labels[s] for s in sorted(self.reachable.states))
        for s, h in sorted(self.hypotheses.items()):
            out[f"erm_{labels[s]}_f"] = h.f_index
            out[f"erm_{labels[s]}_phi"] = h.phi_index
            out[f"erm_{labels[s]}_is_true"] = self.is_true[s]
            out[f"erm_{labels[s]}_posterior_risk"] = self.risks[s]
        if self.theory is not None:
            out["theory_gamma"], out["theory_n0"], out["theory_eps"] = map(float, self.theory)
        m = self.metrics
        if m is not None and len(m):
            w = min(self.config.final_window, len(m))
            dec = m.decoded_reward[-w:]
            out["v_star"] = m.v_star
            out["final_window"] = w
            out["final_window_true_reward"] = float(m.true_reward[-w:].mean())
            out["final_window_decoded_reward"] = float(np.nanmean(dec)) if np.isfinite(dec).any() else SENTINEL
            out["final_window_policy_value"] = float(m.policy_value[-w:].mean())
            out["cumulative_regret"] = float(len(m) * m.v_star - m.policy_value.sum())
            out["filtered_episodes"] = int(np.isnan(m.decoded_reward).sum())
            out["occupancy_solves"] = m.solves
        return out


def _phase(name, report):
    """Context manager turning any failure into a PipelineError naming the phase."""

    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, tp, exc, tb):
            if exc is None or isinstance(exc, PipelineError):
                return False
            raise PipelineError(name, exc, report) from exc

    return _Guard()


def run_full_pipeline(config: ExperimentConfig, seed: int | None = None,
                      stop_after: str | None = None) -> RunReport:
    """Run every phase for one seed.  Identical (config, seed) give identical reports.

    ``stop_after="erm"`` ends the run once the decoder is fitted.
    """
    if stop_after not in (None, "erm", "online"):
        raise ValueError("stop_after must be 'erm' or 'online'")
    config.validate()
    seed = config.seeds[0] if seed is None else int(seed)
    env = config.build_env()
    rep = RunReport(seed, config, env)
    terminal = env.mdp.terminal_states
    N = config.homing_episodes

    with _phase("homing", rep):
        homings = learn_homing_policies(env, terminal, N, config.delta,
                                        rng_stream(seed, "homing"), config.bonus_scale)
        rep.phase_episodes["homing"] = N * len(terminal)

    with _phase("reachable", rep):
        rep.visitation = visitation_from_training(homings, env, config.delta)
        rep.reachable = build_reachable_set(rep.visitation, config.epsilon)

    consts = env_constants(env)
    with _phase("collection", rep):
        cls = default_hypothesis_class(env, consts, levels=config.levels)
        data = collect_tuples(rep.reachable, dict(zip(terminal.tolist(), homings)), env, config.n0,
                              rng_stream(seed, "collection"), config.epsilon, config.delta)
        rep.phase_episodes["collection"] = sum(d.episodes for d in data.values())

    with _phase("erm", rep):
        rep.hypotheses = fit_decoder(data, cls, env)
        for s, h in rep.hypotheses.items():
            idx = true_hypothesis_index(cls, env, s)
            D = len(cls.decoders[s])
            rep.true_index[s] = None if idx is None else (idx // D, idx % D)
            rep.risks[s] = posterior_risk(h, env)
            rep.is_true[s] = matches_truth(h, env)
    if stop_after == "erm":
        rep.completed = True
        return rep

    with _phase("online", rep):
        if config.online_episodes is not None:
            T_online = config.online_episodes
        else:
            T_online = config.total_episodes - rep.phase_episodes["homing"] - rep.phase_episodes["collection"]
            if T_online < 1:
                raise ConfigError(f"exploration used {rep.total_episodes} episodes, leaving none "
                                  f"of total_episodes={config.total_episodes} for the online phase")
        H, K = env.horizon, env.n_actions
        if config.oracle == "aggregation":
            oracle = AggregationOracle(cls.rewards, eta=config.eta)
        else:
            oracle = OgdOracle(env.reward.shape, lr=config.lr)
        if config.gamma_mode == "schedule":
            gamma = gamma_schedule(H, K)
        elif config.gamma_mode == "constant":
            gamma = constant_gamma(config.gamma)
        else:
            rep.theory = compute_theory_params(config.horizon_T(), env.n_states, K, H, consts.L,
                                               2 * math.log(len(cls.rewards)))
            gamma = constant_gamma(rep.theory.gamma)
        try:
            rep.metrics = run_online_loop(env, rep.reachable, rep.hypotheses, consts, oracle, gamma,
                                          T_online, rng_stream(seed, "online"))
        except PipelineError as e:
            rep.metrics = e.partial_report
            rep.phase_episodes["online"] = len(rep.metrics)
            raise PipelineError("online", e.cause, rep) from e.cause
        rep.phase_episodes["online"] = T_online
    rep.completed = True
    return rep


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, float):
        return SENTINEL if math.isnan(v) else repr(v)
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def metric_rows(metrics: OnlineMetrics):
    reg = metrics.cumulative_regret
    for i in range(len(metrics)):
        yield (i + 1, int(metrics.context[i]), int(metrics.terminal_state[i]),
               int(metrics.true_reward[i]), float(metrics.decoded_reward[i]),
               float(metrics.policy_value[i]), float(reg[i]))


def emit_metrics(report: RunReport, path) -> dict:
    """Write ``metrics.csv``, ``summary.json`` and ``config.echo`` under ``path``.

    Existing files are overwritten.  Returns the paths written.
    """
    path = Path(path)
    files = {"metrics": path / "metrics.csv", "summary": path / "summary.json",
             "config": path / "config.echo"}
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(files["metrics"], "w", newline="") as fh:
            fh.write(",".join(METRIC_COLUMNS) + "\n")
            if report.metrics is not None:
                for row in metric_rows(report.metrics):
                    fh.write(",".join(_fmt(v) for v in row) + "\n")
        with open(files["summary"], "w") as fh:
            json.dump(report.summary(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(files["config"], "w") as fh:
            fh.write(f"seed = {report.seed}\n")
            fh.write(report.config.echo())
    except OSError as e:
        raise OSError(f"cannot write run output under {path}: {e.strerror or e}") from e
    return files


def read_metrics(path) -> dict:
    """Load a ``metrics.csv`` back into column arrays (sentinels become NaN)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in rows]
        if name in ("decoded_reward", "policy_value", "cumulative_regret"):
            cols[name] = np.array([np.nan if v == SENTINEL else float(v) for v in vals])
        else:
            cols[name] = np.array([int(v) for v in vals], dtype=np.int64)
    return cols


def _run_one(args):
    config, seed, out = args
    rep = run_full_pipeline(config, seed)
    if out is not None:
        emit_metrics(rep, Path(out) / f"seed-{seed}")
    return rep


def run_experiment(config: ExperimentConfig, out=None, workers: int | None = None) -> list:
    """Run every configured seed, each into ``out/seed-<n>``, and merge the summaries.

    With ``workers > 1`` seeds run in separate processes; streams are keyed by
    seed, so results do not depend on the worker count.
    """
    config.validate()
    workers = config.workers if workers is None else workers
    jobs = [(config, s, out) for s in config.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs), os.cpu_count() or 1)) as ex:
            reports = list(ex.map(_run_one, jobs))
    else:
        reports = [_run_one(j) for j in jobs]
    if out is not None:
        merged = merge_summaries([r.summary() for r in reports])
        try:
            with open(Path(out) / "summary.json", "w") as fh:
                json.dump(merged, fh, indent=1, sort_keys=True)
                fh.write("\n")
        except OSError as e:
            raise OSError(f"cannot write merged summary under {out}: {e.strerror or e}") from e
    return reports


def merge_summaries(summaries: list) -> dict:
    """Seed-averaged numeric fields plus the seed list."""
    merged = {"seeds": " ".join(str(s["seed"]) for s in summaries), "n_seeds": len(summaries)}
    keys = set().union(*summaries)
    for k in sorted(keys - {"seed"}):
        vals = [s.get(k) for s in summaries]
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            merged[f"mean_{k}"] = float(np.mean(vals))
    return merged
