"""Evaluation: pass@k over scene pools, with bootstrap uncertainty.

Each problem gets ``n`` independently sampled episodes; pass@k is the
unbiased estimator (probability that at least one of ``k`` drawn-without-
replacement samples is correct), macro-averaged over problems.  A separate
greedy decode (temperature 0) gives the deterministic accuracy headline.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .policy import PolicyParams
from .rng import child_rng
from .rollout import RolloutLimits, run_episode
from .scenegen import SceneSpec, generate_scene, judge
from .vocab import Vocabulary

BOOTSTRAP_RESAMPLES = 200


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: 1 - C(n-c, k) / C(n, k), computed stably.

    ``k == 1`` is returned as the exact fraction ``c / n``; the general form
    multiplies the survival ratios ``(n-c-j)/(n-j)`` and clamps to 1 as soon
    as fewer than ``k`` incorrect samples exist.
    """
    if n < 1:
        raise ValueError("pass_at_k requires n >= 1")
    if not 0 <= c <= n:
        raise ValueError("pass_at_k requires 0 <= c <= n")
    if not 1 <= k <= n:
        raise ValueError("pass_at_k requires 1 <= k <= n")
    if k == 1:
        return c / n
    if n - c < k:
        return 1.0
    survival = 1.0
    for j in range(k):
        survival *= (n - c - j) / (n - j)
    return 1.0 - survival


@dataclass(frozen=True)
class SampleRecord:
    """Sampling outcome for one problem."""

    scene_index: int
    qtype: str
    answer_key: str
    n: int
    correct: int

    def pass_rates(self, ks: tuple[int, ...]) -> dict[int, float]:
        return {k: pass_at_k(self.n, self.correct, k) for k in ks}


@dataclass(frozen=True)
class PassKReport:
    ks: tuple[int, ...]
    n_samples: int
    temperature: float
    estimates: dict[int, float]
    stderrs: dict[int, float]
    greedy_pass1: float
    problems: tuple[SampleRecord, ...]


def _bootstrap_stderrs(
    per_problem: np.ndarray, ks: tuple[int, ...], rng: np.random.Generator
) -> dict[int, float]:
    """Nonparametric stderr of the macro mean: resample problems with replacement."""
    problem_count = per_problem.shape[0]
    means = np.empty((BOOTSTRAP_RESAMPLES, len(ks)))
    for b in range(BOOTSTRAP_RESAMPLES):
        picks = rng.integers(problem_count, size=problem_count)
        means[b] = per_problem[picks].mean(axis=0)
    return {k: float(means[:, i].std()) for i, k in enumerate(ks)}


def evaluate(
    params: PolicyParams,
    vocabulary: Vocabulary,
    spec: SceneSpec,
    pool_base: int,
    pool_size: int,
    limits: RolloutLimits,
    ks: tuple[int, ...],
    n_samples: int,
    seed: int,
    allow_zoom: bool = True,
) -> PassKReport:
    """pass@k over a held-out scene pool.

    Per problem the sampling stream is seeded by the scene index alone, so
    estimates are reproducible regardless of evaluation order or which arm
    is being scored.
    """
    if pool_size < 1:
        raise ConfigError("evaluation requires pool_size >= 1")
    if n_samples < 1:
        raise ConfigError("evaluation requires n_samples >= 1")
    if not ks:
        raise ConfigError("evaluation requires at least one k")
    ks = tuple(sorted(set(int(k) for k in ks)))
    if ks[0] < 1 or ks[-1] > n_samples:
        raise ConfigError("evaluation requires 1 <= k <= n_samples for every k")

    greedy_limits = replace(limits, temperature=0.0)
    problems: list[SampleRecord] = []
    greedy_hits = 0
    for offset in range(pool_size):
        scene = generate_scene(spec, pool_base + offset)
        rng = child_rng(seed, "eval", scene.index)
        correct = 0
        for _ in range(n_samples):
            traj = run_episode(params, vocabulary, scene, limits, rng, allow_zoom=allow_zoom)
            correct += judge(scene, traj.parsed_answer)
        problems.append(
            SampleRecord(
                scene_index=scene.index,
                qtype=scene.question.qtype,
                answer_key=scene.answer_key,
                n=n_samples,
                correct=correct,
            )
        )
        greedy_rng = child_rng(seed, "eval-greedy", scene.index)
        greedy_traj = run_episode(
            params, vocabulary, scene, greedy_limits, greedy_rng, allow_zoom=allow_zoom
        )
        greedy_hits += judge(scene, greedy_traj.parsed_answer)

    per_problem = np.asarray(
        [[record.pass_rates(ks)[k] for k in ks] for record in problems], dtype=np.float64
    )
    estimates = {k: float(per_problem[:, i].mean()) for i, k in enumerate(ks)}
    stderrs = _bootstrap_stderrs(per_problem, ks, child_rng(seed, "eval-bootstrap"))
    return PassKReport(
        ks=ks,
        n_samples=n_samples,
        temperature=limits.temperature,
        estimates=estimates,
        stderrs=stderrs,
        greedy_pass1=greedy_hits / pool_size,
        problems=tuple(problems),
    )


def write_passk_csv(report: PassKReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "estimate", "stderr"])
        for k in report.ks:
            writer.writerow([k, f"{report.estimates[k]:.6f}", f"{report.stderrs[k]:.6f}"])


def write_problems_jsonl(report: PassKReport, path) -> None:
    with open(path, "w") as fh:
        for record in report.problems:
            row = {
                "scene_index": record.scene_index,
                "qtype": record.qtype,
                "answer_key": record.answer_key,
                "n": record.n,
                "correct": record.correct,
                **{f"pass_at_{k}": record.pass_rates(report.ks)[k] for k in report.ks},
            }
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def write_report_meta(report: PassKReport, path) -> None:
    meta = {
        "ks": list(report.ks),
        "n_samples": report.n_samples,
        "temperature": report.temperature,
        "problem_count": len(report.problems),
        "greedy_pass1": report.greedy_pass1,
        **{f"pass_at_{k}": report.estimates[k] for k in report.ks},
        **{f"stderr_at_{k}": report.stderrs[k] for k in report.ks},
    }
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
