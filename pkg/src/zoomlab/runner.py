"""Experiment orchestration: one config in, one artifact directory out.

An experiment is a list of arms; an arm is an ordered list of stages (SFT
and/or policy-gradient variants) followed by held-out evaluation.  All arms
share one scene generator, one forged corpus, one initial parameter draw,
and one held-out pool, so any outcome difference is attributable to the
recipe.  Every random stream is derived from the global seed plus a
structural path that never includes the arm name: two arms differing only
in name produce byte-identical artifacts.

Wall-clock timings are persisted separately (``timings.txt``) and are the
only output excluded from the byte-identical rerun guarantee.
"""

from __future__ import annotations

import concurrent.futures
import json
import time
from dataclasses import dataclass
from pathlib import Path

import yaml

from .encoding import SftExample, build_vqa_demo, encode_text_record
from .errors import ConfigError
from .evalkit import (
    PassKReport,
    evaluate,
    write_passk_csv,
    write_problems_jsonl,
    write_report_meta,
)
from .policy import PolicyDims, init_params, save_checkpoint
from .qaforge import ForgeConfig, forge_corpus, write_corpus, write_report
from .reward import RewardConfig
from .rng import stable_seed
from .rollout import RolloutLimits
from .scenegen import SceneSpec, generate_scene, scene_rulebase
from .train import (
    STAGE_KINDS,
    STAGE_SFT,
    TrainConfig,
    run_stage,
)
from .vocab import build_vocabulary

SOURCE_KINDS = ("text_qa", "vqa_demo")
REQUIRED_POOLS = ("train", "demo", "heldout")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "scene": {
        "grid_side": 4,
        "tile_side": 2,
        "glyph_alphabet_size": 2,
        "target_density": 0.45,
        "rule_count": 3,
    },
    "policy": {
        "embed_dim": 16,
        "hidden_dim": 128,
        "context_window": 16,
    },
    "rollout": {
        "tool_budget": 2,
        "max_model_tokens": 16,
        "temperature": 1.15,
    },
    "reward": {
        "format_bonus": 0.5,
        "tool_bonus": 0.5,
    },
    "forge": {
        "corpus_size": 600,
        "type_ratio": [0.24, 0.07, 0.04, 0.65],
        "relevance_threshold": 0.5,
        "corruption_rate": 0.0,
        "cot_enabled": True,
        "cot_steps_mean": 2.6,
        "hop_bound": 2,
    },
    "pools": {
        "train": {"base": 0, "size": 48},
        "demo": {"base": 10000, "size": 48},
        "heldout": {"base": 20000, "size": 32},
    },
    "evaluation": {
        "n_samples": 8,
        "k_list": [1, 2, 4, 8],
        "temperature": 1.0,
    },
    "train_defaults": {
        "sft": {"epochs": 4, "batch_size": 8, "learning_rate": 1.0},
        "rl": {
            "steps": 2000,
            "learning_rate": 0.5,
            "clip_delta": 0.2,
            "kl_coefficient": 0.0,
            "advantage_mode": "mean_std_normalized",
            "group_size": 8,
            "groups_per_step": 8,
        },
    },
    "arms": [
        {"name": "base", "stages": []},
        {"name": "rl_plain", "stages": [{"kind": "rl_plain"}]},
        {"name": "rl_agentic", "stages": [{"kind": "rl_agentic"}]},
        {
            "name": "sft_vqa",
            "stages": [{"kind": "sft", "sources": ["vqa_demo"], "demo_pool": "demo"}],
        },
        {
            "name": "full_recipe",
            "stages": [
                {
                    "kind": "sft",
                    "sources": ["text_qa", "vqa_demo"],
                    "demo_pool": "train",
                },
                {"kind": "rl_agentic"},
            ],
        },
    ],
}

_SFT_STAGE_KEYS = {
    "kind",
    "sources",
    "demo_pool",
    "epochs",
    "batch_size",
    "learning_rate",
    "text_weight",
    "vqa_weight",
    "chain_in_demo",
}
_RL_STAGE_KEYS = {
    "kind",
    "pool",
    "steps",
    "learning_rate",
    "clip_delta",
    "kl_coefficient",
    "advantage_mode",
    "group_size",
    "groups_per_step",
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Read a YAML config file (missing file raises FileNotFoundError)."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping at top level")
    return raw


def resolve_config(raw: dict, seed_override: int | None = None) -> dict:
    """Overlay user keys on defaults and validate the result."""
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    config = _deep_merge(DEFAULT_CONFIG, raw)
    if seed_override is not None:
        config["seed"] = seed_override
    _validate_config(config)
    return config


def _validate_config(config: dict) -> None:
    pools = config["pools"]
    for name in REQUIRED_POOLS:
        if name not in pools:
            raise ConfigError(f"config requires pool {name!r}")
    ranges = []
    for name, pool in sorted(pools.items()):
        base, size = int(pool["base"]), int(pool["size"])
        if base < 0 or size < 1:
            raise ConfigError(f"pool {name!r} needs base >= 0 and size >= 1")
        ranges.append((name, base, base + size))
    for i, (name_a, lo_a, hi_a) in enumerate(ranges):
        for name_b, lo_b, hi_b in ranges[i + 1 :]:
            if lo_a < hi_b and lo_b < hi_a:
                raise ConfigError(
                    f"pools {name_a!r} and {name_b!r} overlap; scene index "
                    "ranges must be disjoint"
                )

    evaluation = config["evaluation"]
    if int(evaluation["n_samples"]) < max(int(k) for k in evaluation["k_list"]):
        raise ConfigError("evaluation requires n_samples >= max(k_list)")

    names = [arm["name"] for arm in config["arms"]]
    if len(set(names)) != len(names):
        raise ConfigError("arm names must be unique")
    for name in names:
        if not name or any(ch in name for ch in "/\\ \t\n"):
            raise ConfigError(f"arm name {name!r} must be a filesystem-safe token")
    for arm in config["arms"]:
        for stage in arm.get("stages", []):
            kind = stage.get("kind")
            if kind not in STAGE_KINDS:
                raise ConfigError(
                    f"arm {arm['name']!r}: unknown stage kind {kind!r} "
                    f"(choose from {STAGE_KINDS})"
                )
            allowed = _SFT_STAGE_KEYS if kind == STAGE_SFT else _RL_STAGE_KEYS
            unknown = set(stage) - allowed
            if unknown:
                raise ConfigError(
                    f"arm {arm['name']!r}: unknown keys {sorted(unknown)} "
                    f"in {kind} stage"
                )
            if kind == STAGE_SFT:
                sources = stage.get("sources", ["vqa_demo"])
                bad = set(sources) - set(SOURCE_KINDS)
                if bad or not sources:
                    raise ConfigError(
                        f"arm {arm['name']!r}: sft sources must be a non-empty "
                        f"subset of {SOURCE_KINDS}"
                    )
                if stage.get("demo_pool", "demo") not in pools:
                    raise ConfigError(
                        f"arm {arm['name']!r}: demo_pool must name a configured pool"
                    )
            else:
                if stage.get("pool", "train") not in pools:
                    raise ConfigError(
                        f"arm {arm['name']!r}: rl pool must name a configured pool"
                    )


def needs_text_corpus(config: dict) -> bool:
    return any(
        "text_qa" in stage.get("sources", [])
        for arm in config["arms"]
        for stage in arm.get("stages", [])
        if stage.get("kind") == STAGE_SFT
    )


def make_scene_spec(config: dict) -> SceneSpec:
    scene = config["scene"]
    return SceneSpec(
        grid_side=int(scene["grid_side"]),
        tile_side=int(scene["tile_side"]),
        glyph_alphabet_size=int(scene["glyph_alphabet_size"]),
        target_density=float(scene["target_density"]),
        rule_count=int(scene["rule_count"]),
        seed=int(config["seed"]),
    )


def make_rollout_limits(config: dict) -> RolloutLimits:
    rollout = config["rollout"]
    return RolloutLimits(
        tool_budget=int(rollout["tool_budget"]),
        max_model_tokens=int(rollout["max_model_tokens"]),
        temperature=float(rollout["temperature"]),
    )


def make_reward_config(config: dict) -> RewardConfig:
    reward = config["reward"]
    return RewardConfig(
        format_bonus=float(reward["format_bonus"]),
        tool_bonus=float(reward["tool_bonus"]),
    )


def make_forge_config(config: dict) -> ForgeConfig:
    forge = config["forge"]
    return ForgeConfig(
        corpus_size=int(forge["corpus_size"]),
        type_ratio=tuple(float(x) for x in forge["type_ratio"]),
        relevance_threshold=float(forge["relevance_threshold"]),
        corruption_rate=float(forge["corruption_rate"]),
        cot_enabled=bool(forge["cot_enabled"]),
        cot_steps_mean=float(forge["cot_steps_mean"]),
        hop_bound=int(forge["hop_bound"]),
        seed=stable_seed(int(config["seed"]), "forge"),
    )


def subsample_offsets(total: int, weight: float) -> list[int]:
    """Evenly spaced subsample: round(weight * total) distinct offsets."""
    if not 0.0 <= weight <= 1.0:
        raise ConfigError("mixture weights must lie in [0, 1]")
    count = int(round(weight * total))
    if count <= 0:
        return []
    return [(i * total) // count for i in range(count)]


def build_sft_examples(
    stage: dict,
    config: dict,
    corpus_records: list[dict],
    vocabulary,
    rulebase,
    spec: SceneSpec,
) -> list[SftExample]:
    """Materialize a stage's example list from its data-source bindings.

    ``demo_pool: train`` is the pre-warming configuration: the demos are
    built from the same scenes the later RL stage will sample, regenerated
    from the shared (seed, index) space.
    """
    sources = stage.get("sources", ["vqa_demo"])
    examples: list[SftExample] = []
    if "text_qa" in sources:
        weight = float(stage.get("text_weight", 1.0))
        for offset in subsample_offsets(len(corpus_records), weight):
            examples.append(encode_text_record(corpus_records[offset], vocabulary))
    if "vqa_demo" in sources:
        pool = config["pools"][stage.get("demo_pool", "demo")]
        weight = float(stage.get("vqa_weight", 1.0))
        chain = bool(stage.get("chain_in_demo", True))
        for offset in subsample_offsets(int(pool["size"]), weight):
            scene = generate_scene(spec, int(pool["base"]) + offset)
            examples.append(build_vqa_demo(scene, vocabulary, rulebase, chain_in_demo=chain))
    if not examples:
        raise ConfigError("sft stage resolved to an empty example list")
    return examples


def _stage_settings(stage: dict, config: dict) -> dict:
    kind = stage["kind"]
    defaults = config["train_defaults"]["sft" if kind == STAGE_SFT else "rl"]
    merged = dict(defaults)
    merged.update({k: v for k, v in stage.items() if k in defaults})
    return merged


@dataclass(frozen=True)
class ArmOutcome:
    """What one arm leaves behind for the experiment-level summaries."""

    name: str
    status: str  # "ok" | "failed"
    error: str | None
    metrics_rows: list[dict]
    ks: list[int]
    estimates: dict[int, float]
    stderrs: dict[int, float]
    greedy_pass1: float | None
    heldout_scene_indices: list[int]
    elapsed_seconds: float


def execute_arm(config: dict, corpus_records: list[dict], arm: dict, arm_dir: str) -> ArmOutcome:
    """Run one arm end to end and persist its artifacts under ``arm_dir``.

    Any exception marks the arm failed (with ``error.txt``) without raising,
    so sibling arms keep running.
    """
    started = time.perf_counter()
    directory = Path(arm_dir)
    directory.mkdir(parents=True, exist_ok=True)
    try:
        outcome = _execute_arm_inner(config, corpus_records, arm, directory, started)
    except Exception as exc:  # noqa: BLE001 - arm isolation is the contract
        (directory / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        outcome = ArmOutcome(
            name=arm["name"],
            status="failed",
            error=f"{type(exc).__name__}: {exc}",
            metrics_rows=[],
            ks=[],
            estimates={},
            stderrs={},
            greedy_pass1=None,
            heldout_scene_indices=[],
            elapsed_seconds=time.perf_counter() - started,
        )
    return outcome


def _execute_arm_inner(
    config: dict,
    corpus_records: list[dict],
    arm: dict,
    directory: Path,
    started: float,
) -> ArmOutcome:
    seed = int(config["seed"])
    spec = make_scene_spec(config)
    rulebase = scene_rulebase(spec)
    vocabulary = build_vocabulary(spec, rulebase)
    policy_cfg = config["policy"]
    dims = PolicyDims(
        vocab_size=len(vocabulary),
        embed_dim=int(policy_cfg["embed_dim"]),
        hidden_dim=int(policy_cfg["hidden_dim"]),
        context_window=int(policy_cfg["context_window"]),
    )
    params = init_params(dims, seed)
    limits = make_rollout_limits(config)
    reward_config = make_reward_config(config)

    metrics_rows: list[dict] = []
    for stage_index, stage in enumerate(arm.get("stages", [])):
        kind = stage["kind"]
        settings = _stage_settings(stage, config)
        stage_seed = stable_seed(seed, "stage", stage_index, kind)
        if kind == STAGE_SFT:
            examples = build_sft_examples(
                stage, config, corpus_records, vocabulary, rulebase, spec
            )
            params, rows = run_stage(
                kind,
                params,
                vocabulary,
                stage_seed,
                examples=examples,
                epochs=int(settings["epochs"]),
                batch_size=int(settings["batch_size"]),
                learning_rate=float(settings["learning_rate"]),
            )
        else:
            pool = config["pools"][stage.get("pool", "train")]
            train_config = TrainConfig(
                learning_rate=float(settings["learning_rate"]),
                clip_delta=float(settings["clip_delta"]),
                kl_coefficient=float(settings["kl_coefficient"]),
                advantage_mode=str(settings["advantage_mode"]),
                group_size=int(settings["group_size"]),
                groups_per_step=int(settings["groups_per_step"]),
            )
            params, rows = run_stage(
                kind,
                params,
                vocabulary,
                stage_seed,
                spec=spec,
                pool_base=int(pool["base"]),
                pool_size=int(pool["size"]),
                limits=limits,
                config=train_config,
                steps=int(settings["steps"]),
                reward_config=reward_config,
            )
        for step, row in enumerate(rows):
            metrics_rows.append({"stage": stage_index, "kind": kind, "step": step, **row})

    save_checkpoint(params, directory / "checkpoint.bin")

    evaluation = config["evaluation"]
    heldout = config["pools"]["heldout"]
    eval_limits = RolloutLimits(
        tool_budget=limits.tool_budget,
        max_model_tokens=limits.max_model_tokens,
        temperature=float(evaluation["temperature"]),
    )
    report = evaluate(
        params,
        vocabulary,
        spec,
        int(heldout["base"]),
        int(heldout["size"]),
        eval_limits,
        tuple(int(k) for k in evaluation["k_list"]),
        int(evaluation["n_samples"]),
        stable_seed(seed, "evaluation"),
    )
    write_passk_csv(report, directory / "passk.csv")
    write_problems_jsonl(report, directory / "problems.jsonl")
    write_report_meta(report, directory / "report_meta.json")
    _write_metrics(directory / "metrics.jsonl", metrics_rows)

    return ArmOutcome(
        name=arm["name"],
        status="ok",
        error=None,
        metrics_rows=metrics_rows,
        ks=list(report.ks),
        estimates=dict(report.estimates),
        stderrs=dict(report.stderrs),
        greedy_pass1=report.greedy_pass1,
        heldout_scene_indices=[record.scene_index for record in report.problems],
        elapsed_seconds=time.perf_counter() - started,
    )


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def _summary_lines(outcomes: list[ArmOutcome], k_list: list[int]) -> list[str]:
    header = f"{'arm':<24}{'greedy@1':>10}" + "".join(f"{f'pass@{k}':>10}" for k in k_list)
    lines = [header]
    for outcome in sorted(outcomes, key=lambda o: o.name):
        if outcome.status != "ok":
            lines.append(f"{outcome.name:<24}{'FAILED':>10}")
            continue
        cells = f"{outcome.greedy_pass1:>10.4f}"
        cells += "".join(f"{outcome.estimates[k]:>10.4f}" for k in k_list)
        lines.append(f"{outcome.name:<24}{cells}")
    return lines


def _write_summary_outputs(out_dir: Path, outcomes: list[ArmOutcome], config: dict) -> str:
    """Write summary.txt and passk_summary.csv (both sorted by arm name)."""
    k_list = [int(k) for k in config["evaluation"]["k_list"]]
    summary = "\n".join(_summary_lines(outcomes, k_list)) + "\n"
    (out_dir / "summary.txt").write_text(summary)

    with open(out_dir / "passk_summary.csv", "w", newline="") as fh:
        fh.write("arm,k,estimate,stderr\n")
        for outcome in sorted(outcomes, key=lambda o: o.name):
            if outcome.status != "ok":
                continue
            for k in outcome.ks:
                fh.write(
                    f"{outcome.name},{k},{outcome.estimates[k]:.6f},"
                    f"{outcome.stderrs[k]:.6f}\n"
                )
    return summary


def _write_run_logs(out_dir: Path, outcomes: list[ArmOutcome]) -> None:
    """Write the combined metrics log (execution order) and timing sidecar."""
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for outcome in outcomes:
            for row in outcome.metrics_rows:
                fh.write(
                    json.dumps({"arm": outcome.name, **row}, sort_keys=True, separators=(",", ":"))
                    + "\n"
                )

    with open(out_dir / "timings.txt", "w") as fh:
        fh.write("# wall-clock seconds per arm; excluded from determinism guarantees\n")
        for outcome in outcomes:
            fh.write(f"{outcome.name}\t{outcome.elapsed_seconds:.3f}\n")
        fh.write(f"total\t{sum(o.elapsed_seconds for o in outcomes):.3f}\n")


def run_experiment(
    config: dict,
    out_dir,
    only_arms: list[str] | None = None,
    parallel_workers: int = 0,
) -> Path:
    """Execute the configured arms and write the artifact directory.

    ``only_arms`` restricts execution (the CLI ``train`` path);
    ``parallel_workers > 0`` opts into process-parallel arms.  A rerun
    always starts clean -- existing files are overwritten, never resumed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arms = config["arms"]
    if only_arms is not None:
        known = {arm["name"]: arm for arm in arms}
        missing = [name for name in only_arms if name not in known]
        if missing:
            raise ConfigError(f"unknown arm names: {missing}")
        arms = [known[name] for name in only_arms]

    with open(out / "config_resolved.yaml", "w") as fh:
        yaml.safe_dump(config, fh, sort_keys=True)

    corpus_records: list[dict] = []
    if needs_text_corpus({**config, "arms": arms}):
        spec = make_scene_spec(config)
        result = forge_corpus(scene_rulebase(spec), make_forge_config(config))
        corpus_records = result.records
        write_corpus(corpus_records, out / "corpus.jsonl")
        write_report(result.report, out / "forge_report.txt")

    jobs = [(config, corpus_records, arm, str(out / "arms" / arm["name"])) for arm in arms]
    if parallel_workers > 0 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel_workers) as pool:
            outcomes = list(pool.map(_execute_arm_star, jobs))
    else:
        outcomes = [_execute_arm_star(job) for job in jobs]

    ok = [o for o in outcomes if o.status == "ok"]
    if len(ok) > 1:
        first = ok[0].heldout_scene_indices
        for outcome in ok[1:]:
            if outcome.heldout_scene_indices != first:
                raise ConfigError(
                    "held-out identity violated: arms evaluated different scenes"
                )

    _write_run_logs(out, outcomes)
    summary = _write_summary_outputs(out, outcomes, config)
    print(summary, end="")
    for outcome in outcomes:
        if outcome.status != "ok":
            print(f"arm {outcome.name} failed: {outcome.error}")
    return out


def _execute_arm_star(job: tuple) -> ArmOutcome:
    return execute_arm(*job)


def regenerate_report(out_dir) -> str:
    """Rebuild summary.txt and passk_summary.csv from persisted arm outputs."""
    out = Path(out_dir)
    config_path = out / "config_resolved.yaml"
    if not config_path.exists():
        raise ConfigError(f"{out} does not look like an experiment directory")
    with open(config_path) as fh:
        config = yaml.safe_load(fh)

    outcomes: list[ArmOutcome] = []
    arms_dir = out / "arms"
    if not arms_dir.exists():
        raise ConfigError(f"{out} contains no arm outputs")
    for arm_dir in sorted(arms_dir.iterdir()):
        if not arm_dir.is_dir():
            continue
        meta_path = arm_dir / "report_meta.json"
        if not meta_path.exists():
            error_path = arm_dir / "error.txt"
            error = error_path.read_text().strip() if error_path.exists() else "missing report"
            outcomes.append(
                ArmOutcome(
                    name=arm_dir.name,
                    status="failed",
                    error=error,
                    metrics_rows=[],
                    ks=[],
                    estimates={},
                    stderrs={},
                    greedy_pass1=None,
                    heldout_scene_indices=[],
                    elapsed_seconds=0.0,
                )
            )
            continue
        with open(meta_path) as fh:
            meta = json.load(fh)
        ks = [int(k) for k in meta["ks"]]
        outcomes.append(
            ArmOutcome(
                name=arm_dir.name,
                status="ok",
                error=None,
                metrics_rows=[],
                ks=ks,
                estimates={k: float(meta[f"pass_at_{k}"]) for k in ks},
                stderrs={k: float(meta[f"stderr_at_{k}"]) for k in ks},
                greedy_pass1=float(meta["greedy_pass1"]),
                heldout_scene_indices=[],
                elapsed_seconds=0.0,
            )
        )
    return _write_summary_outputs(out, outcomes, config)
