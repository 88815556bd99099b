"""Command-line entry point.

Settings resolve in this order, later winning: built-in defaults, the
``[common]`` then ``[<command>]`` section of ``--config``, environment
variables ``SPOLAB_<KEY>`` (upper-case, ``-`` -> ``_``, lists
comma-separated), and finally command-line flags. The resolved settings
are written to ``manifest.json`` in the output directory before any
output, and ``spolab replay manifest.json`` re-runs the command with them.

Exit codes: 0 success, 1 tolerance violation, 2 configuration error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import NumericDomainError
from .datagen import InstanceSpec, PreferenceDataset, gen_instance, sample_preferences
from .experiments import (
    FIT_COLUMNS,
    GRADCHECK_COLUMNS,
    GRADSWEEP_COLUMNS,
    HACKPROBE_COLUMNS,
    LOSSCURVE_COLUMNS,
    default_pi_l_grid,
    gradcheck,
    gradsweep,
    hackprobe,
    losscurve,
    make_spec,
    oracle_check,
    report_row,
)
from .losses import LossKind
from .policy import LinearFeaturePolicy, ReferencePolicy, TabularPolicy
from .trainer import RECORD_COLUMNS, AdamParams, TrainConfig, TrainingAborted, config_to_dict, train

EXIT_OK, EXIT_TOLERANCE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
ENV_PREFIX = "SPOLAB_"


class ConfigError(ValueError):
    pass


def _optional_int(text):
    if text in (None, "", "none", "None"):
        return None
    return int(text)


def _clip_threshold(text):
    # 0 disables clipping
    if text in (None, "", "none", "None", "0", 0):
        return None
    return float(text)


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _loss_list(text):
    if isinstance(text, (list, tuple)):
        return [LossKind.parse(str(v)).value for v in text]
    return [LossKind.parse(v).value for v in str(text).split(",") if v.strip()]


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return value


_INSTANCE = {
    "n_prompts": (int, 4),
    "n_responses": (int, 8),
    "reward_scale": (float, 1.0),
    "feature_dim": (_optional_int, None),
    "feature_collision": (float, 0.0),
}

_TRAINING = {
    "optimizer": (str, "sgd"),
    "learning_rate": (float, 0.1),
    "steps": (int, 1000),
    "log_every": (int, 10),
    "batch_size": (_optional_int, None),
    "grad_clip": (_clip_threshold, None),
    "target_gap": (float, 1.0),
}

# key -> (parser, default) per command; "seed", "beta" and "loss" are common to all
SCHEMAS = {
    "gen": {**_INSTANCE, "n_pairs": (int, 256), "beta": (_float_list, [0.1]), "loss": (_loss_list, ["dpo", "spo"])},
    "losscurve": {
        "beta": (_float_list, [0.1]),
        "loss": (_loss_list, ["dpo", "spo", "sq"]),
        "logits_min": (float, -20.0),
        "logits_max": (float, 50.0),
        "n_points": (int, 701),
        "target_gap": (float, 1.0),
    },
    "gradsweep": {
        "beta": (_float_list, [0.1, 0.5, 1.0]),
        "loss": (_loss_list, ["dpo", "spo"]),
        "pi_l_min": (float, 1e-8),
        "pi_l_max": (float, 0.5),
        "n_points": (int, 60),
        "pi_w": (float, 0.5),
        "ref_w": (float, 0.5),
        "ref_l": (float, 0.5),
        "fit_lo": (float, 1e-8),
        "fit_hi": (float, 1e-6),
    },
    "gradcheck": {
        "beta": (_float_list, [0.05, 0.1, 0.5, 1.0, 5.0]),
        "loss": (_loss_list, ["dpo", "spo", "sq"]),
        "logits_min": (float, -20.0),
        "logits_max": (float, 20.0),
        "n_points": (int, 201),
        "n_random": (int, 200),
        "tol": (float, 1e-5),
        "target_gap": (float, 1.0),
    },
    "oracle-check": {
        **_INSTANCE,
        "beta": (_float_list, [1.0]),
        "loss": (_loss_list, ["dpo", "spo"]),
        "n_instances": (int, 20),
        "n_random": (int, 1000),
        "tol": (float, 1e-10),
    },
    "train": {
        **_INSTANCE,
        **_TRAINING,
        "beta": (_float_list, [0.1]),
        "loss": (_loss_list, ["spo"]),
        "n_pairs": (int, 64),
        "policy": (str, "tabular"),
        "instance": (str, ""),
        "pairs": (str, ""),
    },
    "hackprobe": {
        **_INSTANCE,
        **_TRAINING,
        "n_prompts": (int, 2),
        "n_responses": (int, 3),
        "steps": (int, 500),
        "log_every": (int, 5),
        "beta": (_float_list, [0.1]),
        "loss": (_loss_list, ["dpo", "spo"]),
        "collisions": (_float_list, [0.0, 0.5, 1.0]),
        "n_pairs": (int, 64),
    },
}
for _schema in SCHEMAS.values():
    _schema["seed"] = (_seed, 0)


def resolve_settings(command: str, config_path: str | None, flags: dict, environ=os.environ) -> dict:
    schema = SCHEMAS[command]
    raw = {key: default for key, (_, default) in schema.items()}
    if config_path:
        parser = configparser.ConfigParser()
        if not parser.read(config_path):
            raise ConfigError(f"cannot read config file {config_path}")
        for section in ("common", command):
            if parser.has_section(section):
                for key, value in parser.items(section):
                    key = key.replace("-", "_")
                    if key not in schema:
                        raise ConfigError(f"{config_path}: unknown key {key!r} in [{section}]")
                    raw[key] = value
    for key in schema:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            raw[key] = environ[env_key]
    for key, value in flags.items():
        if value is not None:
            raw[key] = value
    resolved = {}
    for key, (parse, _) in schema.items():
        value = raw[key]
        try:
            resolved[key] = parse(value) if value is not None else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None
    return resolved


def _fmt(value) -> str:
    if isinstance(value, bool) or isinstance(value, np.bool_):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Owns an output directory and its manifest for one command invocation."""

    def __init__(self, command: str, settings: dict, out: Path, inputs: dict | None = None):
        self.command = command
        self.settings = settings
        self.out = out
        self.inputs = inputs or {}
        self.outputs: list[str] = []
        self.started = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = out / "manifest.json"
        self._write_manifest(status="running")

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def _write_manifest(self, status: str, **extra):
        doc = {
            "command": self.command,
            "config": self.settings,
            "seeds": {"seed": self.settings.get("seed")},
            "artifact_version": __version__,
            "input_digests": {k: sha256_file(v) for k, v in self.inputs.items()},
            "outputs": {name: sha256_file(self.out / name) for name in self.outputs if (self.out / name).exists()},
            "status": status,
            **extra,
        }
        self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str = "ok", **extra):
        self._write_manifest(status, duration_s=round(time.perf_counter() - self.started, 6), **extra)


def _instance_spec(s: dict, seed: int | None = None) -> InstanceSpec:
    return InstanceSpec(
        n_prompts=s["n_prompts"],
        n_responses=s["n_responses"],
        reward_scale=s["reward_scale"],
        seed=s["seed"] if seed is None else seed,
        feature_dim=s["feature_dim"],
        feature_collision=s["feature_collision"],
    )


def _train_config(s: dict, kind: str, beta: float) -> TrainConfig:
    return TrainConfig(
        loss=make_spec(kind, beta, s["target_gap"]),
        learning_rate=s["learning_rate"],
        steps=s["steps"],
        optimizer=s["optimizer"],
        adam=AdamParams(),
        batch_size=s["batch_size"],
        batch_seed=s["seed"],
        log_every=s["log_every"],
        grad_clip=s["grad_clip"],
    )


def cmd_gen(s: dict, run: Run) -> int:
    inst = gen_instance(_instance_spec(s))
    dataset = sample_preferences(inst.reward, s["n_pairs"], s["seed"])
    run.path("instance.json").write_text(json.dumps(inst.manifest(), indent=2, sort_keys=True) + "\n")
    inst.reward.to_csv(run.path("rewards.csv"))
    dataset.to_jsonl(run.path("pairs.jsonl"))
    if inst.features is not None:
        LinearFeaturePolicy.zeros(inst.features).save(run.path("features_policy.json"))
    return EXIT_OK


def cmd_losscurve(s: dict, run: Run) -> int:
    if s["n_points"] < 1:
        raise ConfigError("n_points must be positive")
    grid = np.linspace(s["logits_min"], s["logits_max"], s["n_points"])
    rows = losscurve(s["loss"], s["beta"], grid, s["target_gap"])
    write_csv(run.path("losscurve.csv"), LOSSCURVE_COLUMNS, rows)
    return EXIT_OK


def cmd_gradsweep(s: dict, run: Run) -> int:
    if not 0 < s["pi_l_min"] < s["pi_l_max"] < 1:
        raise ConfigError("need 0 < pi_l_min < pi_l_max < 1")
    grid = default_pi_l_grid(s["pi_l_min"], s["pi_l_max"], s["n_points"])
    rows, fits = gradsweep(
        s["loss"], s["beta"], grid, s["pi_w"], s["ref_w"], s["ref_l"], (s["fit_lo"], s["fit_hi"])
    )
    write_csv(run.path("gradsweep.csv"), GRADSWEEP_COLUMNS, rows)
    write_csv(run.path("gradsweep_fits.csv"), FIT_COLUMNS, [f.row() for f in fits])
    for f in fits:
        print(f"{f.loss_kind} beta={f.beta}: slope={f.slope:.4f} (beta-1={f.expected_slope:.4f}, "
              f"log-factor drift={f.log_factor_drift:+.4f})")
    return EXIT_OK


def cmd_gradcheck(s: dict, run: Run) -> int:
    grid = np.linspace(s["logits_min"], s["logits_max"], s["n_points"])
    reports = gradcheck(s["loss"], s["beta"], grid, s["n_random"], s["seed"], s["tol"], s["target_gap"])
    write_csv(run.path("gradcheck.csv"), GRADCHECK_COLUMNS, [report_row(r) for r in reports])
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} derivative checks passed")
    return EXIT_OK if failed == 0 else EXIT_TOLERANCE


def cmd_oracle_check(s: dict, run: Run) -> int:
    specs = [_instance_spec(s, seed=s["seed"] + i) for i in range(s["n_instances"])]
    reports = [oracle_check(specs, beta, s["n_random"], s["seed"]) for beta in s["beta"]]
    docs = []
    worst = EXIT_OK
    for rep in reports:
        ok = rep.passed(s["tol"])
        doc = {k: v for k, v in vars(rep).items()}
        doc["passed"] = ok
        docs.append(doc)
        if rep.overflow:
            print(f"beta={rep.beta}: overflow: {rep.overflow}")
            worst = max(worst, EXIT_NUMERIC)
        else:
            print(f"beta={rep.beta}: identity {rep.max_identity_residual:.3e}, optimality "
                  f"{rep.max_optimality_residual:.3e}, objective {rep.max_objective_identity_error:.3e}, "
                  f"dominance {'holds' if rep.dominance_holds else 'FAILS'}")
            if not ok:
                worst = max(worst, EXIT_TOLERANCE)
    run.path("oracle_report.json").write_text(json.dumps(docs, indent=2, sort_keys=True) + "\n")
    return worst


def _load_train_inputs(s: dict):
    if s["instance"]:
        doc = json.loads(Path(s["instance"]).read_text())
        inst = gen_instance(InstanceSpec(**doc["spec"]))
        if doc.get("digest") and doc["digest"] != inst.digest():
            raise ConfigError(f"{s['instance']}: digest mismatch; regenerated instance differs")
    else:
        inst = gen_instance(_instance_spec(s))
    if s["pairs"]:
        dataset = PreferenceDataset.from_jsonl(s["pairs"])
    else:
        dataset = sample_preferences(inst.reward, s["n_pairs"], s["seed"])
    return inst, dataset


def cmd_train(s: dict, run: Run) -> int:
    inst, dataset = _load_train_inputs(s)
    if s["policy"] == "tabular":
        policy = TabularPolicy.zeros(*inst.reward.shape)
    elif s["policy"] == "linear":
        if inst.features is None:
            raise ConfigError("linear policy needs feature_dim")
        policy = LinearFeaturePolicy.zeros(inst.features)
    else:
        raise ConfigError(f"unknown policy {s['policy']!r}")
    reference = ReferencePolicy.snapshot(policy)
    config = _train_config(s, s["loss"][0], s["beta"][0])
    status = EXIT_OK
    try:
        policy, records = train(policy, reference, dataset, config)
    except TrainingAborted as exc:
        records = exc.records
        print(str(exc), file=sys.stderr)
        status = EXIT_NUMERIC
    write_csv(run.path("records.csv"), RECORD_COLUMNS, [r.row() for r in records])
    policy.save(run.path("final_policy.json"))
    if records:
        last = [r for r in records if r.step == records[-1].step]
        for r in last:
            print(f"step {r.step} pair {r.pair_id}: logits={r.logits:.6g} beta*logits={r.beta_logits:.6g}")
    run.settings["resolved_train_config"] = config_to_dict(config)
    return status


def cmd_hackprobe(s: dict, run: Run) -> int:
    spec = _instance_spec(s)
    if spec.feature_dim is None:
        spec = InstanceSpec(**{**spec.to_dict(), "feature_dim": spec.n_prompts * spec.n_responses})
    rows, aborted = hackprobe(
        s["collisions"], s["loss"], spec, s["n_pairs"], s["seed"],
        lambda kind: _train_config(s, kind, s["beta"][0]),
    )
    write_csv(run.path("hackprobe.csv"), HACKPROBE_COLUMNS, rows)
    for kind, c, msg in aborted:
        print(f"{kind} collision={c}: {msg}", file=sys.stderr)
    return EXIT_NUMERIC if aborted else EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "losscurve": cmd_losscurve,
    "gradsweep": cmd_gradsweep,
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
    "train": cmd_train,
    "hackprobe": cmd_hackprobe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spolab", description="Preference-loss laboratory: DPO vs SPO.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with [common] and per-command sections")
        p.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--beta", type=float, action="append", default=None)
        p.add_argument("--loss", action="append", default=None, help="dpo | spo | sq (repeatable)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any setting")
    rp = sub.add_parser("replay", help="re-run a command from its manifest.json")
    rp.add_argument("manifest")
    rp.add_argument("--out", default=None, help="output directory (default: the manifest's directory)")
    return parser


def _flags(args) -> dict:
    flags = {"seed": args.seed, "beta": args.beta, "loss": args.loss}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        flags[key.strip().replace("-", "_")] = value.strip()
    unknown = set(flags) - set(SCHEMAS[args.command])
    if unknown:
        raise ConfigError(f"unknown setting(s) for {args.command}: {sorted(unknown)}")
    return flags


def execute(command: str, settings: dict, out: Path) -> int:
    inputs = {k: settings[k] for k in ("instance", "pairs") if settings.get(k)}
    run = Run(command, dict(settings), out, inputs)
    try:
        code = COMMANDS[command](run.settings, run)
    except (ConfigError, ValueError) as exc:
        run.finish("config-error", error=str(exc))
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericDomainError, OverflowError, FloatingPointError) as exc:
        run.finish("numeric-failure", error=str(exc))
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    run.finish({EXIT_OK: "ok", EXIT_TOLERANCE: "tolerance-violation", EXIT_NUMERIC: "numeric-failure"}[code])
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            doc = json.loads(Path(args.manifest).read_text())
            settings = doc["config"]
            settings.pop("resolved_train_config", None)
            command = doc["command"]
            out = Path(args.out) if args.out else Path(args.manifest).parent
            settings = resolve_settings(command, None, settings, environ={})
        else:
            command = args.command
            settings = resolve_settings(command, args.config, _flags(args))
            out = Path(args.out) if args.out else Path("runs") / command
    except (ConfigError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return execute(command, settings, out)


if __name__ == "__main__":
    sys.exit(main())
