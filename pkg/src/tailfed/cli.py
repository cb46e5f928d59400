"""Config-driven experiment runner.

Subcommands:

* ``run``: one training run per (theta, seed) cell, artifacts under
  ``<output_dir>/runs/<theta>/<seed>/``, cross-seed aggregate in
  ``<output_dir>/summary.json``.
* ``gaussian-demo``: three-Gaussian sanity study comparing the tail
  objective's minimizer against its analytic target.
* ``validate``: parse and echo the normalized config without running.

Exit codes: 0 success, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import models
from .data import Population, gen_gaussian_mixture, gen_hetero_logistic, load_devices_jsonl, split_devices
from .federation import (
    CertifiedGradientDescent,
    FederationConfig,
    PowerLawSchedule,
    am_meta,
    population_objectives,
    quadratic_objectives,
    run_federated,
)
from .models import LossSpec

ALGORITHMS = ("fedavg", "deltafl", "am_meta")

# Bump on any incompatible change to the config layout.
SCHEMA_VERSION = 1

# Scalene triangle whose longest side subtends an obtuse angle, so the
# tail objective at theta = 2/3 has a unique minimizer at that side's midpoint.
DEFAULT_DEMO_MEANS = ((0.0, 0.0), (1.5, 1.0), (4.0, 0.0))


class ConfigError(ValueError):
    pass


@dataclass
class AMSettings:
    eps0: float = 0.01
    exponent: float = 1.5
    strong_convexity: float = 2.0
    initial_step: float = 0.25
    num_iters: int = 80


@dataclass
class ExperimentConfig:
    algorithm: str
    output_dir: str
    thetas: list[float]
    seeds: list[int]
    data: dict
    loss: LossSpec
    federation: dict = field(default_factory=dict)
    eval_every: int = 0
    split_fraction: float | None = None
    split_seed: int = 0
    am: AMSettings = field(default_factory=AMSettings)
    schema_version: int = SCHEMA_VERSION

    def normalized(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "algorithm": self.algorithm,
            "output_dir": self.output_dir,
            "thetas": self.thetas,
            "seeds": self.seeds,
            "eval_every": self.eval_every,
            "split_fraction": self.split_fraction,
            "split_seed": self.split_seed,
            "data": self.data,
            "loss": {"kind": self.loss.kind, "l2_reg": self.loss.l2_reg, "num_classes": self.loss.num_classes},
            "federation": self.federation,
            "am": asdict(self.am),
        }
        return out


def _need(raw: dict, key: str, types, where: str):
    if key not in raw:
        raise ConfigError(f"{where}.{key} is required")
    val = raw[key]
    if not isinstance(val, types):
        raise ConfigError(f"{where}.{key} has the wrong type: expected {types}, got {type(val).__name__}")
    return val


def parse_experiment_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"config.schema_version {version!r} is not supported; this build reads version {SCHEMA_VERSION}"
        )
    algorithm = _need(raw, "algorithm", str, "config")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"config.algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    output_dir = _need(raw, "output_dir", str, "config")
    thetas = _need(raw, "thetas", list, "config")
    if not thetas:
        raise ConfigError("config.thetas must be non-empty")
    for theta in thetas:
        if not isinstance(theta, (int, float)) or not (0.0 < float(theta) <= 1.0):
            raise ConfigError(f"config.thetas entries must lie in (0, 1], got {theta!r}")
    seeds = _need(raw, "seeds", list, "config")
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("config.seeds must be a non-empty list of integers")

    data = _need(raw, "data", dict, "config")
    if "device_file" in data:
        if not isinstance(data["device_file"], str):
            raise ConfigError("config.data.device_file must be a path string")
    elif "generator" in data:
        gen = data["generator"]
        if gen == "hetero_logistic":
            for key in ("num_devices", "feature_dim", "num_classes"):
                if not isinstance(data.get(key), int) or data[key] < 1:
                    raise ConfigError(f"config.data.{key} must be a positive integer")
            nr = data.get("n_range")
            if (
                not isinstance(nr, list)
                or len(nr) != 2
                or not all(isinstance(v, int) for v in nr)
                or not (1 <= nr[0] <= nr[1])
            ):
                raise ConfigError("config.data.n_range must be [lo, hi] with 1 <= lo <= hi")
            het = data.get("heterogeneity", 1.0)
            if not isinstance(het, (int, float)) or het < 0:
                raise ConfigError("config.data.heterogeneity must be a nonnegative number")
        elif gen == "gaussian_mixture":
            means = data.get("means")
            if not isinstance(means, list) or not means:
                raise ConfigError("config.data.means must be a non-empty list of vectors")
            if not isinstance(data.get("n_per_device"), int) or data["n_per_device"] < 1:
                raise ConfigError("config.data.n_per_device must be a positive integer")
        else:
            raise ConfigError(f"config.data.generator must be hetero_logistic or gaussian_mixture, got {gen!r}")
    else:
        raise ConfigError("config.data needs either a generator or a device_file")

    loss_raw = _need(raw, "loss", dict, "config")
    kind = _need(loss_raw, "kind", str, "config.loss")
    try:
        loss = LossSpec(
            kind=kind,
            l2_reg=float(loss_raw.get("l2_reg", 0.0)),
            num_classes=int(loss_raw.get("num_classes", 2)),
        )
    except ValueError as exc:
        raise ConfigError(f"config.loss: {exc}") from exc

    federation = raw.get("federation", {})
    if not isinstance(federation, dict):
        raise ConfigError("config.federation must be an object")
    allowed = {
        "nu",
        "devices_per_round",
        "n_local",
        "local_epoch",
        "batch_size",
        "lr0",
        "lr_decay",
        "lr_decay_every",
        "num_rounds",
        "eta_period",
        "aggregation",
        "eta_protocol",
    }
    unknown = set(federation) - allowed
    if unknown:
        raise ConfigError(f"config.federation has unknown fields: {sorted(unknown)}")

    eval_every = raw.get("eval_every", 0)
    if not isinstance(eval_every, int) or eval_every < 0:
        raise ConfigError("config.eval_every must be a nonnegative integer")

    split_fraction = raw.get("split_fraction")
    if split_fraction is not None and (
        not isinstance(split_fraction, (int, float)) or not (0.0 < split_fraction < 1.0)
    ):
        raise ConfigError("config.split_fraction must lie strictly between 0 and 1")
    split_seed = raw.get("split_seed", 0)
    if not isinstance(split_seed, int):
        raise ConfigError("config.split_seed must be an integer")

    am_raw = raw.get("am", {})
    if not isinstance(am_raw, dict):
        raise ConfigError("config.am must be an object")
    try:
        am = AMSettings(**am_raw)
    except TypeError as exc:
        raise ConfigError(f"config.am: {exc}") from exc

    cfg = ExperimentConfig(
        algorithm=algorithm,
        output_dir=output_dir,
        thetas=[float(t) for t in thetas],
        seeds=[int(s) for s in seeds],
        data=data,
        loss=loss,
        federation=dict(federation),
        eval_every=eval_every,
        split_fraction=None if split_fraction is None else float(split_fraction),
        split_seed=split_seed,
        am=am,
    )
    # Surface federation field errors now rather than at run time.
    try:
        _federation_config(cfg, theta=cfg.thetas[0], seed=cfg.seeds[0])
    except ValueError as exc:
        raise ConfigError(f"config.federation: {exc}") from exc
    return cfg


def _federation_config(cfg: ExperimentConfig, theta: float, seed: int) -> FederationConfig:
    return FederationConfig(theta=theta, seed=seed, loss=cfg.loss, **cfg.federation)


def _build_population(cfg: ExperimentConfig, seed: int) -> Population:
    data = cfg.data
    if "device_file" in data:
        return load_devices_jsonl(data["device_file"], num_classes=data.get("num_classes"))
    data_seed = data.get("seed")
    root = int(data_seed) if data_seed is not None else seed
    if data["generator"] == "hetero_logistic":
        return gen_hetero_logistic(
            num_devices=data["num_devices"],
            n_range=(data["n_range"][0], data["n_range"][1]),
            feature_dim=data["feature_dim"],
            num_classes=data["num_classes"],
            heterogeneity=float(data.get("heterogeneity", 1.0)),
            seed=root,
        )
    return gen_gaussian_mixture(data["means"], data["n_per_device"], seed=root)


def _is_classifier(loss: LossSpec) -> bool:
    return loss.kind in ("binary_logistic", "multinomial_logistic")


def _final_metrics(
    cfg: ExperimentConfig, params: np.ndarray, train: Population, test: Population | None
) -> dict[str, float]:
    out: dict[str, float] = {}
    table = metrics_mod.table_from_population(
        train, "train_loss", lambda s: models.device_loss(cfg.loss, params, s)
    )
    for key, val in metrics_mod.summarize(table).items():
        out[f"train_loss_{key}"] = val
    if test is not None and _is_classifier(cfg.loss):
        etable = metrics_mod.table_from_population(
            test, "test_error", lambda s: models.device_error(cfg.loss, params, s)
        )
        for key, val in metrics_mod.summarize(etable).items():
            out[f"test_error_{key}"] = val
    return out


def _snapshot_rows(
    cfg: ExperimentConfig, run, train: Population, test: Population | None
) -> list[dict]:
    rows = []
    for snap in run.snapshots:
        row: dict = {"round": snap.round_index}
        row.update(_final_metrics(cfg, snap.params, train, test))
        rows.append(row)
    final_round = cfg.federation.get("num_rounds", FederationConfig().num_rounds) - 1
    if not rows or rows[-1]["round"] != final_round:
        row = {"round": final_round}
        row.update(_final_metrics(cfg, run.params, train, test))
        rows.append(row)
    return rows


def _run_cell(cfg: ExperimentConfig, theta: float, seed: int, cell_dir: Path) -> dict[str, float]:
    pop = _build_population(cfg, seed)
    if cfg.split_fraction is not None:
        train, test = split_devices(pop, cfg.split_fraction, cfg.split_seed)
    else:
        train, test = pop, None
    cell_dir.mkdir(parents=True, exist_ok=True)

    if cfg.algorithm == "am_meta":
        objectives = population_objectives(train, cfg.loss)
        solver = CertifiedGradientDescent(
            strong_convexity=cfg.am.strong_convexity, initial_step=cfg.am.initial_step
        )
        schedule = PowerLawSchedule(cfg.am.eps0, cfg.am.exponent)
        nu = float(cfg.federation.get("nu", FederationConfig().nu))
        result = am_meta(
            objectives,
            theta,
            nu,
            schedule,
            solver,
            cfg.am.num_iters,
            models.init_params(cfg.loss, train.feature_dim),
        )
        with open(cell_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:
            for t, it in enumerate(result.iterates):
                fh.write(json.dumps({"iter": t, **it.to_dict()}) + "\n")
        rows = [
            {"iter": t, "grad_norm": it.grad_norm, "smoothed_value": it.smoothed_value}
            for t, it in enumerate(result.iterates)
        ]
        metrics_mod.summary_export(rows, cell_dir / "metrics.csv")
        final = _final_metrics(cfg, result.params, train, test)
        final["grad_norm"] = result.iterates[-1].grad_norm
        return final

    fed = _federation_config(cfg, theta=theta, seed=seed)
    run = run_federated(train, fed, algorithm=cfg.algorithm, eval_every=cfg.eval_every)
    with open(cell_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:
        for log in run.rounds:
            fh.write(json.dumps(log.to_dict()) + "\n")
    rows = _snapshot_rows(cfg, run, train, test)
    metrics_mod.summary_export(rows, cell_dir / "metrics.csv")
    return _final_metrics(cfg, run.params, train, test)


def _label(cfg: ExperimentConfig, theta: float) -> str:
    if cfg.algorithm == "fedavg":
        return "fedavg"
    if theta == 1.0:
        return "fedavg-equivalent"
    return cfg.algorithm


def cmd_run(cfg: ExperimentConfig) -> int:
    out_root = Path(cfg.output_dir)
    summary: dict = {"algorithm": cfg.algorithm, "seeds": cfg.seeds, "runs": {}}
    for theta in cfg.thetas:
        per_seed: list[dict[str, float]] = []
        for seed in cfg.seeds:
            cell_dir = out_root / "runs" / str(theta) / str(seed)
            per_seed.append(_run_cell(cfg, theta, seed, cell_dir))
        keys = list(per_seed[0].keys())
        aggregated = {}
        for key in keys:
            vals = np.array([m[key] for m in per_seed])
            std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
            aggregated[key] = {"mean": float(vals.mean()), "std": std}
        summary["runs"][str(theta)] = {"label": _label(cfg, theta), "final": aggregated}
    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"wrote {out_root / 'summary.json'}")
    return 0


def triangle_targets(means) -> dict:
    """Centroid and longest-side midpoint (or the tie report) for three means."""
    pts = np.asarray(means, dtype=np.float64)
    if pts.shape != (3, 2):
        raise ConfigError("the demo wants exactly three means in the plane")
    centroid = pts.mean(axis=0)
    pairs = [(0, 1), (0, 2), (1, 2)]
    lengths = [float(np.linalg.norm(pts[i] - pts[j])) for i, j in pairs]
    longest = max(lengths)
    tied = [k for k, ln in enumerate(lengths) if ln >= longest * (1.0 - 1e-9)]
    midpoints = [((pts[i] + pts[j]) / 2.0).tolist() for i, j in (pairs[k] for k in tied)]
    return {
        "centroid": centroid.tolist(),
        "side_lengths": lengths,
        "tie": len(tied) > 1,
        "tail_midpoints": midpoints,
    }


def _demo_am(objectives, theta: float, am: AMSettings, nu: float) -> np.ndarray:
    solver = CertifiedGradientDescent(strong_convexity=am.strong_convexity, initial_step=am.initial_step)
    result = am_meta(
        objectives,
        theta,
        nu,
        PowerLawSchedule(am.eps0, am.exponent),
        solver,
        am.num_iters,
        np.zeros(2),
    )
    return result.params


def cmd_gaussian_demo(output_dir: str, means=None, n_per_device: int = 10_000, seed: int = 0) -> int:
    means = DEFAULT_DEMO_MEANS if means is None else means
    targets = triangle_targets(means)
    pts = np.asarray(means, dtype=np.float64)
    am = AMSettings()
    nu = 1e-3
    spec = LossSpec("squared_distance")

    # Population (analytic) device objectives: ||w - mean||^2 + dim.
    analytic = quadratic_objectives(pts, offsets=np.full(3, 2.0))
    pop = gen_gaussian_mixture(pts, n_per_device, seed=seed)
    sampled = population_objectives(pop, spec)

    report: dict = {"means": pts.tolist(), "targets": targets, "analytic": {}, "sampled": {}}
    for theta, target_key in ((1.0, "centroid"), (2.0 / 3.0, "tail_midpoints")):
        for mode, objectives in (("analytic", analytic), ("sampled", sampled)):
            w = _demo_am(objectives, theta, am, nu)
            if target_key == "centroid":
                dist = float(np.linalg.norm(w - np.asarray(targets["centroid"])))
                entry = {"final": w.tolist(), "target": targets["centroid"], "distance": dist}
            else:
                dists = [float(np.linalg.norm(w - np.asarray(m))) for m in targets["tail_midpoints"]]
                entry = {
                    "final": w.tolist(),
                    "targets": targets["tail_midpoints"],
                    "distance": min(dists),
                    "tie": targets["tie"],
                }
            report[mode][str(theta)] = entry

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "gaussian_demo.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if targets["tie"]:
        print("longest side is tied; reporting all tied midpoints")
    print(f"wrote {path}")
    return 0


def _load_config(path: str, overrides: argparse.Namespace) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    for key in ("algorithm", "output_dir"):
        val = getattr(overrides, key, None)
        if val is not None:
            raw[key] = val
    if getattr(overrides, "thetas", None):
        raw["thetas"] = [float(v) for v in overrides.thetas.split(",")]
    if getattr(overrides, "seeds", None):
        try:
            raw["seeds"] = [int(v) for v in overrides.seeds.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--seeds must be a comma-separated integer list: {exc}") from exc
    if getattr(overrides, "rounds", None) is not None:
        raw.setdefault("federation", {})["num_rounds"] = overrides.rounds
    if getattr(overrides, "eval_every", None) is not None:
        raw["eval_every"] = overrides.eval_every
    return parse_experiment_config(raw)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tailfed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the experiment grid from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--algorithm", choices=ALGORITHMS)
    p_run.add_argument("--output-dir", dest="output_dir")
    p_run.add_argument("--thetas", help="comma-separated theta list overriding the config")
    p_run.add_argument("--seeds", help="comma-separated seed list overriding the config")
    p_run.add_argument("--rounds", type=int, help="override federation.num_rounds")
    p_run.add_argument("--eval-every", dest="eval_every", type=int)

    p_val = sub.add_parser("validate", help="check a config file and echo its normalized form")
    p_val.add_argument("--config", required=True)

    p_demo = sub.add_parser("gaussian-demo", help="three-Gaussian tail-objective study")
    p_demo.add_argument("--output-dir", dest="output_dir", required=True)
    p_demo.add_argument("--n-per-device", dest="n_per_device", type=int, default=10_000)
    p_demo.add_argument("--seed", type=int, default=0)
    p_demo.add_argument("--means", help="JSON list of three 2-d means")

    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            cfg = _load_config(args.config, argparse.Namespace())
            print(json.dumps(cfg.normalized(), indent=2))
            return 0
        if args.command == "run":
            cfg = _load_config(args.config, args)
            return cmd_run(cfg)
        means = None
        if args.means:
            try:
                means = json.loads(args.means)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"--means is not valid JSON: {exc}") from exc
        return cmd_gaussian_demo(args.output_dir, means, args.n_per_device, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
