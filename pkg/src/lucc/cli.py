"""Command-line pipeline driver.

Every subcommand reads a JSON configuration, validates it fully before any
computation (exit 2 with field-level messages on failure), runs its stage, and
writes a manifest (inputs, outputs, seed, package versions, wall-clock per
stage) next to the outputs. Runtime failures exit 1.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import __version__
from .allocation import PatchParams, PruningConfig, allocate
from .calibration import KdeConfig, TransitionModel, calibrate
from .density import KernelSpec
from .evaluation import (benchmark_ground_truth, default_calibrator,
                         derived_seed, evaluate_pipeline, forge_reference_map,
                         generate_synthetic_landscape, patch_allocator,
                         run_calibration_comparison, run_full_comparison)
from .features import FeatureSpace
from .raster import (CATEGORICAL, CONTINUOUS, RasterGrid, StateLegend,
                     read_ascii_grid, write_ascii_grid)

_KDE_SCHEMA = {
    "type": "object",
    "properties": {
        "q": {"type": "integer", "minimum": 3},
        "kernel": {
            "type": "object",
            "properties": {
                "shape": {"enum": ["box", "triangle", "gaussian"]},
                "support_radius": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "bandwidth_override": {"type": ["number", "null"]},
    },
    "additionalProperties": False,
}

_PATCH_SCHEMA = {
    "type": "object",
    "properties": {
        "mean_area": {"type": "number", "minimum": 1},
        "area_variance": {"type": "number", "minimum": 0},
        "elongation": {"type": "number", "minimum": 1},
        "connectivity": {"enum": [4, 8]},
    },
    "additionalProperties": False,
}

_PRUNING_SCHEMA = {
    "type": "object",
    "properties": {
        "strategy": {"enum": ["none", "dinamica_rank", "lcm_rank",
                              "unbiased_sample"]},
        "F": {"type": "number", "minimum": 1},
    },
    "additionalProperties": False,
}

_TRANSITIONS_SCHEMA = {
    "type": "array", "minItems": 1,
    "items": {"type": "array", "minItems": 2, "maxItems": 2,
              "items": {"type": "integer", "minimum": 0}},
}

_FEATURES_SCHEMA = {
    "type": "array", "minItems": 1,
    "items": {"type": "object",
              "properties": {"name": {"type": "string"},
                             "path": {"type": "string"}},
              "required": ["name", "path"], "additionalProperties": False},
}

_LEGEND_SCHEMA = {
    "type": "array", "minItems": 2,
    "items": {"type": "array", "minItems": 2, "maxItems": 2},
}

_SCHEMAS = {
    "synth": {
        "type": "object",
        "properties": {
            "seed": {"type": "integer"},
            "width": {"type": "integer", "minimum": 64},
            "height": {"type": "integer", "minimum": 64},
            "cell_size": {"type": "number", "exclusiveMinimum": 0},
            "peak": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "patch": _PATCH_SCHEMA,
            "out_dir": {"type": "string"},
        },
        "required": ["seed", "out_dir"],
        "additionalProperties": False,
    },
    "calibrate": {
        "type": "object",
        "properties": {
            "map_t0": {"type": "string"},
            "map_t1": {"type": "string"},
            "features": _FEATURES_SCHEMA,
            "legend": _LEGEND_SCHEMA,
            "transitions": _TRANSITIONS_SCHEMA,
            "kde": _KDE_SCHEMA,
            "model_dir": {"type": "string"},
        },
        "required": ["map_t0", "map_t1", "features", "legend",
                     "transitions", "model_dir"],
        "additionalProperties": False,
    },
    "allocate": {
        "type": "object",
        "properties": {
            "model_dir": {"type": "string"},
            "map_in": {"type": "string"},
            "features": _FEATURES_SCHEMA,
            "patch": {"type": "object",
                      "additionalProperties": _PATCH_SCHEMA},
            "pruning": _PRUNING_SCHEMA,
            "seed": {"type": "integer"},
            "refresh_threshold": {"type": "number", "exclusiveMinimum": 0,
                                  "maximum": 1},
            "out": {"type": "string"},
        },
        "required": ["model_dir", "map_in", "features", "seed", "out"],
        "additionalProperties": False,
    },
    "evaluate": {
        "type": "object",
        "properties": {
            "seed": {"type": "integer"},
            "width": {"type": "integer", "minimum": 64},
            "height": {"type": "integer", "minimum": 64},
            "peak": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "repetitions": {"type": "integer", "minimum": 1},
            "patch": _PATCH_SCHEMA,
            "kde": _KDE_SCHEMA,
            "cuts": {"type": "array", "items": {
                "type": "object",
                "properties": {
                    "fixed": {"type": "object",
                              "additionalProperties": {"type": "number"}},
                    "axis": {"type": "integer", "minimum": 0},
                    "grid": {"type": "array", "minItems": 1,
                             "items": {"type": "number"}},
                },
                "required": ["fixed", "axis", "grid"],
                "additionalProperties": False,
            }},
            "out_dir": {"type": "string"},
        },
        "required": ["seed", "out_dir"],
        "additionalProperties": False,
    },
    "compare": {
        "type": "object",
        "properties": {
            "seed": {"type": "integer"},
            "width": {"type": "integer", "minimum": 64},
            "height": {"type": "integer", "minimum": 64},
            "peak": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "repetitions": {"type": "integer", "minimum": 1},
            "patch": _PATCH_SCHEMA,
            "kde": _KDE_SCHEMA,
            "strategies": {"type": "array", "minItems": 1, "items": _PRUNING_SCHEMA},
            "out": {"type": "string"},
        },
        "required": ["seed", "strategies", "out"],
        "additionalProperties": False,
    },
}


def _fail_config(messages: list[str]):
    for m in messages:
        click.echo(f"config error: {m}", err=True)
    sys.exit(2)


def _load_config(path: str, command: str) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        _fail_config([str(e)])
    validator = jsonschema.Draft202012Validator(_SCHEMAS[command])
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    msgs = [f"{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
            for e in errors]
    kde = cfg.get("kde") if isinstance(cfg, dict) else None
    if isinstance(kde, dict) and isinstance(kde.get("q"), int) and kde["q"] % 2 == 0:
        msgs.append("kde.q must be odd")
    # model_dir is an input only for allocate; elsewhere it is created
    input_keys = ["map_t0", "map_t1", "map_in"]
    if command == "allocate":
        input_keys.append("model_dir")
    for key in input_keys:
        p = cfg.get(key) if isinstance(cfg, dict) else None
        if isinstance(p, str) and not Path(p).exists():
            msgs.append(f"{key}: path {p!r} does not exist")
    for feat in (cfg.get("features") or []) if isinstance(cfg, dict) else []:
        if isinstance(feat, dict) and isinstance(feat.get("path"), str) \
                and not Path(feat["path"]).exists():
            msgs.append(f"features: path {feat['path']!r} does not exist")
    if msgs:
        _fail_config(msgs)
    return cfg


def _kde_config(cfg: dict) -> KdeConfig:
    kde = cfg.get("kde", {})
    kernel = kde.get("kernel", {})
    return KdeConfig(kde.get("q", 51),
                     KernelSpec(kernel.get("shape", "box"),
                                kernel.get("support_radius")),
                     kde.get("bandwidth_override"))


def _patch_params(obj: dict | None) -> PatchParams:
    obj = obj or {}
    return PatchParams(obj.get("mean_area", 1.0), obj.get("area_variance", 0.0),
                       obj.get("elongation", 1.0), obj.get("connectivity", 4))


def _pruning(obj: dict | None) -> PruningConfig:
    obj = obj or {}
    return PruningConfig(obj.get("strategy", "none"), obj.get("F", 10.0))


def _load_features(cfg: dict) -> FeatureSpace:
    grids = [(f["name"], read_ascii_grid(f["path"], kind=CONTINUOUS))
             for f in cfg["features"]]
    return FeatureSpace.from_grids(grids)


def _write_manifest(out_dir: Path, command: str, cfg: dict,
                    outputs: list[str], stages: dict[str, float],
                    name: str = "manifest.json"):
    manifest = {
        "command": command,
        "config": cfg,
        "outputs": outputs,
        "seed": cfg.get("seed"),
        "versions": {"lucc": __version__,
                     "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "wall_clock_s": {k: round(v, 4) for k, v in stages.items()},
    }
    with open(out_dir / name, "w") as f:
        json.dump(manifest, f, indent=1)


def _run_stage(fn):
    """Run a stage body, mapping runtime failures to exit 1."""
    try:
        return fn()
    except Exception as e:  # noqa: BLE001 - CLI boundary
        click.echo(f"error ({type(e).__name__}): {e}", err=True)
        sys.exit(1)


@click.group()
@click.version_option(__version__)
def main():
    """Statistical land-cover change modeling pipeline."""


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
def synth(config_path):
    """Generate a synthetic landscape and a forged later map."""
    cfg = _load_config(config_path, "synth")

    def body():
        out_dir = Path(cfg["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        stages = {}
        t0 = time.perf_counter()
        map_t0, feats = generate_synthetic_landscape(
            cfg["seed"], cfg.get("width", 256), cfg.get("height", 256),
            cfg.get("cell_size", 5.0))
        stages["landscape"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        gt = benchmark_ground_truth(cfg.get("peak", 0.5))
        map_t1 = forge_reference_map(map_t0, feats, gt, 1, 2,
                                     _patch_params(cfg.get("patch")),
                                     derived_seed(cfg["seed"], 1))
        stages["forge"] = time.perf_counter() - t0
        outputs = []
        shape = map_t0.values.shape
        write_ascii_grid(map_t0, out_dir / "map_t0.asc")
        write_ascii_grid(map_t1, out_dir / "map_t1.asc")
        outputs += ["map_t0.asc", "map_t1.asc"]
        for i, name in enumerate(feats.names):
            grid = RasterGrid(feats.values[:, i].reshape(shape),
                              map_t0.cell_size, -9999.0, CONTINUOUS,
                              map_t0.xllcorner, map_t0.yllcorner)
            write_ascii_grid(grid, out_dir / f"{name}.asc")
            outputs.append(f"{name}.asc")
        _write_manifest(out_dir, "synth", cfg, outputs, stages)
        click.echo(f"wrote {len(outputs)} rasters to {out_dir}")
    _run_stage(body)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
def calibrate_cmd(config_path):
    """Fit the transition model from two dated maps."""
    cfg = _load_config(config_path, "calibrate")

    def body():
        t0 = time.perf_counter()
        map_t0 = read_ascii_grid(cfg["map_t0"], kind=CATEGORICAL)
        map_t1 = read_ascii_grid(cfg["map_t1"], kind=CATEGORICAL)
        feats = _load_features(cfg)
        stages = {"load": time.perf_counter() - t0}
        legend = StateLegend(tuple((int(c), str(l)) for c, l in cfg["legend"]))
        transitions = [tuple(t) for t in cfg["transitions"]]
        t0 = time.perf_counter()
        model = calibrate(map_t0, map_t1, feats, legend, transitions,
                          _kde_config(cfg))
        stages["calibration"] = time.perf_counter() - t0
        model_dir = Path(cfg["model_dir"])
        model.save(model_dir)
        _write_manifest(model_dir, "calibrate", cfg,
                        sorted(p.name for p in model_dir.iterdir()), stages,
                        name="run_manifest.json")
        click.echo(f"model written to {model_dir} "
                   f"({stages['calibration']:.2f} s calibration)")
    _run_stage(body)


main.add_command(calibrate_cmd, name="calibrate")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
def allocate_cmd(config_path):
    """Simulate one time step under a fitted model."""
    cfg = _load_config(config_path, "allocate")

    def body():
        t0 = time.perf_counter()
        model = TransitionModel.load(cfg["model_dir"])
        map_in = read_ascii_grid(cfg["map_in"], kind=CATEGORICAL)
        feats = _load_features(cfg)
        stages = {"load": time.perf_counter() - t0}
        patch = {}
        for u, v in model.transitions:
            key = f"{u},{v}"
            patch[(u, v)] = _patch_params(cfg.get("patch", {}).get(key))
        t0 = time.perf_counter()
        out = allocate(model, map_in, feats, patch,
                       pruning=_pruning(cfg.get("pruning")),
                       seed=cfg["seed"],
                       refresh_threshold=cfg.get("refresh_threshold", 0.05))
        stages["allocation"] = time.perf_counter() - t0
        out_path = Path(cfg["out"])
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_ascii_grid(out, out_path)
        _write_manifest(out_path.parent, "allocate", cfg, [out_path.name],
                        stages, name=out_path.stem + ".manifest.json")
        click.echo(f"wrote {out_path} ({stages['allocation']:.2f} s allocation)")
    _run_stage(body)


main.add_command(allocate_cmd, name="allocate")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
def evaluate(config_path):
    """Run both comparison protocols against the exact ground truth."""
    cfg = _load_config(config_path, "evaluate")

    def body():
        out_dir = Path(cfg["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        cuts = [{"fixed": {int(k): v for k, v in c["fixed"].items()},
                 "axis": c["axis"], "grid": c["grid"]}
                for c in cfg.get("cuts", [])]
        t0 = time.perf_counter()
        report = evaluate_pipeline(
            cfg["seed"], cfg.get("width", 256), cfg.get("height", 256),
            cfg.get("peak", 0.5), cfg.get("repetitions", 20),
            _patch_params(cfg.get("patch")), _kde_config(cfg),
            cut_specs=cuts or None)
        total = time.perf_counter() - t0
        with open(out_dir / "report.json", "w") as f:
            f.write(report.to_json())
        outputs = ["report.json"]
        for i, cut in enumerate(report.cuts):
            name = f"cut_{i}_axis{cut['axis']}.csv"
            with open(out_dir / name, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["abscissa", "exact", "estimated"])
                w.writerows(np.asarray(cut["series"]).tolist())
            outputs.append(name)
        _write_manifest(out_dir, "evaluate", cfg, outputs,
                        dict(report.runtimes, total=total))
        click.echo(f"eps_calib={report.epsilon_calib:.3e} "
                   f"eps_tot={report.epsilon_tot:.3e} "
                   f"eps_tot_R={report.epsilon_tot_r:.3e} (R={report.r})")
    _run_stage(body)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
def compare(config_path):
    """Score allocation strategies against each other on one benchmark."""
    cfg = _load_config(config_path, "compare")

    def body():
        seed = cfg["seed"]
        gt = benchmark_ground_truth(cfg.get("peak", 0.5))
        map_t0, feats = generate_synthetic_landscape(
            seed, cfg.get("width", 256), cfg.get("height", 256))
        u, v = 1, 2
        legend = StateLegend(((1, "inert"), (2, "active")))
        patch = _patch_params(cfg.get("patch"))
        map_t1 = forge_reference_map(map_t0, feats, gt, u, v, patch,
                                     derived_seed(seed, 1000))
        calibrator = default_calibrator(legend, u, v, _kde_config(cfg))
        eps_calib, prob_hat, model = run_calibration_comparison(
            map_t0, map_t1, feats, gt, calibrator, u, v)
        r = cfg.get("repetitions", 20)
        rows = []
        for strat_cfg in cfg["strategies"]:
            pruning = _pruning(strat_cfg)
            allocator = patch_allocator(u, v, patch, pruning, model)
            eps_tot, eps_tot_r = run_full_comparison(
                map_t1, prob_hat, feats, gt, allocator, calibrator,
                r, u, v, seed)
            label = pruning.strategy
            if pruning.strategy == "dinamica_rank":
                label += f" F={pruning.F:g}"
            rows.append([label, eps_calib, eps_tot, eps_tot_r])
            click.echo(f"{label}: eps_tot={eps_tot:.3e} eps_tot_R={eps_tot_r:.3e}")
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["strategy", "eps_calib", "eps_tot", f"eps_tot_{r}"])
            w.writerows(rows)
        _write_manifest(out.parent, "compare", cfg, [out.name], {},
                        name=out.stem + ".manifest.json")
    _run_stage(body)


@main.command()
@click.argument("manifests", nargs=-1, required=True,
                type=click.Path(exists=True))
def timing(manifests):
    """Tabulate per-stage wall-clock times from run manifests."""
    def body():
        click.echo(f"{'command':<12} {'calibration (s)':>16} {'total (s)':>12}")
        for path in manifests:
            with open(path) as f:
                m = json.load(f)
            stages = m.get("wall_clock_s", {})
            calib = stages.get("calibration", stages.get("calibrate", 0.0))
            total = sum(stages.values())
            click.echo(f"{m.get('command', '?'):<12} {calib:>16.2f} {total:>12.2f}")
    _run_stage(body)


if __name__ == "__main__":
    main()
