"""Command-line entry points for experiments and diagnostics.

Subcommands: train, sweep-layers, energy-trace, perturb, hyperbolicity,
mix.  Configuration is a flat ``key = value`` text file; a ``preset`` key
(or ``--preset``) loads named defaults first and the file then overrides
them.  Exit codes: 0 success, 1 domain error (bad data, failed run),
2 configuration or parse error.

Output files carry no wall-clock timing by default so that a rerun with
the same seed and config is bit-identical; pass ``--timing`` to include
per-epoch wall_ms in the log at the cost of that guarantee.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError
from .datasets import (
    DataFormatError,
    DatasetBundle,
    generate_grid,
    generate_tree,
    gromov_delta,
    load_dataset,
    mix_datasets,
    save_dataset,
)
from .energy import EnergyKind
from .graph import GraphError, build_graph
from .integrators import IntegrationError, SolverConfig, trajectory_to_csv
from .model import (
    FlowKind,
    classify,
    embed,
    embed_with_trace,
    export_embeddings_csv,
    init_params,
)
from .training import (
    TrainConfig,
    TrainingError,
    evaluate_nc,
    make_citation_split,
    make_fraction_split,
    train,
)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Bad configuration: unknown key, bad value, missing required entry."""


# Per-dataset hyperparameter presets for both tasks, plus synthetic ones.
PRESETS: dict[str, dict[str, str]] = {
    "disease-nc": {"task": "nc", "dataset": "disease", "lr": "0.005", "weight_decay": "0.0001", "dropout": "0.4", "time": "1.0", "step_size": "1.0", "split": "fractions", "split_fractions": "0.3,0.1,0.6"},
    "disease-lp": {"task": "lp", "dataset": "disease", "lr": "0.005", "weight_decay": "0.01", "dropout": "0.4", "time": "1.0", "step_size": "0.5"},
    "airport-nc": {"task": "nc", "dataset": "airport", "lr": "0.005", "weight_decay": "0.001", "dropout": "0.8", "time": "2.0", "step_size": "0.5", "split": "fractions", "split_fractions": "0.7,0.15,0.15"},
    "airport-lp": {"task": "lp", "dataset": "airport", "lr": "0.005", "weight_decay": "0.0001", "dropout": "0.0", "time": "1.0", "step_size": "1.0"},
    "pubmed-nc": {"task": "nc", "dataset": "pubmed", "lr": "0.005", "weight_decay": "0.01", "dropout": "0.2", "time": "8.0", "step_size": "1.0", "split": "citation"},
    "pubmed-lp": {"task": "lp", "dataset": "pubmed", "lr": "0.005", "weight_decay": "0.0001", "dropout": "0.0", "time": "1.0", "step_size": "0.5"},
    "citeseer-nc": {"task": "nc", "dataset": "citeseer", "lr": "0.01", "weight_decay": "0.001", "dropout": "0.2", "time": "1.0", "step_size": "0.5", "split": "citation"},
    "citeseer-lp": {"task": "lp", "dataset": "citeseer", "lr": "0.001", "weight_decay": "0.0001", "dropout": "0.0", "time": "10.0", "step_size": "1.0"},
    "cora-nc": {"task": "nc", "dataset": "cora", "lr": "0.005", "weight_decay": "0.1", "dropout": "0.6", "time": "10.0", "step_size": "1.0", "split": "citation"},
    "cora-lp": {"task": "lp", "dataset": "cora", "lr": "0.005", "weight_decay": "0.0001", "dropout": "0.4", "time": "1.0", "step_size": "1.0"},
    "tree-nc": {"task": "nc", "dataset": "tree:depth=7,branching=2", "lr": "0.02", "weight_decay": "0.0005", "dropout": "0.0", "time": "2.0", "step_size": "1.0", "epochs": "200", "patience": "50"},
    "grid-nc": {"task": "nc", "dataset": "grid:rows=8,cols=8", "lr": "0.02", "weight_decay": "0.0005", "dropout": "0.0", "time": "2.0", "step_size": "1.0", "epochs": "200", "patience": "50"},
}

_DEFAULTS: dict[str, str] = {
    "task": "nc",
    "dataset": "",
    "data_root": "data",
    "flow": "hamiltonian",
    "energy": "learned-gcn",
    "solver": "euler",
    "time": "1.0",
    "step_size": "1.0",
    "rtol": "1e-6",
    "atol": "1e-8",
    "max_steps": "10000",
    "hidden_dim": "16",
    "lr": "0.01",
    "weight_decay": "0.0",
    "dropout": "0.0",
    "epochs": "1000",
    "patience": "100",
    "seed": "0",
    "fermi_r": "2.0",
    "fermi_t": "1.0",
    "normalize_features": "true",
    "split": "fractions",
    "split_fractions": "0.6,0.2,0.2",
    "lp_fractions": "0.85,0.05,0.10",
    "checkpoint": "",
}

_FLOWS = {f.value: f for f in FlowKind}
_ENERGIES = {e.value: e for e in EnergyKind}


def _parse_config_file(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
            key, _, value = stripped.partition("=")
            pairs[key.strip()] = value.strip()
    return pairs


def resolve_config(
    config_path: str | None,
    preset: str | None,
    overrides: dict[str, str] | None = None,
) -> dict[str, str]:
    """Merge defaults <- preset <- config file <- CLI overrides."""
    merged = dict(_DEFAULTS)
    file_pairs: dict[str, str] = {}
    if config_path:
        file_pairs = _parse_config_file(Path(config_path))
    preset_name = preset or file_pairs.pop("preset", None)
    if preset_name:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; have {sorted(PRESETS)}")
        merged.update(PRESETS[preset_name])
    unknown = set(file_pairs) - set(_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged.update(file_pairs)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _as_bool(text: str, key: str) -> bool:
    if text.lower() in ("true", "1", "yes", "on"):
        return True
    if text.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _as_fractions(text: str, key: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"{key}: expected three comma-separated fractions, got {text!r}")
    vals = tuple(float(p) for p in parts)
    return vals  # summation checked downstream


def _load_bundle(conf: dict[str, str]) -> DatasetBundle:
    spec = conf["dataset"]
    if not spec:
        raise ConfigError("no dataset configured (set 'dataset = <path or generator spec>')")
    if spec.startswith("tree:") or spec.startswith("grid:"):
        kind, _, args_text = spec.partition(":")
        args: dict[str, str] = {}
        if args_text:
            for item in args_text.split(","):
                k, _, v = item.partition("=")
                if not v:
                    raise ConfigError(f"bad generator argument {item!r} in {spec!r}")
                args[k.strip()] = v.strip()
        seed = int(args.get("seed", conf["seed"]))
        if kind == "tree":
            return generate_tree(
                depth=int(args.get("depth", 7)),
                branching=int(args.get("branching", 2)),
                noise_std=float(args.get("noise", 0.1)),
                seed=seed,
            )
        return generate_grid(
            rows=int(args.get("rows", 8)),
            cols=int(args.get("cols", 8)),
            seed=seed,
        )
    path = Path(spec)
    if not path.is_dir():
        candidate = Path(conf["data_root"]) / spec
        if candidate.is_dir():
            path = candidate
        else:
            raise FileNotFoundError(f"dataset directory not found: {spec}")
    bundle = load_dataset(path, normalize_features=_as_bool(conf["normalize_features"], "normalize_features"))
    return bundle


def _ensure_splits(bundle: DatasetBundle, conf: dict[str, str]) -> DatasetBundle:
    if bundle.splits is not None:
        return bundle
    rng = np.random.default_rng(int(conf["seed"]))
    if conf["split"] == "citation":
        splits = make_citation_split(bundle.labels, rng)
    elif conf["split"] == "fractions":
        splits = make_fraction_split(bundle.labels, rng, _as_fractions(conf["split_fractions"], "split_fractions"))
    else:
        raise ConfigError(f"split must be 'citation' or 'fractions', got {conf['split']!r}")
    return dataclasses.replace(bundle, splits=splits)


def _train_config(conf: dict[str, str]) -> TrainConfig:
    flow = _FLOWS.get(conf["flow"])
    if flow is None:
        raise ConfigError(f"unknown flow {conf['flow']!r}; have {sorted(_FLOWS)}")
    energy_kind = _ENERGIES.get(conf["energy"])
    if energy_kind is None:
        raise ConfigError(f"unknown energy {conf['energy']!r}; have {sorted(_ENERGIES)}")
    try:
        return TrainConfig(
            task=conf["task"],
            lr=float(conf["lr"]),
            weight_decay=float(conf["weight_decay"]),
            dropout=float(conf["dropout"]),
            time=float(conf["time"]),
            step_size=float(conf["step_size"]),
            method=conf["solver"],
            rtol=float(conf["rtol"]),
            atol=float(conf["atol"]),
            max_steps=int(conf["max_steps"]),
            hidden_dim=int(conf["hidden_dim"]),
            epochs=int(conf["epochs"]),
            patience=int(conf["patience"]),
            seed=int(conf["seed"]),
            flow=flow,
            energy_kind=energy_kind,
            fermi_r=float(conf["fermi_r"]),
            fermi_t=float(conf["fermi_t"]),
            lp_fractions=_as_fractions(conf["lp_fractions"], "lp_fractions"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _save_checkpoint(params, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, tensor in params.trainable():
        np.save(directory / f"{name}.npy", tensor.value)
        manifest[name] = list(tensor.shape)
    _write_json(directory / "manifest.json", {"schema_version": SCHEMA_VERSION, "tensors": manifest})


def _load_checkpoint(params, directory: Path) -> None:
    for name, tensor in params.trainable():
        arr = np.load(directory / f"{name}.npy")
        if arr.shape != tensor.shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, expected {tensor.shape}")
        tensor.value[...] = arr


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    conf = resolve_config(args.config, args.preset, {"seed": args.seed, "dataset": args.dataset})
    bundle = _load_bundle(conf)
    cfg = _train_config(conf)
    if cfg.task == "nc":
        bundle = _ensure_splits(bundle, conf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = train(bundle, cfg)
    z = embed(bundle.features, bundle.graph, result.params, cfg.solver(), flow=cfg.flow, energy_kind=cfg.energy_kind)
    export_embeddings_csv(z.value, out / "embeddings.csv")
    _save_checkpoint(result.params, out / "checkpoint")
    with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec.to_json_dict(include_timing=args.timing), sort_keys=True) + "\n")
    metrics = {
        "schema_version": SCHEMA_VERSION,
        "task": cfg.task,
        "dataset": bundle.name,
        "flow": cfg.flow.value,
        "seed": cfg.seed,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.log),
        "val_metric": result.val_metric,
        "test_metric": result.test_metric,
    }
    if args.timing:
        metrics["wall_ms"] = sum(rec.wall_ms for rec in result.log)
    _write_json(out / "metrics.json", metrics)
    print(f"{cfg.task} {bundle.name}: test_metric={result.test_metric:.4f} best_epoch={result.best_epoch}")
    return 0


def cmd_sweep_layers(args) -> int:
    conf = resolve_config(args.config, args.preset, {"seed": args.seed, "dataset": args.dataset})
    layers = [int(x) for x in args.layers.split(",") if x]
    if not layers or any(v < 1 for v in layers):
        raise ConfigError(f"--layers must be positive integers, got {args.layers!r}")
    bundle = _load_bundle(conf)
    bundle = _ensure_splits(bundle, conf)
    base = _train_config(conf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = ["flow,layers,seed,test_accuracy"]
    for flow in (FlowKind.HAMILTONIAN, FlowKind.LINEAR_DIFFUSION):
        for depth in layers:
            for s in range(args.seeds):
                cfg = dataclasses.replace(
                    base,
                    task="nc",
                    flow=flow,
                    method="euler",
                    time=float(depth),
                    step_size=1.0,
                    seed=base.seed + s,
                )
                result = train(bundle, cfg)
                rows.append(f"{flow.value},{depth},{cfg.seed},{result.test_metric!r}")
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"sweep complete: {len(rows) - 1} runs -> {out / 'sweep.csv'}")
    return 0


def cmd_energy_trace(args) -> int:
    conf = resolve_config(args.config, args.preset, {"seed": args.seed, "dataset": args.dataset})
    bundle = _load_bundle(conf)
    cfg = _train_config(conf)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(
        raw_dim=bundle.features.shape[1],
        feature_dim=cfg.hidden_dim,
        num_classes=max(bundle.num_classes, 1),
        rng=rng,
        with_vanilla=cfg.flow is FlowKind.VANILLA_ODE,
        fermi_r=cfg.fermi_r,
        fermi_t=cfg.fermi_t,
        dropout_rate=cfg.dropout,
    )
    if conf["checkpoint"]:
        _load_checkpoint(params, Path(conf["checkpoint"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, trace = embed_with_trace(
        bundle.features, bundle.graph, params, cfg.solver(), flow=cfg.flow, energy_kind=cfg.energy_kind
    )
    trajectory_to_csv(trace, out / "trace.csv", include_states=args.include_states)
    print(f"energy trace with {len(trace.times)} rows -> {out / 'trace.csv'}")
    return 0


def cmd_perturb(args) -> int:
    conf = resolve_config(args.config, args.preset, {"seed": args.seed, "dataset": args.dataset})
    if args.magnitude < 0:
        raise ConfigError(f"--magnitude must be non-negative, got {args.magnitude}")
    bundle = _load_bundle(conf)
    bundle = _ensure_splits(bundle, conf)
    cfg = _train_config(conf)
    if cfg.task != "nc":
        raise ConfigError("perturb supports the nc task only")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = train(bundle, cfg)
    params = result.params
    rng = np.random.default_rng(cfg.seed + 77)

    def accuracy(features, graph) -> float:
        z = embed(features, graph, params, cfg.solver(), flow=cfg.flow, energy_kind=cfg.energy_kind)
        return evaluate_nc(classify(z, params).value, bundle.labels, bundle.splits.test)

    clean_acc = accuracy(bundle.features, bundle.graph)
    if args.mode == "feature_noise":
        noisy = bundle.features.copy()
        noisy[bundle.splits.test] += rng.normal(0.0, args.magnitude, size=noisy[bundle.splits.test].shape)
        perturbed_acc = accuracy(noisy, bundle.graph)
    else:
        count = int(args.magnitude)
        existing = {(int(u), int(v)) for u, v in bundle.graph.edges}
        n = bundle.graph.num_nodes
        if n * (n - 1) // 2 - len(existing) < count:
            raise GraphError(f"cannot insert {count} new edges: graph too dense")
        added: set[tuple[int, int]] = set()
        while len(added) < count:
            u, v = (int(x) for x in rng.integers(0, n, size=2))
            if u == v:
                continue
            pair = (min(u, v), max(u, v))
            if pair in existing or pair in added:
                continue
            added.add(pair)
        new_edges = np.concatenate([bundle.graph.edges, np.array(sorted(added), dtype=np.int64).reshape(-1, 2)])
        perturbed_acc = accuracy(bundle.features, build_graph(n, new_edges))

    payload = {
        "schema_version": SCHEMA_VERSION,
        "mode": args.mode,
        "magnitude": args.magnitude,
        "seed": cfg.seed,
        "clean_accuracy": clean_acc,
        "perturbed_accuracy": perturbed_acc,
        "accuracy_drop": clean_acc - perturbed_acc,
    }
    _write_json(out / "perturb.json", payload)
    print(f"clean={clean_acc:.4f} perturbed={perturbed_acc:.4f}")
    return 0


def cmd_hyperbolicity(args) -> int:
    conf = resolve_config(args.config, args.preset, {"seed": args.seed, "dataset": args.dataset})
    bundle = _load_bundle(conf)
    rng = np.random.default_rng(int(conf["seed"]))
    report = gromov_delta(bundle.graph, mode=args.mode, sample_quadruples=args.samples, rng=rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"schema_version": SCHEMA_VERSION, "dataset": bundle.name}
    payload.update(report.to_json_dict())
    _write_json(out / "hyperbolicity.json", payload)
    print(f"{bundle.name}: max_delta={report.max_delta} over {report.quadruples_examined} quadruples")
    return 0


def cmd_mix(args) -> int:
    a = load_dataset(args.first, normalize_features=False)
    b = load_dataset(args.second, normalize_features=False)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    mixed = mix_datasets(a, b, rng, disjoint_features=args.disjoint_features)
    out = Path(args.out)
    save_dataset(mixed, out)
    _write_json(
        out / "mix_info.json",
        {
            "schema_version": SCHEMA_VERSION,
            "name": mixed.name,
            "num_nodes": mixed.graph.num_nodes,
            "num_edges": mixed.graph.num_edges,
            "num_classes": mixed.num_classes,
            "feature_dim": int(mixed.features.shape[1]),
        },
    )
    print(f"mixed dataset {mixed.name}: {mixed.graph.num_nodes} nodes -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamgnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--preset", default=None, help=f"one of {sorted(PRESETS)}")
        p.add_argument("--seed", default=None, help="override the config seed")
        p.add_argument("--dataset", default=None, help="override the config dataset")
        p.add_argument("--out", default="out", help="output directory")

    p_train = sub.add_parser("train", help="train a model and write metrics/embeddings")
    common(p_train)
    p_train.add_argument("--timing", action="store_true", help="include wall_ms in outputs (breaks bit-exact reruns)")
    p_train.set_defaults(fn=cmd_train)

    p_sweep = sub.add_parser("sweep-layers", help="depth sweep for the main and diffusion flows")
    common(p_sweep)
    p_sweep.add_argument("--layers", default="2,4,8,16,32,64")
    p_sweep.add_argument("--seeds", type=int, default=5)
    p_sweep.set_defaults(fn=cmd_sweep_layers)

    p_trace = sub.add_parser("energy-trace", help="record the energy along a trajectory")
    common(p_trace)
    p_trace.add_argument("--include-states", action="store_true")
    p_trace.set_defaults(fn=cmd_energy_trace)

    p_perturb = sub.add_parser("perturb", help="clean vs perturbed accuracy of a trained model")
    common(p_perturb)
    p_perturb.add_argument("--mode", choices=("feature_noise", "edge_add"), required=True)
    p_perturb.add_argument("--magnitude", type=float, required=True)
    p_perturb.set_defaults(fn=cmd_perturb)

    p_hyp = sub.add_parser("hyperbolicity", help="four-point delta report for a dataset")
    common(p_hyp)
    p_hyp.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    p_hyp.add_argument("--samples", type=int, default=1_000_000)
    p_hyp.set_defaults(fn=cmd_hyperbolicity)

    p_mix = sub.add_parser("mix", help="block-diagonal combination of two datasets")
    p_mix.add_argument("first")
    p_mix.add_argument("second")
    p_mix.add_argument("--out", required=True)
    p_mix.add_argument("--seed", type=int, default=0)
    p_mix.add_argument("--disjoint-features", action="store_true")
    p_mix.set_defaults(fn=cmd_mix)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (
        FileNotFoundError,
        DataFormatError,
        GraphError,
        IntegrationError,
        TrainingError,
        NumericalError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
