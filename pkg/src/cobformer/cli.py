"""``cobformer`` command line: partition, synth, train, analyze, gradcheck.

Every option can come from a flat JSON ``--config`` file (keys are the option
names with dashes turned into underscores) or from the command line; flags
beat the file, the file beats built-in defaults. ``--config default`` uses
the defaults alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io as cio
from .analysis import (
    AttnView,
    attention_cost,
    attn_k_profile,
    attn_snr,
    empirical_cuk,
    smoothness_frobenius,
    theoretical_cuk,
)
from .graph import edge_homophily, load_cora_raw, load_edge_list, row_normalize, save_edge_list
from .gradcheck import GradCheckConfig, run_gradcheck
from .layers import normalized_adjacency
from .model import CoBFormer, ModelConfig
from .partition import edge_cut, partition_multilevel
from .synth import SynthSpec, generate_homophilic_graph, make_node_data, synthetic_features
from .training import TrainConfig, train_loop

log = logging.getLogger("cobformer")

DATA_DEFAULTS = {"data": None, "cora": None, "normalize_features": True}

DEFAULTS = {
    "partition": {**DATA_DEFAULTS, "parts": 112, "epsilon": 0.1, "seed": 0, "out": "out/partition"},
    "synth": {
        "n": 1000, "classes": 2, "rho": 0.9, "deg": 4.0, "seed": 0,
        "feature_dim": 16, "feature_kind": "class", "out": "out/synth",
    },
    "train": {
        **DATA_DEFAULTS,
        **{f.name: f.default for f in fields(ModelConfig)},
        **{f.name: f.default for f in fields(TrainConfig)},
        "out": "out/train",
    },
    "analyze": {**DATA_DEFAULTS, "run": None, "kmax": 5, "rho": None, "out": "out/analyze"},
    "gradcheck": {**{f.name: f.default for f in fields(GradCheckConfig)}, "out": None},
}

HELP = {
    "data": "directory with edges.tsv, labels.tsv, features.txt and optional masks.tsv",
    "cora": "directory with cora.content and cora.cites",
    "run": "output directory of a previous train run",
}


OPTION_TYPES = {"gcn_hidden": int, "rho": float}


class ConfigError(ValueError):
    pass


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_options(parser, defaults):
    parser.add_argument("--config", default="default", help="JSON config file or 'default'")
    for key, value in defaults.items():
        flag = "--" + key.replace("_", "-")
        if key in OPTION_TYPES and value is None:
            kind = OPTION_TYPES[key]
        elif isinstance(value, bool):
            kind = _parse_bool
        elif isinstance(value, int):
            kind = int
        elif isinstance(value, float):
            kind = float
        else:
            kind = str
        parser.add_argument(flag, dest=key, type=kind, default=None, help=HELP.get(key))


def build_parser():
    parser = argparse.ArgumentParser(prog="cobformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        _add_options(sub.add_parser(name), defaults)
    return parser


def resolve_config(command, args) -> dict:
    """defaults <- config file <- explicit flags."""
    conf = dict(DEFAULTS[command])
    if args.config != "default":
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        unknown = sorted(set(loaded) - set(conf))
        if unknown:
            raise ConfigError(f"{args.config}: unknown key(s) {', '.join(unknown)}")
        conf.update(loaded)
    for key in DEFAULTS[command]:
        value = getattr(args, key)
        if value is not None:
            conf[key] = value
    return conf


def _echo(conf):
    return {k: v for k, v in conf.items() if k != "out"}


def _out_dir(conf):
    out = Path(conf["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_dataset(conf):
    """(graph, NodeData) from ``--data`` or ``--cora``."""
    if conf.get("cora"):
        root = Path(conf["cora"])
        graph, data, _ = load_cora_raw(root / "cora.content", root / "cora.cites")
    elif conf.get("data"):
        root = Path(conf["data"])
        masks = root / "masks.tsv"
        graph, data, _ = load_edge_list(
            root / "edges.tsv", root / "labels.tsv", root / "features.txt", masks if masks.exists() else None
        )
    else:
        raise ConfigError("no dataset: pass --data DIR or --cora DIR")
    if conf.get("normalize_features"):
        data = row_normalize(data)
    return graph, data


def _split_configs(conf):
    mc = ModelConfig(**{f.name: conf[f.name] for f in fields(ModelConfig)})
    tc = TrainConfig(**{f.name: conf[f.name] for f in fields(TrainConfig)})
    return mc, tc


# ---------------------------------------------------------------------------
# subcommands


def cmd_partition(conf):
    graph, _ = load_dataset(conf)
    out = _out_dir(conf)
    part = partition_multilevel(graph, conf["parts"], conf["epsilon"], conf["seed"])
    part.check()
    cio.save_partition(out / "partition.tsv", part, graph)
    cut = edge_cut(graph, part)
    print(f"P={part.num_parts} cut={cut} maxload={int(part.sizes.max())} cap={part.cap}")
    cio.write_manifest(out, "partition", _echo(conf), conf["seed"], {"edge_cut": cut})


def cmd_synth(conf):
    spec = SynthSpec(conf["n"], conf["classes"], conf["rho"], conf["deg"], conf["seed"])
    graph, labels = generate_homophilic_graph(spec)
    x = synthetic_features(labels, spec.num_classes, conf["feature_dim"], conf["feature_kind"], seed=conf["seed"])
    data = make_node_data(labels, spec.num_classes, x)
    out = _out_dir(conf)
    save_edge_list(graph, data, out)
    rho = edge_homophily(graph, labels)
    cio.write_json(out / "synth.json", {"spec": spec.to_dict(), "edges": graph.num_edges, "measured_rho": rho})
    print(f"nodes={graph.num_nodes} edges={graph.num_edges} measured_rho={rho:.5f}")
    cio.write_manifest(out, "synth", _echo(conf), conf["seed"])


def _prepare_partition(mc, tc, graph):
    if mc.branches == "both" and mc.attention == "bga":
        return partition_multilevel(graph, tc.num_parts, tc.epsilon, tc.seed)
    return None


def cmd_train(conf):
    from .plotting import plot_training

    graph, data = load_dataset(conf)
    mc, tc = _split_configs(conf)
    out = _out_dir(conf)
    adj = normalized_adjacency(graph)
    part = _prepare_partition(mc, tc, graph)
    if part is not None:
        cio.save_partition(out / "partition.tsv", part, graph)
    model = CoBFormer(mc, data.features.shape[1], data.num_classes, seed=tc.seed)
    with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        result = train_loop(model, data, adj, part, tc, metrics_stream=fh)
    cio.save_checkpoint(out / "checkpoint.cbt", result.best_state)
    cio.write_json(out / "summary.json", result.summary(mc, tc))
    if result.history:
        plot_training(out / "training.png", result.history)
    best = result.best_record
    if best is None:
        print("no epochs run; checkpoint holds the initialization")
    else:
        line = f"best epoch {best.epoch}: val_g={best.val_g:.4f} test_mi_g={best.test_mi_g:.4f}"
        if best.val_t is not None:
            line += f" val_t={best.val_t:.4f} test_mi_t={best.test_mi_t:.4f}"
        print(line)
    cio.write_manifest(out, "train", _echo(conf), tc.seed)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_analyze(conf):
    from .plotting import plot_attn_k, plot_cuk

    out = _out_dir(conf)
    run_conf = None
    if conf.get("run"):
        manifest = json.loads((Path(conf["run"]) / "manifest.json").read_text(encoding="utf-8"))
        if manifest.get("subcommand") != "train":
            raise ConfigError(f"{conf['run']} is not a train run")
        run_conf = {**DEFAULTS["train"], **manifest["config"]}
        if not (conf.get("data") or conf.get("cora")):
            conf = {**conf, **{k: run_conf[k] for k in DATA_DEFAULTS}}
    graph, data = load_dataset(conf)
    labels = data.labels
    kmax = conf["kmax"]

    cuk = empirical_cuk(graph, labels, kmax)
    _write_csv(out / "cuk_empirical.csv", ["k", "mean_C"], [[k, repr(float(v))] for k, v in enumerate(cuk.mean)])
    rho = conf["rho"] if conf["rho"] is not None else edge_homophily(graph, labels)
    theory = [theoretical_cuk(rho, data.num_classes, k) for k in range(kmax + 1)]
    _write_csv(out / "cuk_theory.csv", ["k", "C"], [[k, repr(v)] for k, v in enumerate(theory)])
    plot_cuk(out / "cuk.png", np.nan_to_num(cuk.mean), theory)

    if run_conf is not None:
        run_dir = Path(conf["run"])
        mc, tc = _split_configs(run_conf)
        model = CoBFormer(mc, data.features.shape[1], data.num_classes, seed=tc.seed)
        model.load_state_dict(cio.load_checkpoint(run_dir / "checkpoint.cbt"))
        part = cio.load_partition(run_dir / "partition.tsv") if (run_dir / "partition.tsv").exists() else None
        if mc.branches != "both":
            raise ConfigError("analyze needs a model with the attention branch")
        res = model.forward(data.features, normalized_adjacency(graph), part, capture=True)
        dense = mc.attention == "vanilla"
        profiles, rows = {}, []
        for cap in res.captures:
            view = AttnView.from_capture(cap, part, dense=dense)
            cio.save_attention_dump(out / f"attention_layer{cap.layer}.txt", view)
            modes = ["dense"] if dense else ["mixed", "intra", "inter"]
            profs = {m: attn_k_profile(view, graph, kmax, mode="mixed" if m == "dense" else m) for m in modes}
            if cap.layer == 0:
                profiles = profs
            for k in range(kmax + 1):
                rows.append([cap.layer, k] + [repr(float(profs[m].bins[k])) for m in modes])
            rows.append([cap.layer, "overflow"] + [repr(profs[m].overflow) for m in modes])
            snr = attn_snr(view, labels)
            with open(out / f"snr_layer{cap.layer}.txt" if cap.layer else out / "snr.txt", "w",
                      encoding="utf-8", newline="\n") as fh:
                fh.write(f"S={snr.same_label_mass!r}\nD={snr.diff_label_mass!r}\ndB={snr.snr_db!r}\n")
                if snr.flag:
                    fh.write(f"flag={snr.flag}\n")
            smooth = smoothness_frobenius(res.bga_out.values, view)
            (out / f"smoothness_layer{cap.layer}.txt").write_text(f"{smooth!r}\n", encoding="utf-8")
        _write_csv(out / "attnk.csv", ["layer", "k", *(["attn_mass"] if dense else ["attn_mass", "intra", "inter"])],
                   rows)
        plot_attn_k(out / "attnk.png", {m: p for m, p in profiles.items()})
        n = data.num_nodes
        bound = 3.0 * n ** (4.0 / 3.0)
        counter = res.score_entries[0]
        expected = n * n + 1 if dense else attention_cost(part)
        (out / "cost.txt").write_text(
            f"counter={counter}\nexpected={expected}\nbound_3N^(4/3)={bound!r}\n", encoding="utf-8"
        )
    cio.write_manifest(out, "analyze", _echo(conf), (run_conf or {}).get("seed", 0))
    print(f"wrote analysis to {out}")


def cmd_gradcheck(conf):
    gc = GradCheckConfig(**{f.name: conf[f.name] for f in fields(GradCheckConfig)})
    t0 = time.perf_counter()
    res = run_gradcheck(gc)
    elapsed = time.perf_counter() - t0
    verdict = "PASS" if res.passed else "FAIL"
    print(f"max relative error: {res.max_rel_error:.3e} ({res.num_params} parameters, {elapsed:.1f}s)")
    print(f"{verdict} (threshold {gc.threshold:g})")
    if conf.get("out"):
        out = _out_dir(conf)
        cio.write_json(out / "gradcheck.json", {"max_rel_error": res.max_rel_error, "passed": res.passed,
                                                "num_params": res.num_params, "model_seed": res.model_seed})
        cio.write_manifest(out, "gradcheck", _echo(conf), gc.seed)
    return 0 if res.passed else 1


COMMANDS = {
    "partition": cmd_partition,
    "synth": cmd_synth,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        conf = resolve_config(args.command, args)
        status = COMMANDS[args.command](conf)
    except (ValueError, RuntimeError, ArithmeticError, OSError, KeyError) as exc:
        print(f"cobformer {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
