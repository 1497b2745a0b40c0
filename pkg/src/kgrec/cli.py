"""Command-line front end.

Subcommands: prepare, synth, train, eval, gradcheck, export-content. Every
run that takes --out writes a `run.meta` capturing the fully resolved
configuration, so any result can be reproduced from that file alone.

This module imports only the standard library at load time; the numeric
stack is imported inside the command handlers, after --threads and
--deterministic have been translated into environment thread caps.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

_SHARED = {
    "data": (None, str),
    "out": (None, str),
    "seed": (0, int),
    "threads": (0, int),  # 0 = library default
    "deterministic": (False, bool),
    "config": (None, str),
}

_DEFAULTS = {
    "prepare": dict(_SHARED),
    "synth": {
        **_SHARED,
        "seed": (7, int),
        "users": (200, int),
        "items": (300, int),
        "clusters": (4, int),
        "density": (0.1, float),
        "cold_fraction": (0.03, float),
        "held_out": (0.2, float),
    },
    "train": {
        **_SHARED,
        "mode": ("kmpn", str),
        "epochs": (300, int),
        "batch_size": (1024, int),
        "lr": (1e-3, float),
        "lr_end": (0.0, float),
        "h": (64, int),
        "layers": (3, int),
        "n_pref": (8, int),
        "n_meta": (64, int),
        "epsilon": (0.5, float),
        "lambda1": (1e-5, float),
        "lambda2": (1e-2, float),
        "lambda_cs": (0.1, float),
        "content_items": (None, str),
        "content_users": (None, str),
        "buckets": (4096, int),
        "history_size": (8, int),
        "negatives": (4, int),
        "eval_every": (0, int),
    },
    "eval": {
        **_SHARED,
        "checkpoint": (None, str),
        "split": ("test", str),
        "k": ("20,60,100", str),
        "content_items": (None, str),
        "content_users": (None, str),
    },
    "gradcheck": {
        **_SHARED,
        "kind": ("all", str),
        "tolerance": (1e-4, float),
    },
    "export-content": {
        **_SHARED,
        "checkpoint": (None, str),
        "no_binary": (False, bool),
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgrec",
        description="Knowledge-graph recommender: data prep, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, spec in _DEFAULTS.items():
        p = sub.add_parser(command)
        for name, (default, typ) in spec.items():
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, action="store_true", default=False)
            elif typ is int:
                p.add_argument(flag, type=int, default=None)
            elif typ is float:
                p.add_argument(flag, type=float, default=None)
            else:
                p.add_argument(flag, type=str, default=None)
    return parser


def _coerce(raw: str, typ, key: str):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as boolean")
    try:
        return typ(raw.strip())
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None


def _parse_config_file(path: str):
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            pairs.append((key.strip().replace("-", "_"), value))
    return pairs


def _resolve(args: argparse.Namespace, command: str) -> dict:
    """Defaults, overlaid by --config file values, overlaid by explicit flags."""
    spec = _DEFAULTS[command]
    resolved = {k: default for k, (default, _t) in spec.items()}
    if args.config:
        for key, raw in _parse_config_file(args.config):
            if key not in spec:
                raise ValueError(f"unknown config key {key!r}")
            resolved[key] = _coerce(raw, spec[key][1], key)
        resolved["config"] = args.config
    for key, (_default, typ) in spec.items():
        val = getattr(args, key)
        if typ is bool:
            if val:
                resolved[key] = True
        elif val is not None:
            resolved[key] = val
    return resolved


def _apply_threads(opts: dict) -> None:
    n = opts.get("threads") or 0
    if opts.get("deterministic") and n == 0:
        n = 1  # fixed reduction order
    if n > 0:
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(n)


def _write_run_meta(opts: dict, command: str) -> None:
    out = opts.get("out")
    if not out:
        return
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}"]
    for key in sorted(opts):
        lines.append(f"{key}={opts[key]}")
    (out_dir / "run.meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require(opts: dict, key: str, command: str):
    if not opts.get(key):
        raise ValueError(f"{command}: --{key.replace('_', '-')} is required")
    return opts[key]


def _summary_counts(bundle) -> str:
    store, graph = bundle.store, bundle.graph
    header = "users\titems\tinteractions\tentities\trelations\ttriplets"
    row = (
        f"{store.num_users}\t{store.num_items}\t{store.total_interactions()}\t"
        f"{graph.num_entities}\t{graph.num_relations_raw}\t{graph.num_triplets_raw}"
    )
    return header + "\n" + row


def _cmd_prepare(opts: dict) -> int:
    from .data import check_inverse_closure, load_bundle

    data = _require(opts, "data", "prepare")
    bundle = load_bundle(data)
    check_inverse_closure(bundle.graph)
    print(_summary_counts(bundle))
    return 0


def _cmd_synth(opts: dict) -> int:
    from .data import DatasetBundle, SyntheticSpec, make_synthetic_dataset, save_bundle

    out = _require(opts, "out", "synth")
    spec = SyntheticSpec(
        n_users=opts["users"],
        n_items=opts["items"],
        n_clusters=opts["clusters"],
        density=opts["density"],
        cold_user_fraction=opts["cold_fraction"],
        held_out_fraction=opts["held_out"],
    )
    store, graph, corpus = make_synthetic_dataset(spec, seed=opts["seed"])
    bundle = DatasetBundle(store=store, graph=graph, corpus=corpus)
    save_bundle(bundle, out)
    _write_run_meta(opts, "synth")
    print(_summary_counts(bundle))
    return 0


def _train_config(opts: dict):
    from .losses import LossWeights
    from .optim import TrainConfig

    weights = LossWeights(
        l2=opts["lambda1"],
        dcorr=opts["lambda2"],
        cross_system=opts["lambda_cs"],
        pca_keep=opts["epsilon"],
    )
    return TrainConfig(
        epochs=opts["epochs"],
        batch_size=opts["batch_size"],
        lr_start=opts["lr"],
        lr_end=opts["lr_end"],
        weights=weights,
        seed=opts["seed"],
        deterministic=opts["deterministic"],
        eval_every=opts["eval_every"],
    )


def _cmd_train(opts: dict) -> int:
    from .content import init_content, read_embeddings, save_content_checkpoint, train_content
    from .data import load_bundle
    from .model import init_params, save_checkpoint
    from .training import train_ckmpn, train_kmpn

    data = _require(opts, "data", "train")
    out = Path(_require(opts, "out", "train"))
    mode = opts["mode"]
    if mode not in ("kmpn", "ckmpn", "content"):
        raise ValueError(f"unknown train mode {mode!r}")
    bundle = load_bundle(data)
    out.mkdir(parents=True, exist_ok=True)
    config = _train_config(opts)

    if mode == "content":
        params = init_content(
            h=opts["h"],
            num_buckets=opts["buckets"],
            history_size=opts["history_size"],
            num_negatives=opts["negatives"],
            seed=opts["seed"],
        )
        trained, lines = train_content(bundle.corpus, bundle.store, params, config)
        save_content_checkpoint(trained, out / "checkpoint.content")
    else:
        params = init_params(
            bundle.graph.num_entities,
            bundle.graph.num_relations,
            bundle.store.num_users,
            h=opts["h"],
            n_layers=opts["layers"],
            n_pref=opts["n_pref"],
            n_meta=opts["n_meta"],
            seed=opts["seed"],
        )
        if mode == "ckmpn":
            if not opts["content_items"] or not opts["content_users"]:
                raise ValueError("mode ckmpn requires --content-items and --content-users")
            content = (
                read_embeddings(opts["content_items"]),
                read_embeddings(opts["content_users"]),
            )
            trained, lines = train_ckmpn(bundle, params, content, config)
        else:
            trained, lines = train_kmpn(bundle, params, config)
        save_checkpoint(trained, out / "checkpoint.kmpn")

    (out / "loss.log").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    _write_run_meta(opts, "train")
    return 0


def _cmd_eval(opts: dict) -> int:
    from .content import read_embeddings
    from .data import load_bundle
    from .evaluation import evaluate, evaluate_embeddings
    from .model import load_checkpoint

    data = _require(opts, "data", "eval")
    bundle = load_bundle(data)
    ks = tuple(int(x) for x in str(opts["k"]).split(",") if x.strip())
    split = opts["split"]
    if opts["checkpoint"]:
        params = load_checkpoint(opts["checkpoint"])
        report = evaluate(params, bundle, split, ks=ks)
    elif opts["content_items"] and opts["content_users"]:
        report = evaluate_embeddings(
            read_embeddings(opts["content_users"]),
            read_embeddings(opts["content_items"]),
            bundle,
            split,
            ks=ks,
        )
    else:
        raise ValueError("eval: need --checkpoint or both --content-items/--content-users")
    text = report.render()
    sys.stdout.write(text)
    if opts.get("out"):
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        _write_run_meta(opts, "eval")
    return 0


def _cmd_gradcheck(opts: dict) -> int:
    from .training import grad_check

    kinds = ("kmpn", "ckmpn", "content") if opts["kind"] == "all" else (opts["kind"],)
    reports = [grad_check(kind, tolerance=opts["tolerance"], seed=opts["seed"]) for kind in kinds]
    text = "\n".join(r.render() for r in reports) + "\n"
    sys.stdout.write(text)
    if opts.get("out"):
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(text, encoding="utf-8")
        _write_run_meta(opts, "gradcheck")
    return 0 if all(r.passed for r in reports) else 1


def _cmd_export_content(opts: dict) -> int:
    from .content import export_embeddings, load_content_checkpoint
    from .data import load_bundle

    data = _require(opts, "data", "export-content")
    out = _require(opts, "out", "export-content")
    ckpt = _require(opts, "checkpoint", "export-content")
    bundle = load_bundle(data)
    params = load_content_checkpoint(ckpt)
    item_set, user_set = export_embeddings(
        params, bundle.corpus, bundle.store, out, write_binary=not opts["no_binary"]
    )
    _write_run_meta(opts, "export-content")
    print(f"exported {item_set.count} item and {user_set.count} user embeddings (dim {item_set.dim})")
    return 0


_HANDLERS = {
    "prepare": _cmd_prepare,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "export-content": _cmd_export_content,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        opts = _resolve(args, args.command)
        _apply_threads(opts)
        return _HANDLERS[args.command](opts)
    except (ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())  # single line
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
