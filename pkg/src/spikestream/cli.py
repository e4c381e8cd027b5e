"""Command-line entry point: train, eval, count, probe, fuse, gen.

Network topology comes from a TOML config (sections: network, train, data);
scalar flags override config values.  Every command is deterministic given
its flags and seed; the SPIKESTREAM_SEED environment variable is the seed
of last resort.  Machine-readable output (JSON, CSV, NDJSON) goes to the
requested files or stdout; a short human summary accompanies file output.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .analysis import REGIMES, VARIANTS, probe_rows, write_probe_csv
from .data import (
    DataFormatError,
    load_images,
    save_images,
    synth_two_class,
)
from .network import (
    CheckpointError,
    NetworkConfig,
    build,
    fuse_network,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import ShapeError
from .syops import (
    CountingError,
    SyopsCounter,
    report,
    verify_reference_budgets,
)
from .train import TrainConfig, evaluate, softmax_cross_entropy, train

__all__ = ["main", "ConfigError"]


class ConfigError(Exception):
    """Bad configuration or usage detected before any work started."""


def _resolve_seed(flag_value, config_value=None) -> int:
    if flag_value is not None:
        return int(flag_value)
    if config_value is not None:
        return int(config_value)
    env = os.environ.get("SPIKESTREAM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SPIKESTREAM_SEED must be an integer, got {env!r}") from None
    return 0


def _load_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc


def _network_config(section: dict) -> NetworkConfig:
    d = dict(section)
    d.setdefault("neuron", {})
    d.setdefault("surrogate", {})
    d.setdefault("stages", [])
    try:
        return NetworkConfig.from_dict(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad [network] section: {exc}") from exc


def _datasets(data_section: dict, net_cfg: NetworkConfig):
    """Resolve the [data] section to (train_set, eval_set or None)."""
    if "synth2" in data_section:
        s = data_section["synth2"]
        train_set = synth_two_class(
            int(s.get("n", 64)),
            t_steps=int(s.get("t_steps", net_cfg.t_steps)),
            seed=int(s.get("seed", 0)),
        )
        eval_set = None
        if s.get("eval_n"):
            eval_set = synth_two_class(
                int(s["eval_n"]),
                t_steps=int(s.get("t_steps", net_cfg.t_steps)),
                seed=int(s.get("seed", 0)) + 1,
                split="eval",
            )
        return train_set, eval_set
    if "train" in data_section:
        train_set = load_images(data_section["train"])
        eval_set = load_images(data_section["eval"]) if "eval" in data_section else None
        return train_set, eval_set
    raise ConfigError("[data] section needs either a 'train' path or a [data.synth2] block")


def _write_json(doc: dict, out: str | None, summary: str) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
        print(summary)
    else:
        print(text)


# ---- commands --------------------------------------------------------------


def cmd_train(args) -> int:
    raw = _load_toml(args.config)
    for section in ("network", "train", "data"):
        if section not in raw:
            raise ConfigError(f"config is missing the [{section}] section")
    net_cfg = _network_config(raw["network"])
    tr = dict(raw["train"])
    # pop before the flag check so the keys never leak into TrainConfig
    cfg_log = tr.pop("log", "train.ndjson")
    cfg_ckpt = tr.pop("checkpoint", "checkpoint.spkc")
    log_path = args.log or cfg_log
    ckpt_path = args.out or cfg_ckpt
    seed = _resolve_seed(args.seed, tr.pop("seed", None))
    for flag in ("epochs", "batch_size", "lr", "mode"):
        v = getattr(args, flag)
        if v is not None:
            tr[flag] = v
    try:
        train_cfg = TrainConfig(seed=seed, **tr)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [train] section: {exc}") from exc
    try:
        net = build(net_cfg, seed=seed)
    except ShapeError as exc:
        raise ConfigError(f"network config does not build: {exc}") from exc
    train_set, eval_set = _datasets(raw["data"], net_cfg)

    history = train(net, train_set, train_cfg, eval_set=eval_set)
    with open(log_path, "w") as fh:
        header = {
            "seed": seed,
            "mode": train_cfg.mode,
            "epochs": train_cfg.epochs,
            "config": os.path.abspath(args.config),
        }
        fh.write(json.dumps(header) + "\n")
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
    save_checkpoint(ckpt_path, net)
    if history:
        last = history[-1]
        print(
            f"trained {train_cfg.epochs} epochs (seed {seed}): "
            f"loss_s={last['loss_s']:.4f} acc={last['acc_combined']:.3f}"
        )
    print(f"checkpoint: {ckpt_path}\nlog: {log_path}")
    return 0


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    ds = load_images(args.data)
    per_head: dict[str, float] = {}
    loss_sum = 0.0
    seen = 0
    hits = {"s_only": 0, "sum": 0, "a_only": 0}
    for x, y in ds.batches(args.batch_size):
        out = net.forward(x, mode=args.mode, training=False)
        loss_sum += float(softmax_cross_entropy(out.logits_s, y).item()) * y.shape[0]
        seen += y.shape[0]
        hits["s_only"] += int((out.predictions("s_only") == y).sum())
        if args.mode == "dsnn":
            hits["sum"] += int((out.predictions("sum") == y).sum())
            hits["a_only"] += int((out.predictions("a_only") == y).sum())
    per_head["s_only"] = hits["s_only"] / seen
    if args.mode == "dsnn":
        per_head["sum"] = hits["sum"] / seen
        per_head["a_only"] = hits["a_only"] / seen
    head_mode = "s_only" if args.mode == "fsnn" else net.config.head_mode
    doc = {
        "mode": args.mode,
        "head_mode": head_mode,
        "accuracy": per_head["s_only" if args.mode == "fsnn" else head_mode],
        "loss_s": loss_sum / seen,
        "n_samples": seen,
        "per_head": per_head,
    }
    _write_json(doc, args.out, f"accuracy ({args.mode}, {head_mode}): {doc['accuracy']:.4f}")
    return 0


def cmd_count(args) -> int:
    if args.self_test:
        rows = verify_reference_budgets()
        ok = all(r["ok"] for r in rows)
        _write_json(
            {"reference_budgets": rows, "all_ok": ok},
            args.out,
            f"reference energy budgets: {'all ok' if ok else 'MISMATCH'}",
        )
        return 0 if ok else 1
    if not args.checkpoint:
        raise ConfigError("count needs a checkpoint (or --self-test)")
    net = load_checkpoint(args.checkpoint)
    cfg = net.config
    counter = SyopsCounter()
    if args.static:
        zeros = np.zeros((cfg.t_steps, 1, cfg.in_channels, *cfg.in_hw), dtype=np.float32)
        net.forward(zeros, mode=args.mode, counter=counter, training=False)
        count = counter.result()
        low, high = count.estimated_consumption_mj()
        doc = {
            "static": True,
            "mode": args.mode,
            "mac_ops": count.mac_ops,
            "ac_max_ops": count.ac_max_ops,
            "ec_mj": [low, high],
            "per_layer": [
                {"name": l.name, "path": l.path, "signal": l.signal, "mac": l.mac, "ac_max": l.ac_max}
                for l in count.layers
            ],
        }
        _write_json(doc, args.out, f"estimated consumption: {low:.4f}..{high:.4f} mJ/sample")
        return 0
    if not args.data:
        raise ConfigError("count needs a data file unless --static or --self-test is given")
    ds = load_images(args.data)
    for x, _ in ds.batches(args.batch_size):
        net.forward(x, mode=args.mode, counter=counter, training=False)
    count = counter.result()
    doc = report(count, t_steps=cfg.t_steps)
    doc["mode"] = args.mode
    _write_json(doc, args.out, f"dynamic consumption: {doc['dc_mj']:.4f} mJ/sample")
    return 0


def cmd_probe(args) -> int:
    seed = _resolve_seed(args.seed)
    rows = probe_rows(args.depth, args.g, args.regime, with_aap=args.aap, seed=seed)
    if args.out:
        write_probe_csv(rows, args.out)
        print(f"probe ({args.g}, {args.regime}, aap={args.aap}): {len(rows)} rows -> {args.out}")
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_fuse(args) -> int:
    net = load_checkpoint(args.checkpoint_in)
    fused = fuse_network(net)
    save_checkpoint(args.checkpoint_out, fused)
    print(f"fused checkpoint: {args.checkpoint_out}")
    return 0


def cmd_gen(args) -> int:
    if args.kind == "synth2":
        seed = _resolve_seed(args.seed)
        ds = synth_two_class(args.n, t_steps=args.T, seed=seed, split=args.split)
        save_images(args.out, ds)
        print(f"wrote {len(ds)} samples (T={args.T}, seed {seed}) to {args.out}")
        return 0
    # spkd-import: validate a container and re-emit it normalized
    if not getattr(args, "input", None):
        raise ConfigError("gen --kind spkd-import needs --in")
    ds = load_images(args.input)
    save_images(args.out, ds)
    print(f"imported {len(ds)} samples from {args.input} to {args.out}")
    return 0


# ---- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikestream",
        description="Dual-stream spiking network toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a TOML config")
    p.add_argument("config", help="TOML config with [network], [train], [data] sections")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--mode", choices=("fsnn", "dsnn"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="checkpoint path (default from config)")
    p.add_argument("--log", default=None, help="NDJSON epoch log path (default from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--mode", choices=("fsnn", "dsnn"), default="dsnn")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="count synaptic operations and price them")
    p.add_argument("checkpoint", nargs="?", default=None)
    p.add_argument("data", nargs="?", default=None)
    p.add_argument("--mode", choices=("fsnn", "dsnn"), default="dsnn")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--static", action="store_true", help="architecture-only estimate (EC)")
    p.add_argument(
        "--self-test",
        dest="self_test",
        action="store_true",
        help="recompute the published reference energy budgets",
    )
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("probe", help="gradient-amplitude probe of an identity stack")
    p.add_argument("--depth", type=int, default=16)
    p.add_argument("--g", choices=VARIANTS, default="sn_residual")
    p.add_argument("--regime", choices=tuple(REGIMES), default="vanish")
    p.add_argument("--aap", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("fuse", help="fold batch norms into convs in a checkpoint")
    p.add_argument("checkpoint_in")
    p.add_argument("checkpoint_out")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("gen", help="generate or import a sample container")
    p.add_argument("--kind", choices=("synth2", "spkd-import"), default="synth2")
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--T", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", default="train")
    p.add_argument("--in", dest="input", default=None, help="source container for spkd-import")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (
        CheckpointError,
        DataFormatError,
        CountingError,
        ShapeError,
        ValueError,
        RuntimeError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
