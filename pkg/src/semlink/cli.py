"""``semlink`` command-line tool.

Exit codes: 0 success, 1 usage error, 2 format/contract error, 3 runtime error.
"""

import argparse
import logging
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import codec, dataset as ds, dqn, nn, traffic, wire
from .errors import ContractError, FormatError, MappingError, ProtocolError, ShapeError

log = logging.getLogger("semlink")

EXIT_USAGE, EXIT_FORMAT, EXIT_RUNTIME = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# Run configuration ---------------------------------------------------------------------------

_HIGHWAY_KEYS = {f.name for f in fields(traffic.HighwayConfig)} - {"rewards"} | \
    {f.name for f in fields(traffic.RewardSpec)}
_AGENT_KEYS = {f.name for f in fields(dqn.AgentConfig)}
_TRAIN_KEYS = {"epochs", "alpha", "batch_size", "hidden", "classes", "per_class", "sigma", "test_fraction"}


def load_run_config(path):
    """Flat ``key=value`` file: highway keys bare, ``agent.*`` and ``train.*`` namespaced."""
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        values = traffic.parse_kv(fh.read())
    for key in values:
        ns, _, name = key.partition(".")
        ok = (key in _HIGHWAY_KEYS or (ns == "agent" and name in _AGENT_KEYS)
              or (ns == "train" and name in _TRAIN_KEYS))
        if not ok:
            raise UsageError(f"unknown config key {key!r} in {path}")
    return values


def highway_config(run, seed=None):
    values = {k: v for k, v in run.items() if "." not in k}
    cfg = traffic.config_from_mapping(values)
    return replace(cfg, seed=seed) if seed is not None and "seed" not in values else cfg


def agent_config(run, **overrides):
    kw = {}
    for key, raw in run.items():
        if key.startswith("agent."):
            name = key[6:]
            if name == "hidden_sizes":
                kw[name] = tuple(int(x) for x in raw.split(","))
            elif name in ("batch", "target_sync_every", "episodes", "buffer_capacity"):
                kw[name] = int(raw)
            else:
                kw[name] = float(raw)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return dqn.AgentConfig(**kw)


def _train_value(run, name, flag, default, cast):
    if flag is not None:
        return flag
    if f"train.{name}" in run:
        return cast(run[f"train.{name}"])
    return default


def _log_resolved(name, **items):
    log.info("%s resolved config: %s", name, " ".join(f"{k}={v}" for k, v in items.items()))


# Helpers -----------------------------------------------------------------------------------------

def parse_addr(text):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"address must be HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def get_dataset(source, args, run):
    if source == "synth":
        return ds.synth_generate(
            _train_value(run, "classes", getattr(args, "classes", None), 10, int),
            _train_value(run, "per_class", getattr(args, "per_class", None), 50, int),
            _train_value(run, "sigma", getattr(args, "sigma", None), 0.1, float),
            args.seed)
    if not os.path.isdir(source):
        raise UsageError(f"dataset directory {source!r} does not exist")
    return ds.load_dataset(source, getattr(args, "manifest", None) or "manifest.tsv")


def load_decoder(path, classmap=None):
    model = nn.load_weights(path)
    cmap = codec.read_class_map(classmap) if classmap else codec.default_class_map(model.layers[-1].n_out)
    return codec.DecoderHalf(model, cmap)


# Commands -------------------------------------------------------------------------------------------

def cmd_train_classifier(args, run):
    data = get_dataset(args.dataset, args, run)
    epochs = _train_value(run, "epochs", args.epochs, 500, int)
    alpha = _train_value(run, "alpha", args.alpha, 0.1, float)
    batch = _train_value(run, "batch_size", args.batch_size, 64, int)
    hidden = _train_value(run, "hidden", args.hidden, 10, int)
    test_fraction = _train_value(run, "test_fraction", args.test_fraction, 0.2, float)
    _log_resolved("train-classifier", dataset=args.dataset, n=len(data), classes=data.class_count,
                  shape=f"1024,{hidden},{data.class_count}", epochs=epochs, alpha=alpha,
                  batch_size=batch, test_fraction=test_fraction, seed=args.seed)
    train, test = ds.shuffle_split(data, test_fraction, args.seed)
    if args.resume and not args.reinit:
        model = nn.load_weights(args.resume)
        model = replace(model, alpha=alpha)
    else:
        model = nn.init_weights([ds.N_PIXELS, hidden, data.class_count],
                                [nn.Activation.RELU, nn.Activation.SOFTMAX], seed=args.seed, alpha=alpha)
    model, history = nn.train(model, train.X, train.labels, epochs, batch)
    test_acc = nn.accuracy(model, test.X, test.labels) if len(test) else float("nan")
    nn.save_weights(model, args.out)
    if args.metrics:
        with open(args.metrics, "w") as fh:
            fh.write("epoch,loss,train_accuracy\n")
            for h in history:
                fh.write(f"{h.epoch},{h.loss:.6f},{h.accuracy:.6f}\n")
            fh.write(f"test,,{test_acc:.6f}\n")
    train_acc = history[-1].accuracy if history else nn.accuracy(model, train.X, train.labels)
    print(f"train_accuracy={train_acc:.4f} test_accuracy={test_acc:.4f} weights={args.out}")
    return 0


def cmd_split(args, run):
    model = nn.load_weights(args.model)
    cmap = codec.default_class_map(model.layers[-1].n_out, args.highway_length)
    enc, dec = codec.split_model(model, args.split_index, cmap)
    n_enc = nn.save_weights(enc.model, args.encoder_out)
    n_dec = nn.save_weights(dec.model, args.decoder_out)
    cmap_path = args.classmap_out or os.path.splitext(args.decoder_out)[0] + ".classmap"
    codec.write_class_map(cmap, cmap_path)
    print(f"encoder={args.encoder_out} ({n_enc} bytes) decoder={args.decoder_out} ({n_dec} bytes) "
          f"classmap={cmap_path}")
    return 0


def _encode_inputs(inputs, args, run):
    """Yield (name, pixels or None) for every input frame."""
    for item in inputs:
        if item == "synth" or os.path.isdir(item):
            data = get_dataset(item, args, run)
            for i in range(len(data)):
                yield f"{item}[{i}]", data.X[i]
        else:
            try:
                with open(item, "rb") as fh:
                    yield item, ds.preprocess_image(ds.read_pnm(fh.read()))
            except (OSError, FormatError, ValueError) as exc:
                log.warning("skipping %s: %s", item, exc)
                yield item, None


def cmd_encode(args, run):
    enc = codec.EncoderHalf(nn.load_weights(args.encoder))
    os.makedirs(args.out_dir, exist_ok=True)
    flags = codec.FLAG_DEFLATE if args.deflate else 0
    written = skipped = 0
    frame_id = 0
    for name, pixels in _encode_inputs(args.inputs, args, run):
        if pixels is None:
            skipped += 1
            continue
        data = codec.write_sff(codec.encode_features(enc, pixels, frame_id), flags)
        with open(os.path.join(args.out_dir, f"{frame_id}.sff"), "wb") as fh:
            fh.write(data)
        frame_id += 1
        written += 1
    if written == 0 and skipped == 0:
        raise UsageError("no input frames")
    print(f"encoded={written} skipped={skipped} out_dir={args.out_dir}")
    return 0 if skipped == 0 else EXIT_FORMAT


def cmd_serve(args, run):
    decoder = load_decoder(args.decoder, args.classmap)
    model = nn.load_weights(args.model)
    agent = dqn.load_agent(args.agent) if args.agent else None
    sim = highway_config(run)
    _log_resolved("serve", bind=args.bind, decoder=args.decoder, model=args.model,
                  agent=args.agent, classmap=args.classmap)
    wire.serve_decoder(parse_addr(args.bind), decoder, model, agent, sim)
    return 0


def cmd_bench(args, run):
    data = get_dataset(args.dataset, args, run)
    modes = ["raw", "semantic"] if args.mode == "both" else [args.mode]
    encoder = codec.EncoderHalf(nn.load_weights(args.encoder)) if args.encoder else None
    if "semantic" in modes and encoder is None:
        raise UsageError("semantic mode needs --encoder FILE")
    addr = parse_addr(args.connect)
    _log_resolved("bench", connect=args.connect, dataset=args.dataset, scenario=args.scenario,
                  mode=args.mode, pipeline=args.pipeline, timeout=wire.frame_timeout())
    reports = []
    for mode in modes:
        try:
            report = wire.run_bench(addr, data, args.scenario, mode, encoder=encoder, pipeline=args.pipeline)
        except ConnectionRefusedError as exc:
            raise RuntimeError(f"connection refused by {addr[0]}:{addr[1]}") from exc
        out = args.out
        if len(modes) > 1:
            stem, ext = os.path.splitext(args.out)
            out = f"{stem}_{mode}{ext or '.csv'}"
        wire.emit_report(report, out)
        reports.append(report)
        if report.partial:
            log.error("%s run incomplete: %s", mode, report.error)
    print(wire.comparison_table(reports))
    if args.plot_data:
        wire.write_plot_data(reports, args.plot_data)
    return EXIT_RUNTIME if any(r.partial for r in reports) else 0


def cmd_train_dqn(args, run):
    sim = highway_config(run, args.seed)
    cfg = agent_config(run, episodes=args.episodes)
    _log_resolved("train-dqn", sim=sim, agent=cfg, seed=args.seed)
    qnet, history = dqn.train_agent(cfg, sim, seed=args.seed)
    dqn.save_agent(qnet, args.agent_out)
    if args.history:
        history.write_csv(args.history)
    tail = history.episodes[-100:]
    mean_ret = float(np.mean([e.ret for e in tail])) if tail else float("nan")
    print(f"episodes={len(history.episodes)} updates={history.updates} "
          f"mean_return_last100={mean_ret:.4f} agent={args.agent_out}")
    return 0


def cmd_eval(args, run):
    sim = highway_config(run)
    if args.agent == "oracle":
        policy = traffic.OraclePolicy()
    elif args.agent == "random":
        policy = traffic.RandomPolicy(args.seed)
    else:
        policy = dqn.GreedyPolicy(dqn.load_agent(args.agent), sim)
    _log_resolved("eval", agent=args.agent, decisions=args.decisions, episodes=args.episodes, seed=args.seed)
    result = traffic.evaluate_policy(policy, sim, n_episodes=args.episodes, seed=args.seed,
                                     n_decisions=args.decisions if args.episodes is None else None)
    print(result.summary())
    return 0


def cmd_inspect(args, run):
    with open(args.file, "rb") as fh:
        data = fh.read()
    magic = data[:4]
    if magic == nn.SWF_MAGIC:
        model = nn.parse_weights(data)
        print(f"SWF1 alpha={model.alpha:.6g} seed={model.seed} layers={len(model.layers)} bytes={len(data)}")
        for i, layer in enumerate(model.layers):
            print(f"  layer {i}: {layer.activation.name} {layer.n_out}x{layer.n_in}")
    elif magic == codec.SFF_MAGIC:
        header = codec.sff_header(data)
        fv = codec.read_sff(data)
        print("SFF1 " + " ".join(f"{k}={v}" for k, v in header.items() if k != "magic")
              + f" bytes={len(data)}")
        print("  values=" + " ".join(f"{v:.6g}" for v in fv.values))
    else:
        raise FormatError(f"unrecognized magic {magic!r}", 0)
    return 0


def build_parser():
    p = _Parser(prog="semlink", description="Split-inference semantic traffic control pipeline.")
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("train-classifier", help="train the 1024->H->C sign classifier")
    s.add_argument("--dataset", required=True, help="directory with manifest.tsv, or 'synth'")
    s.add_argument("--manifest")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--hidden", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--test-fraction", type=float)
    s.add_argument("--resume", help="continue from an SWF1 file")
    s.add_argument("--reinit", action="store_true", help="ignore --resume and draw fresh weights")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("split", help="split a model into encoder/decoder SWF1 files")
    s.add_argument("--model", required=True)
    s.add_argument("--split-index", type=int, default=1)
    s.add_argument("--encoder-out", required=True)
    s.add_argument("--decoder-out", required=True)
    s.add_argument("--classmap-out")
    s.add_argument("--highway-length", type=int, default=100)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("encode", help="write one SFF1 file per input frame")
    s.add_argument("--encoder", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--deflate", action="store_true")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--manifest")
    s.add_argument("inputs", nargs="*", help="PGM/PPM files, dataset directories or 'synth'")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("serve", help="run the decoder-side SLP/1 server")
    s.add_argument("--bind", required=True)
    s.add_argument("--decoder", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--classmap")
    s.add_argument("--agent")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("bench", help="benchmark raw vs semantic transfer")
    s.add_argument("--connect", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--manifest")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--scenario", default="single", choices=["single", "30s", "60s"])
    s.add_argument("--mode", default="both", choices=["raw", "semantic", "both"])
    s.add_argument("--encoder")
    s.add_argument("--pipeline", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--plot-data")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("train-dqn", help="train the lane-decision Q-network")
    s.add_argument("--agent-out", required=True)
    s.add_argument("--episodes", type=int)
    s.add_argument("--history")
    s.set_defaults(func=cmd_train_dqn)

    s = sub.add_parser("eval", help="score a policy against the oracle")
    s.add_argument("--agent", required=True, help="SWF1 agent file, 'oracle' or 'random'")
    s.add_argument("--decisions", type=int, default=900)
    s.add_argument("--episodes", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", help="dump SWF1/SFF1 headers")
    s.add_argument("file")
    s.set_defaults(func=cmd_inspect)
    return p


def _hoist_globals(argv):
    """Allow --config/--seed/--verbose after the subcommand too."""
    head, rest, i = [], [], 0
    while i < len(argv):
        a = argv[i]
        if a == "--verbose":
            head.append(a)
        elif a in ("--config", "--seed") and i + 1 < len(argv):
            head += [a, argv[i + 1]]
            i += 1
        elif a.startswith(("--config=", "--seed=")):
            head.append(a)
        else:
            rest.append(a)
        i += 1
    return head + rest


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_hoist_globals(argv))
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        if not getattr(args, "func", None):
            raise UsageError(parser.format_usage())
        run = load_run_config(args.config)
        return args.func(args, run)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ContractError, ShapeError, MappingError) as exc:
        print(f"semlink: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (OSError, RuntimeError, ProtocolError, ValueError, KeyError) as exc:
        print(f"semlink: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
