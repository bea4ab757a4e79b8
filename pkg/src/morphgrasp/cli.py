"""``morphgrasp`` command-line front end.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

import argparse
import json
import sys
from pathlib import Path

from . import serialization
from .bundle import HandBundle, compile_file
from .errors import MorphGraspError
from .kinematics import Primitive
from .magcn import PolicyNetwork

SYNOPSIS = """usage: morphgrasp <command> [options]

commands:
  compile <urdf> -o <bundle>                     build a hand bundle from a URDF
  identify <urdf> -o <primmap>                   write the joint -> node-primitive mapping
  inspect <bundle>                               print counts, mask and mapping tables
  train --hands a,b --objects sphere,box -o W    joint PPO training
  eval --weights W --hand h [--link-scale s] [--trials n]
  rollout --weights W --hand h --record out      write episode/1 logs
  gradcheck                                      finite-difference check of all gradients

every command accepts --seed
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser():
    p = _Parser(prog="morphgrasp", add_help=True, usage=SYNOPSIS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--seed", type=int, default=0)
        return s

    c = cmd("compile", "build a hand bundle")
    c.add_argument("urdf")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--hand-id")

    m = cmd("identify", "primitive mapping of a URDF")
    m.add_argument("urdf")
    m.add_argument("-o", "--output", required=True)

    i = cmd("inspect", "summarize a bundle")
    i.add_argument("bundle")

    t = cmd("train", "PPO training")
    t.add_argument("--hands", required=True, help="comma-separated bundle paths")
    t.add_argument("--objects", default="sphere")
    t.add_argument("--iterations", type=int, default=100)
    t.add_argument("-o", "--output", required=True)
    t.add_argument("--metrics", help="write one JSON record per iteration")

    e = cmd("eval", "success rate of trained weights")
    e.add_argument("--weights", required=True)
    e.add_argument("--hand", required=True)
    e.add_argument("--objects", default="sphere")
    e.add_argument("--link-scale", type=float, default=1.0)
    e.add_argument("--trials", type=int, default=25)

    r = cmd("rollout", "record episodes")
    r.add_argument("--weights", required=True)
    r.add_argument("--hand", required=True)
    r.add_argument("--objects", default="sphere")
    r.add_argument("--episodes", type=int, default=1)
    r.add_argument("--record", required=True)

    g = cmd("gradcheck", "autodiff verification suite")
    g.add_argument("--instances", type=int, default=20)
    return p


def _split(text):
    return [x for x in (s.strip() for s in text.split(",")) if x]


def _compile(args, out):
    bundle = compile_file(args.urdf, hand_id=args.hand_id)
    bundle.save(args.output)
    print(f"{bundle.hand_id}: N_h={bundle.n_nodes} L_h={bundle.n_dof} -> {args.output}", file=out)


def _print_mapping(b, out):
    print("mapping (joint -> node primitive sign)", file=out)
    for e in b.mapping.entries:
        print(f"  {b.tree.joints[e.joint].name:24s} {e.node:2d} {Primitive(e.primitive).name:4s} {e.sign:+d}", file=out)


def _identify(args, out):
    b = compile_file(args.urdf)
    Path(args.output).write_text(serialization.dumps(b.mapping.to_dict(b.tree)))
    _print_mapping(b, out)


def _inspect(args, out):
    b = HandBundle.load(args.bundle)
    print(f"hand {b.hand_id}", file=out)
    print(f"N_h {b.n_nodes}", file=out)
    print(f"L_h {b.n_dof}", file=out)
    print("mask (node finger type: FLEX ABD ROT)", file=out)
    for n in b.graph.nodes:
        row = " ".join(str(int(v)) for v in b.mask[n.id])
        print(f"  {n.id:2d} {n.finger:7s} {n.type:10s} {row}", file=out)
    _print_mapping(b, out)


def _train(args, out):
    from .trainer import train
    hands = [HandBundle.load(p) for p in _split(args.hands)]
    res = train(hands, _split(args.objects), iterations=args.iterations, seed=args.seed,
                metrics_path=args.metrics)
    res.net.save(args.output)
    last = res.metrics[-1] if res.metrics else {}
    print(f"trained {args.iterations} iterations, final reward {last.get('reward', float('nan')):.3f}"
          f" -> {args.output}", file=out)


def _eval(args, out):
    from .trainer import evaluate
    net = PolicyNetwork.load(args.weights)
    bundle = HandBundle.load(args.hand)
    res = evaluate(net, bundle, _split(args.objects), trials=args.trials, link_scale=args.link_scale,
                   seed=args.seed, record_actions=False)
    print(json.dumps({"hand_id": bundle.hand_id, "success_rate": res.success_rate,
                      "per_object": res.per_object, "link_scale": args.link_scale,
                      "dq_in_limits": res.dq_in_limits}), file=out)


def _rollout(args, out):
    from .env import episode_records
    from .trainer import run_episodes
    net = PolicyNetwork.load(args.weights)
    bundle = HandBundle.load(args.hand)
    objects = _split(args.objects)
    objs = [objects[k % len(objects)] for k in range(args.episodes)]
    seeds = [args.seed * 1000003 + k for k in range(args.episodes)]
    scenes, _ = run_episodes(net, [bundle] * args.episodes, objs, seeds, deterministic=True)
    lines = []
    for k, sc in enumerate(scenes):
        lines += episode_records(sc, header={"episode": k, "seed": seeds[k]})
    Path(args.record).write_text("\n".join(lines) + "\n")
    print(f"recorded {args.episodes} episode(s) -> {args.record}", file=out)


def _gradcheck(args, out):
    from .gradcheck import run_suite
    results = run_suite(instances=args.instances, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:18s} worst rel err {r.worst:.2e}", file=out)
    if not all(r.passed for r in results):
        raise MorphGraspError("gradient check failed")


COMMANDS = {"compile": _compile, "identify": _identify, "inspect": _inspect, "train": _train, "eval": _eval,
            "rollout": _rollout, "gradcheck": _gradcheck}


def run(argv, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = _parser().parse_args(argv)
        if args.command is None:
            raise UsageError("no command given")
    except UsageError as exc:
        print(f"{exc}\n\n{SYNOPSIS}", file=err, end="")
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args, out)
    except (MorphGraspError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=err)
        return 1
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
