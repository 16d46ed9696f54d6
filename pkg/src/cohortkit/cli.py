"""Command-line entry points.

`cohortkit <command>` multiplexes everything; the stage commands are also
installed as standalone scripts (pretrain-seq, align, target, ...).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fusion, pipeline, seqenc, tabenc, targeting, textenc
from .errors import CohortkitError, InputError
from .evalharness import accuracy_precision_recall, ks_stat, linear_probe, roc_auc
from .nn import save_checkpoint
from .synthworld import World, WorldConfig, generate_world


def _load_world(path) -> World:
    return World.load(path)


def _stage_config(cls, path, section):
    if path is None:
        return cls()
    data = json.loads(Path(path).read_text())
    if section in data:                       # combined pipeline config
        data = data[section]
    return cls.from_json(data)


def _train_split(world: World, seed: int, ratios=(0.6, 0.2, 0.2)):
    return pipeline.split_world(world, ratios, seed)[0]


def cmd_gen_world(args):
    config = WorldConfig.from_json(json.loads(Path(args.config).read_text())) \
        if args.config else WorldConfig()
    world = generate_world(config, args.seed)
    world.save(args.out)
    rates = {s.scenario_id: float(world.labels_for(s.scenario_id).mean())
             for s in world.config.scenarios}
    print(json.dumps({"out": args.out, "users": len(world.users),
                      "realized_rates": rates}))


def cmd_pretrain_seq(args):
    world = _load_world(args.world)
    config = _stage_config(seqenc.SeqConfig, args.config, "seq")
    train = _train_split(world, args.seed)
    params, trace = seqenc.pretrain_sequence(train, config, args.seed)
    save_checkpoint(args.out, *seqenc.seq_checkpoint_payload(params, config))
    if args.trace:
        pipeline.write_trace_csv(args.trace, trace)
    print(json.dumps({"out": args.out, "steps": len(trace),
                      "final_cpc": trace[-1]["cpc"] if trace else None}))


def cmd_pretrain_tab(args):
    world = _load_world(args.world)
    config = _stage_config(tabenc.TabConfig, args.config, "tab")
    train = _train_split(world, args.seed)
    schema = tabenc.fit_schema(world.config.categorical, world.config.continuous,
                               [u.tabular for u in train])
    params, trace = tabenc.pretrain_tabular([u.tabular for u in train], schema, config,
                                            args.seed)
    save_checkpoint(args.out, *tabenc.tab_checkpoint_payload(params, schema, config))
    if args.trace:
        pipeline.write_trace_csv(args.trace, trace)
    print(json.dumps({"out": args.out, "steps": len(trace)}))


def cmd_pretrain_text(args):
    world = _load_world(args.world)
    config = _stage_config(textenc.TextConfig, args.config, "text")
    train = _train_split(world, args.seed)
    corpus = [u.search_text for u in train if u.search_text] + \
             [u.description for u in train]
    params, trace = textenc.pretrain_text(corpus, config, args.seed)
    save_checkpoint(args.out, *textenc.text_checkpoint_payload(params, config))
    if args.trace:
        pipeline.write_trace_csv(args.trace, trace)
    print(json.dumps({"out": args.out, "steps": len(trace)}))


def cmd_align(args):
    world = _load_world(args.world)
    config = _stage_config(fusion.FusionConfig, args.config, "align")
    (seq_params, seq_config), (tab_params, schema, tab_config), \
        (text_params, text_config) = pipeline.load_stage_checkpoints(
            args.seq, args.tab, args.text)
    model = pipeline.assemble_model(world, seq_params, seq_config, tab_params, schema,
                                    tab_config, text_params, text_config, config)
    train, calibration, _ = pipeline.split_world(world, (0.6, 0.2, 0.2), args.seed)
    model, trace, probes = fusion.train_alignment(train, calibration, model, config,
                                                  args.seed)
    model.save(args.out)
    if args.trace:
        pipeline.write_trace_csv(args.trace, trace)
    print(json.dumps({"out": args.out, "steps": len(trace),
                      "final_probe": probes[-1] if probes else None}))


def cmd_embed(args):
    world = _load_world(args.world)
    model = fusion.AlignedModel.load(args.ckpt)
    matrix, id_map = fusion.embed_all_users(world.users, model)
    fusion.save_embeddings(args.out, matrix)
    Path(str(args.out) + ".idmap.json").write_text(json.dumps(id_map))
    print(json.dumps({"out": args.out, "users": matrix.shape[0], "dim": matrix.shape[1]}))


def cmd_pipeline(args):
    config = pipeline.PipelineConfig.load(args.config) if args.config \
        else pipeline.demo_config()
    result = pipeline.run_pipeline(config, args.seed, args.out)
    print(json.dumps({"out": result["out"], "timings": result["timings"]}))


def _load_index(index_path):
    matrix = fusion.load_embeddings(index_path)
    id_map = json.loads(Path(str(index_path) + ".idmap.json").read_text())
    return targeting.UserIndex(matrix, id_map["user_ids"])


def cmd_target(args):
    index = _load_index(args.index)
    model = fusion.AlignedModel.load(args.ckpt)
    if args.threshold is not None:
        cohort = targeting.zero_shot_target(args.demand, index, model,
                                            mode="threshold", tau=args.threshold)
    else:
        cohort = targeting.zero_shot_target(args.demand, index, model,
                                            mode="top_k", k=args.top_k)
    payload = cohort.to_json()
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    print(json.dumps({"canonical_demand": payload["canonical_demand"],
                      "flags": payload["flags"], "size": len(payload["cohort"]),
                      "head": payload["cohort"][:5]}))


def cmd_tune(args):
    index = _load_index(args.index)
    model = fusion.AlignedModel.load(args.ckpt)
    session_path = Path(args.session)
    if session_path.exists():
        data = json.loads(session_path.read_text())
        session = targeting.init_prompt(data["demand"], model, p=data["prompt_shape"][0],
                                        alpha=data["alpha"], seed=0,
                                        session_id=data["session_id"])
        prompt_file = session_path.with_suffix(".prompt.f32")
        if prompt_file.exists():
            raw = np.frombuffer(prompt_file.read_bytes(), dtype="<f4")
            session.prompt.data = raw.reshape(session.prompt.shape).copy()
    else:
        if not args.demand:
            raise InputError("--demand is required when the session file does not exist")
        session = targeting.init_prompt(args.demand, model, p=args.prompt_len,
                                        session_id=session_path.stem)
    session.positives = [int(x) for x in args.pos.split(",") if x]
    session.negatives = [int(x) for x in args.neg.split(",") if x]
    targeting.prompt_tune(session, index, model, steps=args.steps, lr=args.lr)
    session_path.write_text(json.dumps(session.to_json(), indent=2))
    session_path.with_suffix(".prompt.f32").write_bytes(
        session.prompt.data.astype("<f4").tobytes())
    cohort = targeting.few_shot_target(session, index, model, mode="top_k", k=args.top_k)
    if args.out:
        Path(args.out).write_text(json.dumps(cohort.to_json(), indent=2))
    print(json.dumps({"session": str(session_path), "tuned": session.tuned,
                      "final_loss": session.trace[-1]["loss"] if session.trace else None,
                      "head": cohort.to_json()["cohort"][:5]}))


def cmd_labels(args):
    world = _load_world(args.world)
    demand = world.demand(args.scenario)
    payload = {"scenario": demand.scenario_id,
               "user_ids": [u.user_id for u in world.users],
               "labels": [int(u.labels[demand.scenario_id]) for u in world.users]}
    Path(args.out).write_text(json.dumps(payload))
    print(json.dumps({"scenario": demand.scenario_id,
                      "positives": int(sum(payload["labels"]))}))


def cmd_probe(args):
    matrix = fusion.load_embeddings(args.embeddings)
    id_map = json.loads(Path(str(args.embeddings) + ".idmap.json").read_text())
    data = json.loads(Path(args.labels).read_text())
    label_by_id = dict(zip(data["user_ids"], data["labels"]))
    labels = np.array([label_by_id[u] for u in id_map["user_ids"]])
    auc, ks = linear_probe(matrix, labels, seed=args.seed)
    print(json.dumps({"scenario": data.get("scenario"), "auc": auc, "ks": ks}))


def cmd_evaluate(args):
    cohort = json.loads(Path(args.cohort).read_text())
    data = json.loads(Path(args.labels).read_text())
    members = {entry["user_id"] for entry in cohort["cohort"]}
    pred = np.array([1 if u in members else 0 for u in data["user_ids"]])
    labels = np.array(data["labels"])
    result = accuracy_precision_recall(pred, labels)
    threshold = cohort.get("mode", {}).get("tau")
    if threshold is None and cohort["cohort"]:
        threshold = cohort["cohort"][-1]["score"]
    print(json.dumps({"accuracy": result.accuracy, "precision": result.precision,
                      "recall": result.recall, "threshold": threshold,
                      "flags": result.flags}))


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    host, _, port = args.bind.rpartition(":")
    app = create_app(args.run, expose_oracle=args.expose_oracle)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cohortkit",
                                     description="user-targeting pipeline over a synthetic world")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a synthetic user world")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_world)

    for name, fn in (("pretrain-seq", cmd_pretrain_seq), ("pretrain-tab", cmd_pretrain_tab),
                     ("pretrain-text", cmd_pretrain_text)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on a world directory")
        p.add_argument("--world", required=True)
        p.add_argument("--config")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--trace")
        p.set_defaults(fn=fn)

    p = sub.add_parser("align", help="stage-two user-text alignment")
    p.add_argument("--world", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--tab", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("embed", help="export fused user embeddings")
    p.add_argument("--world", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("pipeline", help="run the full pipeline into a run directory")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("target", help="zero-shot cohort from a demand sentence")
    p.add_argument("--index", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--demand", required=True)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_target)

    p = sub.add_parser("tune", help="few-shot prompt tuning over seed users")
    p.add_argument("--session", required=True)
    p.add_argument("--pos", required=True)
    p.add_argument("--neg", required=True)
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--index", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--demand")
    p.add_argument("--prompt-len", type=int, default=4)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("labels", help="dump oracle labels for one scenario")
    p.add_argument("--world", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_labels)

    p = sub.add_parser("probe", help="linear probe AUC/KS on an embeddings file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("evaluate", help="accuracy/precision/recall of a cohort file")
    p.add_argument("--cohort", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("serve", help="serve a run directory over HTTP")
    p.add_argument("--run", required=True)
    p.add_argument("--bind", default="127.0.0.1:8787")
    p.add_argument("--expose-oracle", action="store_true")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except CohortkitError as exc:
        print(json.dumps({"error": {"code": type(exc).__name__, "message": str(exc)}}),
              file=sys.stderr)
        return 2
    return 0


def _delegate(command):
    def runner(argv=None):
        return main([command] + list(sys.argv[1:] if argv is None else argv))
    return runner


main_gen_world = _delegate("gen-world")
main_pretrain_seq = _delegate("pretrain-seq")
main_pretrain_tab = _delegate("pretrain-tab")
main_pretrain_text = _delegate("pretrain-text")
main_align = _delegate("align")
main_target = _delegate("target")
main_tune = _delegate("tune")
main_probe = _delegate("probe")
main_evaluate = _delegate("evaluate")
main_serve = _delegate("serve")

if __name__ == "__main__":
    sys.exit(main())
