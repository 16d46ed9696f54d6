"""End-to-end run orchestration: world generation, the three pretrains,
alignment, user embedding, and a hashed manifest tying the artifacts together.

A run directory is self-contained: world files, checkpoints, traces, the
embeddings file with its id map, split assignments, and manifest.json. All
artifact bytes are deterministic for a fixed (config, seed); wall-clock
timings go to run_stats.json, which is deliberately outside the manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fusion, seqenc, tabenc, textenc
from .errors import ConfigError
from .nn import load_checkpoint, save_checkpoint
from .synthworld import World, WorldConfig, generate_world, split_dataset


@dataclass
class PipelineConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    seq: seqenc.SeqConfig = field(default_factory=seqenc.SeqConfig)
    tab: tabenc.TabConfig = field(default_factory=tabenc.TabConfig)
    text: textenc.TextConfig = field(default_factory=textenc.TextConfig)
    align: fusion.FusionConfig = field(default_factory=fusion.FusionConfig)
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def to_json(self) -> dict:
        return {"world": self.world.to_json(), "seq": self.seq.to_json(),
                "tab": self.tab.to_json(), "text": self.text.to_json(),
                "align": self.align.to_json(), "split": list(self.split)}

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        cfg = cls()
        if "world" in d:
            cfg.world = WorldConfig.from_json(d["world"])
        if "seq" in d:
            cfg.seq = seqenc.SeqConfig.from_json(d["seq"])
        if "tab" in d:
            cfg.tab = tabenc.TabConfig.from_json(d["tab"])
        if "text" in d:
            cfg.text = textenc.TextConfig.from_json(d["text"])
        if "align" in d:
            cfg.align = fusion.FusionConfig.from_json(d["align"])
        if "split" in d:
            cfg.split = tuple(d["split"])
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def demo_config(users: int = 400) -> PipelineConfig:
    """Small-but-functional settings for quick runs and the demo service."""
    cfg = PipelineConfig()
    cfg.world.users = users
    cfg.seq.steps = 200
    cfg.seq.lr0 = 2e-3
    cfg.tab.steps = 200
    cfg.tab.lr0 = 2e-3
    cfg.text.steps = 120
    cfg.text.batch_size = 32
    cfg.text.lr0 = 2e-3
    cfg.align.steps = 250
    cfg.align.lr0 = 2e-3
    cfg.align.eval_interval = 125
    return cfg


def write_trace_csv(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def split_world(world: World, ratios, seed: int):
    return split_dataset(world.users, ratios, seed=seed, strict=False)


def run_pipeline(config: PipelineConfig, seed: int, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    def timed(name, fn):
        t0 = time.perf_counter()
        result = fn()
        timings[name] = round(time.perf_counter() - t0, 3)
        return result

    (out / "pipeline_config.json").write_text(json.dumps(config.to_json(), indent=2))

    world = timed("generate_world", lambda: generate_world(config.world, seed))
    world.save(out)

    train, calibration, test = split_world(world, config.split, seed)
    (out / "splits.json").write_text(json.dumps({
        "train": [u.user_id for u in train],
        "calibration": [u.user_id for u in calibration],
        "test": [u.user_id for u in test],
    }))

    seq_params, seq_trace = timed(
        "pretrain_seq", lambda: seqenc.pretrain_sequence(train, config.seq, seed))
    save_checkpoint(out / "checkpoints" / "seq.ckpt",
                    *seqenc.seq_checkpoint_payload(seq_params, config.seq))
    write_trace_csv(out / "traces" / "seq.csv", seq_trace)

    train_rows = [u.tabular for u in train]
    schema = tabenc.fit_schema(world.config.categorical, world.config.continuous,
                               train_rows)
    tab_params, tab_trace = timed(
        "pretrain_tab", lambda: tabenc.pretrain_tabular(train_rows, schema, config.tab, seed))
    save_checkpoint(out / "checkpoints" / "tab.ckpt",
                    *tabenc.tab_checkpoint_payload(tab_params, schema, config.tab))
    write_trace_csv(out / "traces" / "tab.csv", tab_trace)

    corpus = [u.search_text for u in train if u.search_text] + \
             [u.description for u in train]
    text_params, text_trace = timed(
        "pretrain_text", lambda: textenc.pretrain_text(corpus, config.text, seed))
    save_checkpoint(out / "checkpoints" / "text.ckpt",
                    *textenc.text_checkpoint_payload(text_params, config.text))
    write_trace_csv(out / "traces" / "text.csv", text_trace)

    model = assemble_model(world, seq_params, config.seq, tab_params, schema, config.tab,
                           text_params, config.text, config.align)
    model, align_trace, probes = timed(
        "align", lambda: fusion.train_alignment(train, calibration, model, config.align, seed))
    model.save(out / "checkpoints" / "aligned.ckpt")
    write_trace_csv(out / "traces" / "align.csv", align_trace)
    write_trace_csv(out / "traces" / "align_probe.csv", probes)

    matrix, id_map = timed("embed", lambda: fusion.embed_all_users(world.users, model))
    fusion.save_embeddings(out / "embeddings.bin", matrix)
    (out / "embeddings.bin.idmap.json").write_text(json.dumps(id_map))

    artifacts = {}
    for rel in ("world_config.json", "users.jsonl", "demands.jsonl", "splits.json",
                "checkpoints/seq.ckpt", "checkpoints/tab.ckpt", "checkpoints/text.ckpt",
                "checkpoints/aligned.ckpt", "embeddings.bin",
                "embeddings.bin.idmap.json"):
        p = out / rel
        artifacts[rel] = {"sha256": sha256_file(p), "bytes": p.stat().st_size}
    manifest = {
        "format": 1,
        "seed": seed,
        "users": len(world.users),
        "dim": config.align.dim,
        "scenarios": [s.scenario_id for s in world.config.scenarios],
        "artifacts": artifacts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "run_stats.json").write_text(json.dumps({"timings_sec": timings}, indent=2))
    return {"out": str(out), "timings": timings, "manifest": manifest,
            "align_probes": probes}


def assemble_model(world: World, seq_params, seq_config, tab_params, schema, tab_config,
                   text_params, text_config, align_config) -> fusion.AlignedModel:
    """Bundle pretrained encoders; the description tower warm-starts from the
    search-text tower (same architecture, separate parameters from here on)."""
    dims = {seq_config.dim, tab_config.dim, text_config.dim, align_config.dim}
    if len(dims) != 1:
        raise ConfigError(f"stage dimensions disagree: {sorted(dims)}")
    rng = np.random.default_rng(0)
    desc_params = textenc.init_text_params(text_config, rng)
    from .nn import assign_tensors, collect_tensors
    assign_tensors(desc_params, {k: v.data.copy()
                                 for k, v in collect_tensors(text_params).items()})
    return fusion.AlignedModel(
        seq_params=seq_params, seq_config=seq_config,
        tab_params=tab_params, tab_schema=schema, tab_config=tab_config,
        text_params=text_params, text_config=text_config,
        desc_params=desc_params, desc_config=text_config,
        fusion_params=fusion.init_fusion_params(align_config, np.random.default_rng(1)),
        fusion_config=align_config,
        context_windows=world.config.context_windows,
    )


def load_stage_checkpoints(seq_path, tab_path, text_path):
    seq_hyper, seq_arrays = load_checkpoint(seq_path)
    seq_params, seq_config = seqenc.seq_params_from_checkpoint(seq_hyper, seq_arrays)
    tab_hyper, tab_arrays = load_checkpoint(tab_path)
    tab_params, schema, tab_config = tabenc.tab_params_from_checkpoint(tab_hyper, tab_arrays)
    text_hyper, text_arrays = load_checkpoint(text_path)
    text_params, text_config = textenc.text_params_from_checkpoint(text_hyper, text_arrays)
    return (seq_params, seq_config), (tab_params, schema, tab_config), \
        (text_params, text_config)
