"""Experiment runner.

    melworld <subcommand> [--config FILE] [--set section.key=value ...]
                          [--outdir DIR | --runs-root DIR] [...]

Subcommands: gen-data, train, train-clf, sample, eval, sweep, verify.
Artifacts land in a run directory named by the resolved-config hash plus a
timestamp (or exactly ``--outdir``); the resolved configuration is echoed to
``config.resolved`` so any run can be reproduced byte-for-byte. Exit codes:
0 success, 1 failed verification, 2 bad usage or configuration, 3 missing
checkpoint or world file.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfg
from . import metrics as mx
from .config import ConfigError, config_hash, mix_seed
from .diffusion import NoiseSchedule, sample_cfg, sample_cg, sample_reverse
from .training import (
    Checkpoint,
    ModelConfig,
    TrainConfig,
    TrainingError,
    train_model,
    train_noisy_classifier,
)
from .world import (
    World,
    WorldConfig,
    WorldError,
    dump_world,
    load_world,
    make_world,
    sample_utterance,
    split_speakers,
    world_hash,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3


def _load_config(args) -> dict:
    partial = None
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        partial = cfg.parse_text(path.read_text(encoding="utf-8"))
    return cfg.resolve(partial, args.set or [])


def _run_dir(config: dict, args) -> Path:
    if args.outdir:
        run_dir = Path(args.outdir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(args.runs_root) / f"{config_hash(config)}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(cfg.render(config), encoding="utf-8")
    return run_dir


def _build_world(config: dict, args) -> World:
    if getattr(args, "world", None):
        path = Path(args.world)
        if not path.exists():
            print(f"error: world file not found: {path}", file=sys.stderr)
            raise SystemExit(EXIT_MISSING)
        return load_world(path.read_text(encoding="utf-8"))
    w = config["world"]
    return make_world(
        WorldConfig(frame_dim=w["frame_dim"], vocab=w["vocab"], n_speakers=w["speakers"],
                    n_emotions=w["emotions"], tau=w["tau"], max_len=w["max_len"]),
        seed=mix_seed(config["run"]["seed"], w["seed"]),
    )


def _load_checkpoint(args) -> Checkpoint:
    path = Path(args.checkpoint) if args.checkpoint else None
    if path is None or not path.exists():
        print(f"error: checkpoint not found: {path}", file=sys.stderr)
        raise SystemExit(EXIT_MISSING)
    return Checkpoint.from_bytes(path.read_bytes())


def _model_config(config: dict) -> ModelConfig:
    m = config["model"]
    return ModelConfig(
        style_dim=m["style_dim"], emotion_dim=m["emotion_dim"], token_dim=m["token_dim"],
        hidden=m["hidden"], n_hidden=m["n_hidden"], clf_hidden=m["clf_hidden"],
        beta0=m["beta0"], beta1=m["beta1"], t_final=m["t_final"], t_min=m["t_min"],
        seed=mix_seed(config["run"]["seed"], m["seed"]),
    )


def _train_config(config: dict) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        alpha=t["alpha"], p_null=t["p_null"], lr=t["lr"], steps=t["steps"],
        batch_size=t["batch_size"], w_recon=t["w_recon"], w_dsm=t["w_dsm"],
        w_dat=t["w_dat"], clip_norm=t["clip_norm"], utt_len=t["utt_len"],
        dat_probe_steps=t["dat_probe_steps"], dat_probe_lr=t["dat_probe_lr"],
        dat_probe_reinit=t["dat_probe_reinit"],
        clf_steps=t["clf_steps"], clf_lr=t["clf_lr"], clf_batch=t["clf_batch"],
        seed=mix_seed(config["run"]["seed"], t["seed"]),
    )


def _split(world: World, config: dict):
    return split_speakers(world, config["world"]["n_seen"],
                          mix_seed(config["run"]["seed"], config["world"]["split_seed"]))


def _write_jsonl(path: Path, records) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    run_dir = _run_dir(config, args)
    world = _build_world(config, args)
    out = run_dir / "world.txt"
    out.write_text(dump_world(world), encoding="utf-8")
    print(f"world {world_hash(world)} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    run_dir = _run_dir(config, args)
    world = _build_world(config, args)
    split = _split(world, config)
    trace: list = []
    ckpt = train_model(world, split, _train_config(config), _model_config(config),
                       trace=trace)
    (run_dir / "checkpoint.bin").write_bytes(ckpt.to_bytes())
    _write_jsonl(run_dir / "losses.jsonl", trace)
    vectors, labels = mx.collect_style_vectors(
        world, ckpt.model, split.seen, config["eval"]["per_emotion"],
        config["train"]["utt_len"], mix_seed(config["run"]["seed"], config["eval"]["seed"]))
    (run_dir / "styles.tsv").write_text(mx.styles_tsv(vectors, labels), encoding="utf-8")
    (run_dir / "world.txt").write_text(dump_world(world), encoding="utf-8")
    print(f"checkpoint {mx.checkpoint_hash(ckpt)} (step {ckpt.step}) -> {run_dir}")
    return EXIT_OK


def cmd_train_clf(args) -> int:
    config = _load_config(args)
    run_dir = _run_dir(config, args)
    ckpt = _load_checkpoint(args)
    world = _build_world(config, args)
    if world_hash(world) != ckpt.world_hash:
        print(f"error: checkpoint was trained on world {ckpt.world_hash}, "
              f"got {world_hash(world)}", file=sys.stderr)
        return EXIT_USAGE
    split = _split(world, config)
    trace: list = []
    train_noisy_classifier(world, split, ckpt.model, _train_config(config), trace=trace)
    (run_dir / "checkpoint.bin").write_bytes(ckpt.to_bytes())
    _write_jsonl(run_dir / "losses.jsonl", trace)
    print(f"noisy classifier trained -> {run_dir / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    config = _load_config(args)
    run_dir = _run_dir(config, args)
    ckpt = _load_checkpoint(args)
    world = _build_world(config, args)
    if world_hash(world) != ckpt.world_hash:
        print(f"error: checkpoint was trained on world {ckpt.world_hash}, "
              f"got {world_hash(world)}", file=sys.stderr)
        return EXIT_USAGE
    s = config["sample"]
    seed = mix_seed(config["run"]["seed"], s["seed"])
    rng = np.random.default_rng([seed, 0x5A11])
    tokens = np.asarray(s["tokens"], dtype=np.int64)
    if tokens.size == 0:
        tokens = rng.integers(0, world.vocab, size=config["eval"]["script_len"])
    model = ckpt.model
    records = []
    p_null_never_trained = ckpt.train_config.p_null == 0.0 and s["mode"] in ("cfg", "cg")
    for i in range(s["n"]):
        ref = sample_utterance(world, s["speaker"], 0,
                               rng.integers(0, world.vocab, size=tokens.size),
                               rng)
        style = model.encoder.encode(ref.frames)
        trajectory: list | None = [] if s["trajectory"] else None
        if s["mode"] == "none":
            e = model.table.embed(s["emotion"])
            mu = model.generator.generate(tokens, style, e)
            from .diffusion import sample_reverse
            frames = sample_reverse(model.scorenet, mu, style, e, model.schedule,
                                    s["steps"], rng.integers(0, 2 ** 63 - 1),
                                    stochastic=s["stochastic"], trajectory=trajectory)
        elif s["mode"] == "cfg":
            from .diffusion import sample_cfg
            frames = sample_cfg(model.scorenet, model.generator, model.table, tokens,
                                style, s["emotion"], model.schedule, s["steps"],
                                s["gamma"], rng.integers(0, 2 ** 63 - 1),
                                stochastic=s["stochastic"])
        elif s["mode"] == "cg":
            from .diffusion import sample_cg
            frames = sample_cg(model.scorenet, model.noisy_clf, model.generator,
                               model.table, tokens, style, s["emotion"],
                               model.schedule, s["steps"], s["gamma"],
                               rng.integers(0, 2 ** 63 - 1), stochastic=s["stochastic"])
        else:
            print(f"error: unknown sample mode '{s['mode']}'", file=sys.stderr)
            return EXIT_USAGE
        record = {
            "index": i,
            "speaker": s["speaker"],
            "emotion": s["emotion"],
            "mode": s["mode"],
            "gamma": s["gamma"],
            "tokens": [int(t) for t in tokens],
            "frames": [[float(v) for v in row] for row in frames],
        }
        if p_null_never_trained:
            record["warning"] = "null embedding was never trained (p_null was 0)"
        records.append(record)
        if trajectory is not None:
            _write_jsonl(run_dir / f"trajectory_{i}.jsonl", trajectory)
    _write_jsonl(run_dir / "samples.jsonl", records)
    print(f"{s['n']} samples -> {run_dir / 'samples.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    run_dir = _run_dir(config, args)
    ckpt = _load_checkpoint(args)
    world = _build_world(config, args)
    if world_hash(world) != ckpt.world_hash:
        print(f"error: checkpoint was trained on world {ckpt.world_hash}, "
              f"got {world_hash(world)}", file=sys.stderr)
        return EXIT_USAGE
    split = _split(world, config)
    e = config["eval"]
    seed = mix_seed(config["run"]["seed"], e["seed"])
    speakers = split.seen if e["group"] == "seen" else split.unseen
    gamma = config["sample"]["gamma"]
    row = mx.evaluate_cell(ckpt.model, world, speakers, e["mode"], gamma,
                           e["n_samples"], seed, e["steps"], e["n_scripts"],
                           e["script_len"], e["stochastic"])
    fingerprint = {
        "world_hash": ckpt.world_hash,
        "checkpoint_hash": mx.checkpoint_hash(ckpt),
        "gamma": gamma,
        "mode": e["mode"],
        "group": e["group"],
        "seed": seed,
    }
    reports = [
        mx.EvalReport("eca", row.eca, row.n, fingerprint),
        mx.EvalReport("content_error", row.content_error, row.n, fingerprint),
        mx.EvalReport("secs_mean_frame", row.secs_mean_frame, row.n, fingerprint),
        mx.EvalReport("secs_style", row.secs_style, row.n, fingerprint),
    ]
    result = mx.SweepResult(rows=[row], fingerprint=fingerprint)
    (run_dir / "metrics.csv").write_text(result.to_csv(), encoding="utf-8")
    with (run_dir / "report.jsonl").open("w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(report.to_json() + "\n")
    for report in reports:
        print(f"{report.metric}: {report.value:.4f} (n={report.n})")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_config(args)
    run_dir = _run_dir(config, args)
    ckpt = _load_checkpoint(args)
    world = _build_world(config, args)
    if world_hash(world) != ckpt.world_hash:
        print(f"error: checkpoint was trained on world {ckpt.world_hash}, "
              f"got {world_hash(world)}", file=sys.stderr)
        return EXIT_USAGE
    split = _split(world, config)
    e = config["eval"]
    seed = mix_seed(config["run"]["seed"], e["seed"])
    speakers = split.seen if e["group"] == "seen" else split.unseen
    result = mx.guidance_sweep(ckpt, world, speakers, list(e["gammas"]), e["mode"],
                               e["n_samples"], seed, e["steps"], e["n_scripts"],
                               e["script_len"], e["stochastic"])
    (run_dir / "metrics.csv").write_text(result.to_csv(), encoding="utf-8")
    print(result.to_csv(), end="")
    print(f"-> {run_dir / 'metrics.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    config = _load_config(args)
    world = _build_world(config, args)
    m = config["model"]
    schedule = NoiseSchedule(m["beta0"], m["beta1"], m["t_final"], m["t_min"])
    results = run_all(world, schedule)
    for result in results:
        print(result.line())
    if all(r.passed for r in results):
        print("all oracle checks passed")
        return EXIT_OK
    print("oracle checks FAILED", file=sys.stderr)
    return EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="melworld", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": (cmd_gen_data, "generate and serialize a world"),
        "train": (cmd_train, "train the full model"),
        "train-clf": (cmd_train_clf, "train the noisy emotion classifier"),
        "sample": (cmd_sample, "generate samples from a checkpoint"),
        "eval": (cmd_eval, "compute metrics for one configuration cell"),
        "sweep": (cmd_sweep, "metrics across a guidance-scale grid"),
        "verify": (cmd_verify, "run the oracle self-tests"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="configuration file (key = value sections)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a configuration value")
        p.add_argument("--outdir", help="exact output directory")
        p.add_argument("--runs-root", default="runs",
                       help="parent for hash-named run directories")
        p.add_argument("--world", help="load a serialized world instead of generating")
        if name in ("train-clf", "sample", "eval", "sweep"):
            p.add_argument("--checkpoint", required=False,
                           help="path to a checkpoint.bin")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, matching the CLI contract
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WorldError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
