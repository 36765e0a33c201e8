"""envedit command line: worldgen, edit, train-speaker, train, eval, ensemble.

Every command reads and writes a workspace directory (``--out`` or
``$ENVEDIT_WORKSPACE``) whose artifacts are tracked with content hashes in
``manifest.json``.  Failures exit nonzero and print a JSON error object on
stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import storage
from .editor import EditConfig, edit_world
from .experiments import edit_name
from .speaker import SpeakerConfig, build_speaker, train_speaker
from .storage import ArtifactError, Manifest
from .trainer import TrainConfig, TrainingData, build_agent, evaluate, train
from .vocab import Vocab
from .world import DatasetSplit, WorldSpec, generate_world, sample_episodes, split_dataset, vocabulary

logger = logging.getLogger("envedit")

SPLITS = ("train", "val_seen", "val_unseen")
SCOPE_FLAGS = {"view": "per_view", "panorama": "per_panorama", "environment": "per_environment"}
TEACHER = "teacher"


class ConfigError(ValueError):
    """Malformed or conflicting configuration."""


@dataclass
class PipelineConfig:
    world: WorldSpec = WorldSpec(num_envs=16, unseen_style_shift=4.0)
    episodes: int = 1600
    len_range: tuple[int, int] = (1, 4)
    edits: list[EditConfig] = field(default_factory=list)
    speaker: SpeakerConfig = field(default_factory=SpeakerConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=800, eval_every=200))
    eval_batch_size: int = 64

    def to_dict(self) -> dict:
        world = self.world.to_dict()
        world.update(episodes=self.episodes, len_range=list(self.len_range))
        train = self.train.to_dict()
        agent = {k: train.pop(k) for k in ("hidden", "embed", "feature_dropout")}
        return {
            "world": world,
            "edits": [asdict(e) for e in self.edits],
            "speaker": asdict(self.speaker),
            "agent": agent,
            "train": train,
            "eval": {"success_radius": self.train.success_radius, "batch_size": self.eval_batch_size},
        }


def _section(raw: dict, key: str, allowed: Sequence[str]) -> dict:
    d = raw.get(key, {})
    if not isinstance(d, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in config section {key!r}: {unknown}")
    return d


def parse_config(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {"world", "edits", "speaker", "agent", "train", "eval"})
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    base = PipelineConfig()
    spec_keys = [f.name for f in fields(WorldSpec)]
    world = dict(_section(raw, "world", spec_keys + ["episodes", "len_range"]))
    episodes = int(world.pop("episodes", base.episodes))
    len_range = tuple(world.pop("len_range", base.len_range))
    agent = _section(raw, "agent", ["hidden", "embed", "feature_dropout"])
    train_keys = [f.name for f in fields(TrainConfig) if f.name not in agent]
    train = _section(raw, "train", train_keys)
    ev = _section(raw, "eval", ["success_radius", "batch_size"])
    speaker = _section(raw, "speaker", [f.name for f in fields(SpeakerConfig)])
    edits_raw = raw.get("edits", [])
    if not isinstance(edits_raw, list):
        raise ConfigError("config section 'edits' must be a list")
    try:
        spec = WorldSpec.from_dict({**base.world.to_dict(), **world})
        spec.validate()
        edits = []
        for e in edits_raw:
            e = dict(e)
            e["style_scope"] = SCOPE_FLAGS.get(e.get("style_scope"), e.get("style_scope", "per_panorama"))
            edits.append(EditConfig.default(**e))
        train_cfg = TrainConfig.from_dict({**base.train.to_dict(), **train, **agent,
                                           **({"success_radius": ev["success_radius"]} if "success_radius" in ev else {})})
        speaker_cfg = replace(base.speaker, **speaker)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if len(len_range) != 2 or len_range[0] < 1 or len_range[0] > len_range[1]:
        raise ConfigError(f"bad len_range {list(len_range)}")
    return PipelineConfig(spec, episodes, len_range, edits, speaker_cfg, train_cfg,
                          int(ev.get("batch_size", base.eval_batch_size)))


def _plain(config: dict) -> dict:
    """JSON-normalised copy, so tuples and lists compare equal to their stored form."""
    return json.loads(json.dumps(config))


class Workspace:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.root)

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    def config(self) -> PipelineConfig:
        if not self.config_path.exists():
            raise ArtifactError(f"workspace {self.root} has no config.json; run worldgen first")
        return parse_config(json.loads(self.config_path.read_text()))

    def publish(self, name: str, rel_path: str, inputs: Sequence[str], config: dict) -> None:
        """Register an artifact; refuse if a consumed artifact would change under a new config."""
        config = _plain(config)
        self.check_reuse(name, config)
        self.manifest.data["configs"][name] = {"config": config, "inputs": list(inputs)}
        self.manifest.register(name, rel_path)

    def consumers(self, name: str) -> list[str]:
        return sorted(k for k, v in self.manifest.data["configs"].items() if name in v.get("inputs", []))

    def check_reuse(self, name: str, config: dict) -> None:
        old = self.manifest.data["configs"].get(name)
        if old is not None and old["config"] != _plain(config) and self.consumers(name):
            raise ConfigError(f"artifact {name!r} was already consumed by {self.consumers(name)} "
                              f"with a different config; use a fresh workspace")

    def load_data(self, edits: Sequence[str] = ()) -> TrainingData:
        world_dir = self.manifest.require("world")
        envs = storage.load_environments(world_dir)
        split_info = json.loads((world_dir / "split.json").read_text())
        episodes = {s: storage.load_episodes(world_dir / "episodes" / f"{s}.jsonl") for s in SPLITS}
        split = DatasetSplit(episodes["train"], episodes["val_seen"], episodes["val_unseen"],
                             split_info["seen_envs"], split_info["unseen_envs"])
        spec = next(iter(envs.values())).spec
        data = TrainingData(Vocab(vocabulary(spec)), envs, split)
        for name in edits:
            data.edited[name] = storage.load_environments(self.manifest.require(f"edit:{name}"))
        return data


def _replace_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _write_report(ws: Workspace, report, name: str, split: str) -> Path:
    out = ws.root / "reports" / name
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{split}.csv").write_text(report.to_csv())
    (out / f"{split}.json").write_text(report.to_json() + "\n")
    ws.manifest.register(f"report:{name}:{split}", f"reports/{name}/{split}.json")
    return out


def cmd_worldgen(args) -> dict:
    if not args.config:
        raise ConfigError("worldgen needs --config")
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    cfg = parse_config(raw)
    if args.seed is not None:
        cfg.world = replace(cfg.world, seed=args.seed)
    ws = Workspace(storage.workspace_root(args.out))
    snapshot = cfg.to_dict()
    ws.check_reuse("world", snapshot["world"])
    envs = generate_world(cfg.world)
    seed = cfg.world.seed
    unseen = [e.env_id for e in envs if e.domain == "unseen"]
    episodes = sample_episodes(envs, cfg.episodes, cfg.len_range, seed)
    split = split_dataset(episodes, cfg.world.holdout_fraction, seed, unseen_env_ids=unseen or None)
    world_dir = _replace_dir(ws.root / "world")
    storage.save_environments(envs, world_dir)
    for s in SPLITS:
        storage.save_episodes(split.get(s), world_dir / "episodes" / f"{s}.jsonl")
    (world_dir / "split.json").write_text(json.dumps({"seen_envs": split.seen_envs,
                                                      "unseen_envs": split.unseen_envs}, indent=1) + "\n")
    ws.config_path.write_text(json.dumps(snapshot, indent=1, sort_keys=True) + "\n")
    ws.publish("world", "world", [], snapshot["world"])
    teacher_dir = ws.root / "agents" / TEACHER
    storage.save_checkpoint(None, teacher_dir, {"kind": TEACHER, "training_stage": None, "seed": seed})
    ws.publish(f"agent:{TEACHER}", f"agents/{TEACHER}", ["world"], {"kind": TEACHER})
    return {"envs": len(envs), **{s: len(split.get(s)) for s in SPLITS}}


def cmd_edit(args) -> dict:
    ws = Workspace(storage.workspace_root(args.out))
    cfg = ws.config()
    seed = cfg.world.seed if args.seed is None else args.seed
    if args.variant:
        scope = SCOPE_FLAGS[args.style_scope]
        mask = args.mask_count if args.mask_count is not None else (1 if args.variant.endswith("_m") else 0)
        try:
            edits = [EditConfig(args.variant, scope, mask, seed)]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        edits = [e if args.seed is None else replace(e, seed=args.seed) for e in cfg.edits]
    if not edits:
        raise ConfigError("no edits requested: pass --variant or list edits in the config")
    data = ws.load_data()
    seen = [data.envs[e] for e in data.split.seen_envs]
    done = {}
    for ec in edits:
        name = edit_name(ec)
        ws.check_reuse(f"edit:{name}", asdict(ec))
        edited = edit_world(seen, ec)
        storage.save_environments(edited, _replace_dir(ws.root / "edits" / name))
        ws.publish(f"edit:{name}", f"edits/{name}", ["world"], asdict(ec))
        done[name] = len(edited)
    return {"edits": done}


def _speaker_name(aware: bool) -> str:
    return "speaker:aware" if aware else "speaker:plain"


def cmd_train_speaker(args) -> dict:
    ws = Workspace(storage.workspace_root(args.out))
    cfg = ws.config()
    aware = args.style_aware_speaker == "on"
    scfg = replace(cfg.speaker, style_aware=aware, seed=cfg.speaker.seed if args.seed is None else args.seed)
    name = _speaker_name(aware)
    ws.check_reuse(name, asdict(scfg))
    data = ws.load_data()
    log: list[dict] = []
    speaker = train_speaker(data.envs, data.split.train, data.vocab, scfg, log=log)
    rel = f"speakers/{'aware' if aware else 'plain'}"
    out = _replace_dir(ws.root / rel)
    storage.save_checkpoint(speaker, out, {
        "kind": "speaker", "style_aware": aware, "seed": scfg.seed, "training_stage": "stage1",
        "dims": {"vocab_size": len(data.vocab), "hidden": scfg.hidden, "embed": scfg.embed},
        "vocab": data.vocab.itos, "vocab_hash": data.vocab.digest(),
    })
    with open(out / "log.jsonl", "w") as fh:
        for row in log:
            fh.write(json.dumps(row) + "\n")
    ws.publish(name, rel, ["world"], asdict(scfg))
    return {"speaker": name, "final_loss": log[-1]["loss"] if log else None}


def _load_speaker(ws: Workspace, data: TrainingData, aware: bool):
    path = ws.manifest.require(_speaker_name(aware))
    desc = storage.load_descriptor(path)
    if desc["vocab_hash"] != data.vocab.digest():
        raise ArtifactError("speaker vocabulary does not match the world vocabulary")
    dims = desc["dims"]
    speaker = build_speaker(next(iter(data.envs.values())), data.vocab, desc["style_aware"],
                            dims["hidden"], dims["embed"])
    speaker.load_state_dict(storage.load_state(path, desc))
    speaker.eval()
    return speaker


def cmd_train(args) -> dict:
    ws = Workspace(storage.workspace_root(args.out))
    cfg = ws.config()
    tcfg = cfg.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.variant:
        tcfg = replace(tcfg, variants=tuple(v for v in args.variant.split(",") if v))
    name = args.name or "+".join(tcfg.variants or ("baseline",)) + f"-s{tcfg.seed}"
    stages_src = tcfg.curriculum if tcfg.schedule == "curriculum" else tcfg.variants
    edits = [s for s in stages_src if s != "original"]
    ws.check_reuse(f"agent:{name}", tcfg.to_dict())
    data = ws.load_data(edits)
    speaker = None
    inputs = ["world"] + [f"edit:{e}" for e in edits]
    if tcfg.bt_iterations > 0:
        aware = args.style_aware_speaker == "on"
        speaker = _load_speaker(ws, data, aware)
        inputs.append(_speaker_name(aware))
    result = train(data, tcfg, speaker=speaker)
    rel = f"agents/{name}"
    out = _replace_dir(ws.root / rel)
    stage = "stage3" if tcfg.bt_iterations > 0 else "stage2"
    storage.save_checkpoint(result.agent, out, {
        "kind": "follower", "seed": tcfg.seed, "training_stage": stage, "variants": list(tcfg.variants),
        "selection": tcfg.select,
        "dims": {"vocab_size": len(data.vocab), "feature_dim": data.envs[data.split.seen_envs[0]].spec.feature_dim,
                 "hidden": tcfg.hidden, "embed": tcfg.embed, "feature_dropout": tcfg.feature_dropout},
        "vocab": data.vocab.itos, "vocab_hash": data.vocab.digest(),
    })
    with open(out / "log.jsonl", "w") as fh:
        for row in result.log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if result.synthetic:
        storage.save_episodes(result.synthetic, out / "synthetic.jsonl")
    ws.publish(f"agent:{name}", rel, inputs, tcfg.to_dict())
    return {"agent": name, "examples": result.examples_consumed}


def _load_agent(ws: Workspace, data: TrainingData, name: str):
    """A Follower, or None for the shortest-path teacher."""
    path = ws.manifest.require(f"agent:{name}")
    desc = storage.load_descriptor(path)
    if desc["kind"] == TEACHER:
        return None
    if desc["vocab_hash"] != data.vocab.digest():
        raise ArtifactError(f"agent {name!r} vocabulary does not match the world vocabulary")
    dims = desc["dims"]
    tcfg = TrainConfig(hidden=dims["hidden"], embed=dims["embed"], feature_dropout=dims["feature_dropout"])
    agent = build_agent(data.vocab, dims["feature_dim"], tcfg)
    agent.load_state_dict(storage.load_state(path, desc))
    agent.eval()
    return agent


def _evaluate(ws: Workspace, names: Sequence[str], split: str, report_name: str, plot: bool) -> dict:
    cfg = ws.config()
    data = ws.load_data()
    agents = [_load_agent(ws, data, n) for n in names]
    if any(a is None for a in agents):
        if len(agents) > 1:
            raise ConfigError("the teacher cannot be part of an ensemble")
        agents = None
    report = evaluate(agents, data.vocab, data.envs, data.split.get(split), cfg.train.success_radius,
                      batch_size=cfg.eval_batch_size, models=list(names), split=split)
    _write_report(ws, report, report_name, split)
    print(report.table())
    if plot:
        plot_reports(ws.root / "reports", split)
    return {"report": report_name, "split": split,
            **{k: round(report.overall[k], 6) for k in ("SR", "SPL", "nDTW", "sDTW")}}


def cmd_eval(args) -> dict:
    ws = Workspace(storage.workspace_root(args.out))
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint NAME (an agent name under agents/, or 'teacher')")
    return _evaluate(ws, [args.checkpoint], args.split, args.checkpoint, args.plot)


def cmd_ensemble(args) -> dict:
    ws = Workspace(storage.workspace_root(args.out))
    names = [n for n in (args.ensemble or "").split(",") if n]
    if len(names) < 2:
        raise ConfigError("--ensemble needs at least two comma-separated agent names")
    return _evaluate(ws, names, args.split, "ensemble-" + "+".join(names), args.plot)


def plot_reports(reports_dir: Path, split: str) -> Path:
    """Bar chart of SR and SPL for every report on ``split``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names, sr, spl = [], [], []
    for path in sorted(reports_dir.glob(f"*/{split}.json")):
        overall = json.loads(path.read_text())["aggregates"]["overall"]
        names.append(path.parent.name)
        sr.append(overall["SR"])
        spl.append(overall["SPL"])
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3.5))
    x = range(len(names))
    ax.bar([i - 0.2 for i in x], sr, width=0.4, label="SR")
    ax.bar([i + 0.2 for i in x], spl, width=0.4, label="SPL")
    ax.set_xticks(list(x), names, rotation=30, ha="right")
    ax.set_ylim(0, 100)
    ax.set_title(split)
    ax.legend()
    fig.tight_layout()
    out = reports_dir / f"{split}.png"
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="envedit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="workspace directory (default: $ENVEDIT_WORKSPACE)")
        p.add_argument("--seed", type=int, help="override the configured seed for this stage")

    p = sub.add_parser("worldgen", help="generate environments, feature cache and episode splits")
    common(p)
    p.add_argument("--config", help="JSON config with sections world, edits, speaker, agent, train, eval")
    p.set_defaults(func=cmd_worldgen)

    p = sub.add_parser("edit", help="create edited copies of the seen environments")
    common(p)
    p.add_argument("--variant", choices=["E_st", "E_is1", "E_is2", "E_is1_m", "E_is2_m"],
                   help="single edit variant (default: every edit listed in the config)")
    p.add_argument("--style-scope", choices=sorted(SCOPE_FLAGS), default="panorama",
                   help="style sharing for E_st: one per view, per panorama or per environment")
    p.add_argument("--mask-count", type=int, help="number of classes masked by the _m variants (default 1)")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("train-speaker", help="train the instruction speaker on the training split")
    common(p)
    p.add_argument("--style-aware-speaker", choices=["on", "off"], default="on",
                   help="initialise the decoder from the start panorama's style")
    p.set_defaults(func=cmd_train_speaker)

    p = sub.add_parser("train", help="train a follower agent (mixed edits, optional back translation)")
    common(p)
    p.add_argument("--variant", help="comma-separated edit names mixed with the originals")
    p.add_argument("--style-aware-speaker", choices=["on", "off"], default="on",
                   help="which speaker to use for back translation")
    p.add_argument("--name", help="agent name (default: variants and seed)")
    p.set_defaults(func=cmd_train)

    for cmd, func, helptext in (("eval", cmd_eval, "evaluate one agent or the teacher"),
                                ("ensemble", cmd_ensemble, "evaluate a logit-averaging ensemble")):
        p = sub.add_parser(cmd, help=helptext)
        common(p)
        p.add_argument("--split", choices=SPLITS, default="val_unseen", help="episode split to evaluate")
        p.add_argument("--plot", action="store_true", help="also write an SR/SPL bar chart of all reports")
        if cmd == "eval":
            p.add_argument("--checkpoint", help="agent name, or 'teacher'")
        else:
            p.add_argument("--ensemble", help="comma-separated agent names")
        p.set_defaults(func=func)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        result = args.func(args)
    except (ArtifactError, ConfigError, FloatingPointError) as exc:
        code = 2 if isinstance(exc, ArtifactError) else 3 if isinstance(exc, ConfigError) else 4
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return code
    print(json.dumps({"ok": True, "command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
