"""Command line entry point: ``motus <stage> ...``.

Every artifact-producing stage writes a run manifest (command, effective
config, seeds, input and output hashes, ``git describe``). Passing that
manifest back through ``--config`` reruns the stage with the same settings.

Exit codes: 0 ok, 1 stage failure, 2 usage error. ``MOTUS_THREADS`` sets the
torch thread count (default 1, which is what makes reruns byte-identical).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from motus import checkpoint, synth
from motus.data2vec import EmaSchedule, PretrainCollapse, PretrainConfig, pretrain
from motus.dataset import AugmentConfig, Fold, kfold_recordings, split_pretrain
from motus.evaluation import EvalReport, dumps, render_table, results_table
from motus.finetune import Arm, FinetuneConfig, FinetuneDiverged, StageConfig, run_experiment
from motus.ingest import IngestError, load_frame_dir, preprocess, read_raw, write_frames, write_raw
from motus.model import ModelConfig
from motus.screening import ScreeningMode, ScreeningPolicy, Sequence, screen, sequence_split

log = logging.getLogger("motus")

MANIFEST_SCHEMA = 1
THREADS_ENV = "MOTUS_THREADS"
BACKBONE_PREFIX = "backbone."


class StageError(RuntimeError):
    """A stage failed for a reason the user can act on."""


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# manifests and hashing
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def hash_tree(paths) -> dict[str, str]:
    return {Path(p).name: sha256_file(p) for p in sorted(paths, key=lambda p: Path(p).name)}


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_manifest(path, command: str, config: dict, seeds: dict, inputs: dict, outputs: dict) -> None:
    write_json(path, {"schema_version": MANIFEST_SCHEMA, "command": command, "config": config,
                      "seeds": seeds, "inputs": inputs, "outputs": outputs,
                      "git_describe": git_describe()})


# --------------------------------------------------------------------------
# config helpers
# --------------------------------------------------------------------------

def model_config(value) -> ModelConfig:
    if isinstance(value, ModelConfig):
        return value
    if isinstance(value, dict):
        return ModelConfig(**value)
    presets = {"full": ModelConfig, "reduced": ModelConfig.reduced, "tiny": ModelConfig.tiny}
    if value not in presets:
        raise UsageError(f"unknown model preset {value!r} (choose from {sorted(presets)})")
    return presets[value]()


def desk_pretrain_config(**overrides) -> PretrainConfig:
    """Pre-training settings sized for one CPU and the reduced model."""
    base = dict(top_k=None, lr0=5e-4, batch_size=8, max_epochs=20, plateau_patience=5,
                early_stop_patience=10, ema=EmaSchedule(0.99, 0.999, 500))
    base.update(overrides)
    return PretrainConfig(**base)


def desk_finetune_config(**overrides) -> FinetuneConfig:
    """Fine-tuning settings sized for one CPU and the reduced model."""
    base = dict(
        stage1=StageConfig(lr=2e-3, plateau_patience=10, early_stop_patience=20, max_epochs=60),
        stage2=StageConfig(lr=1e-3, plateau_patience=4, early_stop_patience=8, max_epochs=15,
                           warmup_epochs=3, warmup_start_lr=1e-6,
                           augment=AugmentConfig.finetune(), transformer_dropout=0.4),
        k=5, divergence_patience=None)
    base.update(overrides)
    return FinetuneConfig(**base)


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _pretrain_cfg(d) -> PretrainConfig:
    """Partial dicts fill in from the desk defaults."""
    if isinstance(d, PretrainConfig):
        return d
    return PretrainConfig.from_dict(deep_merge(desk_pretrain_config().to_dict(), d))


def _finetune_cfg(d) -> FinetuneConfig:
    if isinstance(d, FinetuneConfig):
        return d
    return FinetuneConfig.from_dict(deep_merge(desk_finetune_config().to_dict(), d))


def apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Values in ``--config`` override flags. A run manifest is accepted too."""
    if not getattr(args, "config", None):
        return args
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        parser.error(f"cannot read config {args.config}: {e}")
    if "command" in data and "config" in data:
        if data["command"] != args.command:
            parser.error(f"manifest is for {data['command']!r}, not {args.command!r}")
        data = data["config"]
    known = set(vars(args))
    for key, value in data.items():
        attr = key.replace("-", "_")
        if attr not in known or attr in ("command", "config", "func"):
            parser.error(f"unknown config key {key!r} for {args.command}")
        setattr(args, attr, value)
    return args


def effective(args: argparse.Namespace, **resolved) -> dict:
    skip = {"command", "config", "func"}
    out = {k: v for k, v in vars(args).items() if k not in skip}
    for k, v in out.items():
        if isinstance(v, Path):
            out[k] = str(v)
    out.update(resolved)
    return out


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def cmd_synth(args) -> dict:
    if isinstance(args.spec, dict):  # replayed from a run manifest
        spec_dict = dict(args.spec)
    else:
        spec_dict = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = synth.SynthSpec(**spec_dict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in synth.generate(spec):
        p = out / f"{rec.recording_id}.mssl"
        write_raw(p, rec)
        paths.append(p)
    write_manifest(out / "run_manifest.json", "synth", effective(args, spec=spec.to_dict()),
                   {"seed": spec.seed}, {}, hash_tree(paths))
    return {"recordings": len(paths)}


def cmd_preprocess(args) -> dict:
    src, out = Path(args.input), Path(args.out)
    raws = sorted(src.glob("*.mssl"))
    if not raws:
        raise StageError(f"no *.mssl recordings in {src}")
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for p in raws:
        ft = preprocess(read_raw(p), args.gap_threshold)
        dest = out / f"{ft.recording_id}.msft"
        write_frames(dest, ft)
        paths.append(dest)
    write_manifest(out / "run_manifest.json", "preprocess", effective(args), {}, hash_tree(raws),
                   hash_tree(paths))
    return {"recordings": len(paths)}


def _frame_files(directory) -> list[Path]:
    files = sorted(Path(directory).glob("*.msft"))
    if not files:
        raise StageError(f"no *.msft frame files in {directory}")
    return files


def _sequences(directory) -> list[Sequence]:
    return [s for ft in load_frame_dir(directory) for s in sequence_split(ft)]


def cmd_screen(args) -> dict:
    frames_dir = Path(args.input).resolve()
    files = _frame_files(frames_dir)
    policy = ScreeningPolicy(ScreeningMode(args.policy), args.dropout_frame_fraction,
                             args.min_playtime_fraction)
    kept, report = screen(_sequences(frames_dir), policy)
    manifest = {"schema_version": MANIFEST_SCHEMA, "policy": policy.mode.value,
                "frames_dir": str(frames_dir), "frame_hashes": hash_tree(files),
                "kept": [s.seq_id for s in kept], "report": report.to_dict()}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, manifest)
    write_manifest(Path(str(out) + ".run.json"), "screen", effective(args), {}, hash_tree(files),
                   hash_tree([out]))
    return report.to_dict()


def load_screen_manifest(path) -> tuple[dict, list[Sequence]]:
    m = json.loads(Path(path).read_text())
    for key in ("frames_dir", "kept", "frame_hashes"):
        if key not in m:
            raise StageError(f"{path} is not a screening manifest (missing {key!r})")
    files = _frame_files(m["frames_dir"])
    if hash_tree(files) != m["frame_hashes"]:
        raise StageError(f"frame files in {m['frames_dir']} changed since screening")
    by_id = {s.seq_id: s for s in _sequences(m["frames_dir"])}
    missing = [k for k in m["kept"] if k not in by_id]
    if missing:
        raise StageError(f"sequences listed in manifest not found: {missing[:3]}")
    return m, [by_id[k] for k in m["kept"]]


def backbone_checkpoint(state: dict) -> dict:
    return {BACKBONE_PREFIX + k: v for k, v in state.items()}


def load_backbone(path) -> tuple[dict, ModelConfig]:
    state, cfg, _ = checkpoint.load(path)
    if not any(k.startswith(BACKBONE_PREFIX) for k in state):
        raise StageError(f"{path} holds no backbone weights")
    return {k[len(BACKBONE_PREFIX):]: v for k, v in state.items() if k.startswith(BACKBONE_PREFIX)}, cfg


def cmd_pretrain(args) -> dict:
    manifest, seqs = load_screen_manifest(args.manifest)
    if args.policy is not None and args.policy != manifest["policy"]:
        raise StageError(f"--policy {args.policy} does not match manifest policy {manifest['policy']}")
    mcfg = model_config(args.model)
    pcfg = _pretrain_cfg(args.pretrain) if args.pretrain else desk_pretrain_config()
    if args.max_epochs is not None:
        pcfg.max_epochs = args.max_epochs
    pcfg.augment = AugmentConfig.pretrain() if args.augment == "on" else None
    train, val = split_pretrain(seqs, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(str(out) + ".log.jsonl")
    entries = []
    try:
        res = pretrain(train, val, mcfg, pcfg, seed=args.seed, on_epoch=entries.append)
    except PretrainCollapse as e:
        log_path.write_text("".join(json.dumps(x, sort_keys=True) + "\n" for x in entries))
        raise StageError(f"{e}; flatness {json.dumps({k: e.flatness_stats[k] for k in ('train', 'val')})}")
    log_path.write_text("".join(json.dumps(x, sort_keys=True) + "\n" for x in entries))
    meta = {"policy": manifest["policy"], "seed": res.seed, "attempts": res.attempts,
            "best_val_loss": res.best_val_loss}
    checkpoint.save(out, backbone_checkpoint(res.state), mcfg, meta)
    write_manifest(Path(str(out) + ".run.json"), "pretrain",
                   effective(args, model=mcfg.to_dict(), pretrain=pcfg.to_dict()),
                   {"seed": args.seed, "final_seed": res.seed},
                   {"manifest": sha256_file(args.manifest), **manifest["frame_hashes"]},
                   hash_tree([out, log_path]))
    return meta


def _labeled_corpus(directory) -> dict:
    corpus = {ft.recording_id: ft for ft in load_frame_dir(directory)}
    unlabeled = [r for r, ft in corpus.items() if not ft.has_labels]
    if unlabeled:
        raise StageError(f"recordings without labels: {unlabeled[:3]}")
    return corpus


def _folds_from(path, k: int, seed: int) -> tuple[dict, list[Fold], dict]:
    """``path`` is either a fold manifest (JSON) or a directory of frame files."""
    p = Path(path)
    if p.is_dir():
        corpus = _labeled_corpus(p)
        folds = kfold_recordings(sorted(corpus), k, seed)
        info = {"frames_dir": str(p.resolve()), "frame_hashes": hash_tree(_frame_files(p)),
                "k": k, "seed": seed, "folds": [asdict(f) for f in folds]}
        return corpus, folds, info
    info = json.loads(p.read_text())
    files = _frame_files(info["frames_dir"])
    if hash_tree(files) != info["frame_hashes"]:
        raise StageError(f"frame files in {info['frames_dir']} changed since folds were made")
    folds = [Fold(**f) for f in info["folds"]]
    return _labeled_corpus(info["frames_dir"]), folds, info


def cmd_finetune(args) -> dict:
    corpus, folds, info = _folds_from(args.folds, args.k, args.seed)
    fcfg = _finetune_cfg(args.finetune) if args.finetune else desk_finetune_config()
    fcfg.k = len(folds)
    if args.ckpt in (None, "none"):
        state, mcfg = None, model_config(args.model)
    else:
        state, mcfg = load_backbone(args.ckpt)
    if args.skip_stage1 and state is None:
        raise UsageError("--skip-stage1 needs a pre-trained checkpoint")
    name = args.arm or ("random-init" if state is None else
                        Path(args.ckpt).stem + ("-skip-stage1" if args.skip_stage1 else ""))
    arm = Arm(name, args.fraction, args.seed, state, args.skip_stage1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    histories = []
    report = run_experiment(arm, corpus, folds, mcfg, fcfg,
                            on_fold=lambda i, cm, h: histories.extend({"fold": i, **e} for e in h))
    report.extra["ckpt_sha256"] = None if state is None else sha256_file(args.ckpt)
    write_json(out / "folds.json", info)
    (out / "report.json").write_text(dumps(report.to_dict()))
    (out / "history.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in histories))
    inputs = dict(info["frame_hashes"])
    if state is not None:
        inputs["ckpt"] = sha256_file(args.ckpt)
    write_manifest(out / "run_manifest.json", "finetune",
                   effective(args, model=mcfg.to_dict(), finetune=fcfg.to_dict()),
                   {"seed": args.seed, "fold_seeds": report.fold_seeds}, inputs,
                   hash_tree([out / "folds.json", out / "report.json", out / "history.jsonl"]))
    return {"arm": name, "uaf1": report.scores.uaf1}


def cmd_report(args) -> dict:
    paths = sorted(Path(args.input).rglob("report.json"))
    if not paths:
        raise StageError(f"no report.json under {args.input}")
    reports = [EvalReport.from_dict(json.loads(p.read_text())) for p in paths]
    table = results_table(reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, table)
    sys.stdout.write(render_table(table))
    write_manifest(Path(str(out) + ".run.json"), "report", effective(args), {},
                   {str(p.relative_to(args.input)): sha256_file(p) for p in paths}, hash_tree([out]))
    return {"reports": len(reports)}


# --------------------------------------------------------------------------
# reproduce: the desk-scale experiment grid
# --------------------------------------------------------------------------

POLICIES = ("none", "quality", "quality-playtime")


def _labeled_spec() -> dict:
    return synth.SynthSpec(n_recordings=15, duration_s=(420, 540), seed=1, id_prefix="lab").to_dict()


def _unlabeled_spec() -> dict:
    return synth.SynthSpec(n_recordings=30, duration_s=(1200, 1500), labeled=False,
                           playtime_fraction=0.575, p_sensor_outage=0.0058, p_link_outage=0.001,
                           seed=2, id_prefix="unl").to_dict()


@dataclass
class GridConfig:
    labeled: dict = field(default_factory=_labeled_spec)
    unlabeled: dict = field(default_factory=_unlabeled_spec)
    model: dict = field(default_factory=lambda: ModelConfig.reduced().to_dict())
    pretrain: dict = field(default_factory=lambda: desk_pretrain_config().to_dict())
    finetune: dict = field(default_factory=lambda: desk_finetune_config().to_dict())
    policies: list = field(default_factory=lambda: list(POLICIES))
    fractions: list = field(default_factory=lambda: [0.05])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    pretrain_augment: list = field(default_factory=lambda: [False])
    skip_stage1_policy: str | None = "quality-playtime"
    fold_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise UsageError(f"unknown grid config keys: {sorted(unknown)}")
        base = cls()
        for key, value in d.items():
            if isinstance(getattr(base, key), dict) and isinstance(value, dict):
                value = deep_merge(getattr(base, key), value)
            setattr(base, key, value)
        return base


def arm_name(policy: str | None, skip: bool = False, aug: bool = False) -> str:
    if policy is None:
        return "random-init"
    return f"pretrained[{policy}{',aug' if aug else ''}]" + ("+skip-stage1" if skip else "")


def run_grid(grid: GridConfig, on_event=None) -> tuple[list[EvalReport], dict]:
    """Screening conditions -> pre-training -> fine-tuning for every seed and fraction.

    Returns the reports and a dict of pre-training summaries.
    """
    def note(msg, **kw):
        log.info(msg, *kw.values())
        if on_event is not None:
            on_event(msg % tuple(kw.values()) if kw else msg)

    mcfg = model_config(grid.model)
    pcfg = _pretrain_cfg(grid.pretrain)
    fcfg = _finetune_cfg(grid.finetune)
    labeled = {ft.recording_id: ft for ft in (preprocess(r) for r in
                                                 synth.generate(synth.SynthSpec(**grid.labeled)))}
    seqs = [s for r in synth.generate(synth.SynthSpec(**grid.unlabeled)) for s in sequence_split(preprocess(r))]
    folds = kfold_recordings(sorted(labeled), fcfg.k, grid.fold_seed)
    screened = {}
    for policy in grid.policies:
        kept, rep = screen(seqs, ScreeningPolicy(ScreeningMode(policy)))
        screened[policy] = kept
        note("screened %s: kept %d of %d", policy=policy, kept=rep.n_kept, total=rep.n_input)
    reports, pretrain_info = [], {}
    for seed in grid.seeds:
        states = {}
        for policy in grid.policies:
            for aug in grid.pretrain_augment:
                cfg = copy.deepcopy(pcfg)
                cfg.augment = AugmentConfig.pretrain() if aug else None
                train, val = split_pretrain(screened[policy], seed)
                res = pretrain(train, val, mcfg, cfg, seed=seed)
                states[policy, aug] = res.state
                pretrain_info[f"{arm_name(policy, aug=aug)}/{seed}"] = {
                    "sequences": len(screened[policy]), "attempts": res.attempts,
                    "final_seed": res.seed, "epochs": len(res.log), "best_val_loss": res.best_val_loss,
                    "final_collapse_metric": res.log[-1]["collapse_metric"]}
                note("pretrained %s seed %d", arm=arm_name(policy, aug=aug), seed=seed)
        arms = [(None, False, False)] + [(p, a, False) for p in grid.policies for a in grid.pretrain_augment]
        if grid.skip_stage1_policy is not None:
            arms.append((grid.skip_stage1_policy, grid.pretrain_augment[0], True))
        for fraction in grid.fractions:
            for policy, aug, skip in arms:
                arm = Arm(arm_name(policy, skip, aug), fraction, seed,
                          None if policy is None else states[policy, aug], skip)
                rep = run_experiment(arm, labeled, folds, mcfg, fcfg)
                rep.extra["policy"] = policy
                rep.extra["pretrain_augment"] = aug
                reports.append(rep)
                note("arm %s fraction %g seed %d: uaf1 %.4f", arm=arm.name, fraction=fraction,
                     seed=seed, uaf1=rep.scores.uaf1)
    return reports, pretrain_info


def cmd_reproduce(args) -> dict:
    grid = GridConfig.from_dict(json.loads(Path(args.grid).read_text())) if args.grid else GridConfig()
    if args.seeds:
        grid.seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    reports, info = run_grid(grid, on_event=lambda m: print(m, flush=True))
    paths = []
    for rep in reports:
        d = out / "runs" / f"{rep.arm}_f{rep.label_fraction:g}_s{rep.seed}"
        d.mkdir(exist_ok=True)
        (d / "report.json").write_text(dumps(rep.to_dict()))
        paths.append(d / "report.json")
    table = results_table(reports)
    table["pretraining"] = info
    write_json(out / "results.json", table)
    text = render_table(table)
    (out / "results.txt").write_text(text)
    sys.stdout.write(text)
    write_manifest(out / "run_manifest.json", "reproduce", effective(args, grid=asdict(grid)),
                   {"seeds": grid.seeds, "fold_seed": grid.fold_seed}, {},
                   hash_tree([out / "results.json", out / "results.txt"]))
    return {"reports": len(reports)}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _fraction(value: str) -> float:
    v = float(value)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError("fraction must lie in (0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motus", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file (or run manifest) whose values override flags")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic raw corpus")
    p.add_argument("--spec", help="JSON SynthSpec; omitted fields take defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("preprocess", cmd_preprocess, "raw recordings -> frame tensors")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gap-threshold", type=float, default=0.5)

    p = add("screen", cmd_screen, "select pre-training sequences")
    p.add_argument("--policy", choices=[m.value for m in ScreeningMode], required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dropout-frame-fraction", type=float, default=0.2)
    p.add_argument("--min-playtime-fraction", type=float, default=1.0)

    p = add("pretrain", cmd_pretrain, "self-supervised pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", choices=[m.value for m in ScreeningMode])
    p.add_argument("--augment", choices=["on", "off"], default="off")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", default="reduced")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--pretrain", help=argparse.SUPPRESS)  # dict, from --config only
    p.add_argument("--out", required=True)

    p = add("finetune", cmd_finetune, "two-stage fine-tuning with k-fold evaluation")
    p.add_argument("--ckpt", default="none")
    p.add_argument("--folds", required=True, help="fold manifest JSON or labeled frame directory")
    p.add_argument("--fraction", type=_fraction, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--model", default="reduced", help="model preset when --ckpt none")
    p.add_argument("--skip-stage1", action="store_true")
    p.add_argument("--arm")
    p.add_argument("--finetune", help=argparse.SUPPRESS)  # dict, from --config only
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "collect reports into a results table")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("reproduce", cmd_reproduce, "run the whole desk-scale experiment grid")
    p.add_argument("--grid", help="JSON grid config; omitted fields take desk defaults")
    p.add_argument("--seeds", help="comma-separated seeds overriding the grid")
    p.add_argument("--out", required=True)
    return parser


def set_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    torch.set_num_threads(n)
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = apply_config_file(args, parser)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        set_threads()
        summary = args.func(args)
    except UsageError as e:
        print(f"motus {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except (StageError, IngestError, PretrainCollapse, FinetuneDiverged, ValueError, KeyError,
            OSError, FloatingPointError) as e:
        print(f"motus {args.command}: stage failed: {e}", file=sys.stderr)
        return 1
    if summary is not None:
        print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
