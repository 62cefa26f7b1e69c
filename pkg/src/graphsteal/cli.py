"""Staged experiment runner.

Every stage writes into ``<workspace>/seed_<s>/`` and leaves a marker holding
the fingerprint of the configuration it ran with; rerunning a finished stage
is a no-op unless ``--force`` is given.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import attack as atk
from . import evaluation as ev
from . import formats as fmt
from . import gnn
from .config import ConfigError, Experiment, apply_override, dump_config, fingerprint, load_config
from .diffusion import build_schedule, train_denoiser
from .graphdata import gen_synthetic_dataset, split_dataset

log = logging.getLogger("graphsteal")

EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_RUNTIME = 4

STAGES = ("prepare-data", "train-target", "train-diffusion", "attack", "baseline", "ablate", "evaluate")


class MissingPrerequisite(RuntimeError):
    def __init__(self, stage, detail=""):
        super().__init__(f"missing prerequisite: run '{stage}' first{detail}")
        self.stage = stage


class WorkspaceLocked(RuntimeError):
    pass


def _portable(cfg: dict) -> dict:
    """The configuration minus its workspace location, which must not affect artifacts."""
    out = copy.deepcopy(cfg)
    out.get("io", {}).pop("workspace", None)
    return out


class Workspace:
    def __init__(self, root, exp: Experiment):
        self.root = Path(root)
        self.exp = exp
        self.cfg = _portable(exp.raw)
        self.fp = fingerprint(self.cfg)

    def seed_dir(self, seed) -> Path:
        return self.root / f"seed_{seed}"

    def path(self, seed, *parts) -> Path:
        return self.seed_dir(seed).joinpath(*parts)

    def marker(self, seed, stage) -> Path:
        return self.path(seed, "stages", stage + ".done")

    def done(self, seed, stage) -> bool:
        m = self.marker(seed, stage)
        return m.exists() and m.read_text(encoding="utf-8").strip() == self.fp

    def mark(self, seed, stage):
        fmt.atomic_write(self.marker(seed, stage), (self.fp + "\n").encode("utf-8"))

    def require(self, seed, stage):
        if not self.done(seed, stage):
            raise MissingPrerequisite(stage, f" (seed {seed})")

    def __enter__(self):
        self.root.mkdir(parents=True, exist_ok=True)
        self.lock = self.root / ".lock"
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkspaceLocked(f"workspace {self.root} is locked by another run ({self.lock})") from None
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        fmt.atomic_write(self.root / "config.yaml", dump_config(self.cfg).encode("utf-8"))
        return self

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False


# --------------------------------------------------------------------------- stage bodies


def _load_split(ws, seed):
    ws.require(seed, "prepare-data")
    return tuple(fmt.dataset_from_bytes(fmt.load(ws.path(seed, "data", f"{name}.jsonl")))
                 for name in ("target", "validation", "auxiliary"))


def _dp_tag(nm):
    return f"{nm:g}".replace(".", "p")


def stage_prepare_data(ws: Workspace, seed):
    exp = ws.exp
    ds = gen_synthetic_dataset(exp.gen, seed)
    encoder = None
    if exp.split_mode == "cluster_shift":
        encoder = lambda graphs: gnn.embed(gnn.GnnClassifier.init(ds.a, (16,), ds.num_classes, seed), graphs)
    split = split_dataset(ds, exp.split_mode, seed, ratios=exp.ratios, groups=exp.groups, encoder=encoder)
    fmt.save(ws.path(seed, "data", "dataset.jsonl"), fmt.dataset_bytes(ds))
    for name in ("target", "validation", "auxiliary"):
        fmt.save(ws.path(seed, "data", f"{name}.jsonl"), fmt.dataset_bytes(getattr(split, name)))


def _train(cfg, data, seed, dp=None):
    cfg = replace(cfg, seed=seed, dp=dp if dp is not None else cfg.dp)
    return gnn.train(data, cfg)


def stage_train_target(ws: Workspace, seed):
    exp = ws.exp
    tgt, _, aux = _load_split(ws, seed)
    res = _train(exp.target, tgt, seed)
    fmt.save(ws.path(seed, "models", "target.gnn"), fmt.model_bytes(res.model))
    enc = _train(exp.encoder, aux, seed + 10_000)
    fmt.save(ws.path(seed, "models", "encoder.gnn"), fmt.model_bytes(enc.model))
    info = {"target_train_accuracy": gnn.accuracy(res.model, tgt),
            "target_test_accuracy": gnn.accuracy(res.model, aux), "dp": []}
    for nm in exp.dp_noise:
        dp = gnn.DPConfig(clip_norm=exp.dp_clip, noise_multiplier=nm, delta=exp.dp_delta)
        r = _train(exp.target, tgt, seed, dp)
        fmt.save(ws.path(seed, "models", f"target_dp{_dp_tag(nm)}.gnn"), fmt.model_bytes(r.model))
        info["dp"].append({"noise_multiplier": nm, "epsilon": None if not np.isfinite(r.epsilon) else r.epsilon,
                           "test_accuracy": gnn.accuracy(r.model, aux)})
    fmt.save(ws.path(seed, "models", "target_info.json"),
             (json.dumps(info, sort_keys=True, indent=1) + "\n").encode("utf-8"))


def stage_train_diffusion(ws: Workspace, seed):
    exp = ws.exp
    _, _, aux = _load_split(ws, seed)
    sched = build_schedule(exp.T, aux.a, aux.b, exp.schedule_kind)
    res = train_denoiser(aux, sched, exp.denoiser, seed)
    fmt.save(ws.path(seed, "models", "denoiser.bin"), fmt.denoiser_bytes(res.params, exp.schedule_kind, seed))
    info = {"heldout_loss": res.heldout_loss, "baseline_entropy": res.baseline_entropy,
            "final_train_loss": res.loss_history[-1] if res.loss_history else None}
    fmt.save(ws.path(seed, "models", "denoiser_info.json"),
             (json.dumps(info, sort_keys=True, indent=1) + "\n").encode("utf-8"))


def _inputs(ws, seed, need_denoiser=True, target_file="target.gnn"):
    _, _, aux = _load_split(ws, seed)
    ws.require(seed, "train-target")
    clf = fmt.model_from_bytes(fmt.load(ws.path(seed, "models", target_file)))
    den = sched = None
    if need_denoiser:
        ws.require(seed, "train-diffusion")
        den, kind, _ = fmt.denoiser_from_bytes(fmt.load(ws.path(seed, "models", "denoiser.bin")))
        sched = build_schedule(den.T, den.a, den.b, kind)
    return atk.AttackInputs(clf, aux, den, sched)


def _save_result(ws, seed, rel, result: atk.AttackResult, a, b, audit=True):
    *parent, name = rel
    fmt.save(ws.path(seed, *parent, name + ".jsonl"),
             fmt.graphset_bytes(result.graphs, result.labels, a, b, {"variant": result.variant}))
    if audit and result.records:
        fmt.save(ws.path(seed, *parent, name + "_audit.json"), fmt.audit_bytes(result, a, b))


def stage_attack(ws: Workspace, seed):
    exp = ws.exp
    inputs = _inputs(ws, seed)
    a, b = inputs.aux.a, inputs.aux.b
    res = atk.run_graphsteal(inputs, exp.attack, seed)
    _save_result(ws, seed, ("attack", "graphsteal"), res, a, b)
    for nm in exp.dp_noise:
        dp_inputs = _inputs(ws, seed, target_file=f"target_dp{_dp_tag(nm)}.gnn")
        r = atk.run_graphsteal(dp_inputs, exp.attack, seed)
        _save_result(ws, seed, ("attack", f"graphsteal_dp{_dp_tag(nm)}"), r, a, b)


def stage_baseline(ws: Workspace, seed):
    exp = ws.exp
    inputs = _inputs(ws, seed, need_denoiser="bl_diff" in exp.methods)
    for m in exp.methods:
        r = atk.run_baseline(m, inputs, exp.attack.k, seed, pgd=exp.attack.pgd)
        _save_result(ws, seed, ("baselines", m), r, inputs.aux.a, inputs.aux.b, audit=False)


def stage_ablate(ws: Workspace, seed):
    exp = ws.exp
    inputs = _inputs(ws, seed)
    for v in exp.ablations:
        r = atk.run_ablation(v, inputs, exp.attack, seed)
        _save_result(ws, seed, ("ablations", v), r, inputs.aux.a, inputs.aux.b)


def _result_files(exp: Experiment):
    out = [("graphsteal", "attack", ("attack", "graphsteal.jsonl"))]
    out += [(m, "baseline", ("baselines", f"{m}.jsonl")) for m in exp.methods]
    out += [(f"graphsteal/{v}", "ablate", ("ablations", f"{v}.jsonl")) for v in exp.ablations]
    out += [(f"graphsteal_dp{_dp_tag(nm)}", "attack", ("attack", f"graphsteal_dp{_dp_tag(nm)}.jsonl"))
            for nm in exp.dp_noise]
    return out


def evaluate_seed(ws: Workspace, seed) -> dict:
    exp = ws.exp
    tgt, _, _ = _load_split(ws, seed)
    ws.require(seed, "train-target")
    enc = fmt.model_from_bytes(fmt.load(ws.path(seed, "models", "encoder.gnn")))
    rows = {}
    for name, stage, rel in _result_files(exp):
        ws.require(seed, stage)
        graphs, _, _ = fmt.graphset_from_bytes(fmt.load(ws.path(seed, *rel)))
        rows[name] = ev.method_metrics(graphs, tgt.graphs, exp.gen.rules, enc)
    return rows


def stage_evaluate(ws: Workspace, seeds):
    per_seed = {s: evaluate_seed(ws, s) for s in seeds}
    report = ev.full_report(per_seed, ws.fp)
    fmt.atomic_write(ws.root / "report.csv", report.to_csv().encode("utf-8"))
    extra = {}
    for s in seeds:
        p = ws.path(s, "models", "target_info.json")
        extra[str(s)] = json.loads(p.read_text(encoding="utf-8"))
    doc = {"fingerprint": ws.fp, "rows": report.rows, "per_seed": {str(k): v for k, v in per_seed.items()},
           "targets": extra}
    fmt.atomic_write(ws.root / "report.json", (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8"))
    return report


SEED_STAGES = {
    "prepare-data": stage_prepare_data,
    "train-target": stage_train_target,
    "train-diffusion": stage_train_diffusion,
    "attack": stage_attack,
    "baseline": stage_baseline,
    "ablate": stage_ablate,
}


def run_stage(ws: Workspace, stage: str, seeds, force=False):
    if stage == "evaluate":
        return stage_evaluate(ws, seeds)
    for s in seeds:
        if ws.done(s, stage) and not force:
            log.info("%s already complete for seed %s", stage, s)
            continue
        log.info("running %s for seed %s", stage, s)
        SEED_STAGES[stage](ws, s)
        ws.mark(s, stage)


def build_experiment(config_path, overrides, seed=None, workspace=None) -> Experiment:
    cfg = load_config(config_path)
    for o in overrides:
        cfg = apply_override(cfg, o)
    if seed is not None:
        cfg.setdefault("eval", {})["seeds"] = [int(seed)]
    if workspace is not None:
        cfg.setdefault("io", {})["workspace"] = str(workspace)
    return Experiment(cfg)


def execute(name, config_path, overrides=(), seed=None, workspace=None, force=False) -> int:
    try:
        exp = build_experiment(config_path, overrides, seed, workspace)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    stages = STAGES if name == "all" else (name,)
    try:
        with Workspace(exp.workspace, exp) as ws:
            for st in stages:
                run_stage(ws, st, exp.seeds, force)
    except MissingPrerequisite as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_PREREQ
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure code
        click.echo(f"runtime failure in {name}: {type(exc).__name__}: {exc}", err=True)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return 0


def _common(fn):
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override a config field by dotted path (repeatable).")(fn)
    fn = click.option("--workspace", type=click.Path(file_okay=False), default=None,
                      help="Workspace directory (overrides io.workspace).")(fn)
    fn = click.option("--force", is_flag=True, help="Rerun stages that already completed.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Run a single seed instead of eval.seeds.")(fn)
    fn = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                      help="Experiment configuration (YAML).")(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Reconstruct training graphs from a trained graph classifier."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


def _make(name):
    @main.command(name, help=f"Run the {name} stage." if name != "all" else "Run every stage in order.")
    @_common
    def cmd(config_path, seed, force, workspace, overrides):
        sys.exit(execute(name, config_path, overrides, seed, workspace, force))
    return cmd


for _name in STAGES + ("all",):
    _make(_name)


@main.command("show-config", help="Print the bundled default configuration.")
def show_config():
    from .config import bundled_config_text
    click.echo(bundled_config_text(), nl=False)


if __name__ == "__main__":
    main()
