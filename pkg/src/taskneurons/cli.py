"""Command-line pipeline.

    taskneurons gen        generate task data, proxies and the tokenizer
    taskneurons train      train a model on the generated tasks (source=trained)
    taskneurons plant      build and verify the planted model (source=planted)
    taskneurons attribute  good/bad neuron sets per task
    taskneurons intervene  enhance/degrade ratio sweeps per task
    taskneurons eval       evaluate every plan, with per-question records
    taskneurons report     tables, histograms, common neurons, cross-task matrix

Every command takes ``--config FILE`` plus ``--<key> VALUE`` for any config
key; flags win over the file. Artifacts live under ``<out>/`` and each
command writes ``<out>/manifests/<command>.json``.

Exit codes: 0 ok, 1 usage or invalid config, 2 missing artifact,
3 stale or corrupt artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import torch

from . import config as config_mod
from .aqua import PromptTemplate, compose_prompt, expand, read_examples, read_proxy_sets, write_examples, write_proxy_sets
from .attribution import read_neuron_sets, score_task, write_neuron_sets
from .engine import ModelConfig
from .errors import ConfigError, IntegrityError, MissingArtifact, NumericError, StaleArtifact, TaskNeuronsError
from .evaluation import (
    collateral_report,
    common_neurons,
    cross_task,
    evaluate,
    histogram_csv,
    layer_histogram,
    sweep_csv,
    SweepReport,
    sweep_report,
    write_json,
)
from .intervention import read_plans, ratio_sweep, write_plans
from .tasks.generators import TaskSpec, corpus_texts, cue_map, generate_task, option_words
from .tasks.planted import PLANTED_FAMILIES, build_planted
from .tasks.training import GATE_COM, TrainSettings, passes_gate, select_eval_split, train
from .tokenizer import Tokenizer
from .weights import file_model_hash, load_weights, save_weights

log = logging.getLogger("taskneurons")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_STALE, EXIT_NUMERIC = 0, 1, 2, 3, 4
DIRECTIONS_ORDER = ("degrade", "enhance")


class UsageError(TaskNeuronsError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- artifact helpers ---------------------------------------------------------


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def need(path: Path) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(f"missing artifact {path}; run the upstream command first")
    return Path(path)


class Run:
    """Paths and provenance bookkeeping for one command invocation."""

    def __init__(self, cfg: config_mod.RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def p(self, *parts) -> Path:
        return self.cfg.path(*parts)

    def _key(self, path: Path) -> str:
        try:
            return Path(path).relative_to(self.cfg.out).as_posix()
        except ValueError:
            return str(path)

    def read(self, path: Path) -> Path:
        need(path)
        self.inputs[self._key(path)] = sha256_file(path)
        return path

    def wrote(self, path: Path) -> None:
        self.outputs[self._key(path)] = sha256_file(path)

    def provenance(self) -> dict:
        return {"config_hash": self.cfg.hash(), "upstream": dict(sorted(self.inputs.items()))}

    def manifest(self, status: str, code: int, detail: str = "") -> None:
        d = self.p("manifests")
        d.mkdir(parents=True, exist_ok=True)
        write_json(d / f"{self.command}.json", {
            "command": self.command,
            "status": status,
            "exit_code": code,
            "detail": detail,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.emit().replace(f"out = {self.cfg.out}\n", ""),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
        })

    # common paths
    def data(self, task, split):
        return self.p("data", f"{task}.{split}.jsonl")

    @property
    def tokenizer_path(self):
        return self.p("data", "tokenizer.json")

    @property
    def weights_path(self):
        return self.p("model", "weights.tnw")

    def sets_path(self, task):
        return self.p("sets", f"{task}.{self.cfg.scorer}.{self.cfg.mode}.json")

    def plans_path(self, task):
        return self.p("plans", f"{task}.{self.cfg.scorer}.{self.cfg.mode}.json")

    def eval_path(self, task):
        return self.p("reports", f"{task}.{self.cfg.scorer}.{self.cfg.mode}.eval.json")

    def template(self) -> PromptTemplate:
        if self.cfg.template:
            return PromptTemplate.load(self.read(Path(self.cfg.template)))
        return PromptTemplate.default()

    def tokenizer(self) -> Tokenizer:
        return Tokenizer.load(self.read(self.tokenizer_path))

    def model(self):
        model, header = load_weights(self.read(self.weights_path))
        return model, header


def _families(cfg) -> list[str]:
    # the planted model's vocabulary spans both cue families
    return list(PLANTED_FAMILIES) if cfg.source == "planted" else list(cfg.tasks)


def _spec(cfg, family) -> TaskSpec:
    planted = cfg.source == "planted"
    return TaskSpec(
        family,
        cfg.n_train,
        cfg.n_eval,
        cfg.seed,
        demonstration=False if planted else cfg.demonstration,
        n_keywords=1 if planted else cfg.n_keywords,
    )


# --- commands -----------------------------------------------------------------


def cmd_gen(run: Run) -> None:
    cfg = run.cfg
    template = run.template()
    texts = []
    data_dir = run.p("data")
    data_dir.mkdir(parents=True, exist_ok=True)
    for fam in _families(cfg):
        tr, ev = generate_task(_spec(cfg, fam))
        texts += corpus_texts(tr + ev, template.prompt + "\n" + template.option + "\n" + template.demonstration)
        for split, exs in (("train", tr), ("eval", ev)):
            write_examples(run.data(fam, split), exs)
            run.wrote(run.data(fam, split))
        write_proxy_sets(run.data(fam, "proxies"), expand(ev, cfg.seed))
        run.wrote(run.data(fam, "proxies"))
    tok = Tokenizer.from_corpus(texts)
    tok.save(run.tokenizer_path)
    run.wrote(run.tokenizer_path)


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    if cfg.source != "trained":
        raise ConfigError("train needs source = trained")
    tok, template = run.tokenizer(), run.template()
    train_ex, eval_sets = [], {}
    for t in cfg.tasks:
        train_ex += read_examples(run.read(run.data(t, "train")))
        eval_sets[t] = read_proxy_sets(run.read(run.data(t, "proxies")))
    mcfg = ModelConfig(cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ffn, len(tok), cfg.max_seq)
    settings = TrainSettings(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, loss=cfg.loss,
                             seed=cfg.seed, parallel=cfg.workers > 1)
    curve_sets = [ps for t in cfg.tasks for ps in eval_sets[t][:50]]
    result = train(mcfg, tok, train_ex, settings, curve_sets, template)
    gate = {t: evaluate(result.model, tok, eval_sets[t], template=template).com for t in cfg.tasks}
    meta = {
        "source": "trained",
        "gate": {"threshold": GATE_COM, "com": gate, "passed": any(passes_gate(c) for c in gate.values())},
        **run.provenance(),
    }
    run.weights_path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(result.model, run.weights_path, meta)
    run.wrote(run.weights_path)
    curve = run.p("model", "training_curve.tsv")
    result.write_curve(curve)
    run.wrote(curve)
    for t, c in gate.items():
        log.info("gate %s: Com %.3f (%s)", t, c, "pass" if passes_gate(c) else "fail")


def cmd_plant(run: Run) -> None:
    cfg = run.cfg
    if cfg.source != "planted":
        raise ConfigError("plant needs source = planted")
    tok, template = run.tokenizer(), run.template()
    specs = [_spec(cfg, f) for f in PLANTED_FAMILIES]
    prompts, slots = [], []
    for s in specs:
        for ps in read_proxy_sets(run.read(run.data(s.family, "proxies")))[:8]:
            for p in ps.proxies:
                prompts.append(compose_prompt(p, tok, template))
                slots.append(p.correct_index)
    planted = build_planted(
        tok, [cue_map(s) for s in specs], [w for s in specs for w in option_words(s)], prompts, slots,
        cfg.n_good, cfg.n_bad, cfg.delta, cfg.exhaustive_check, d_ffn=cfg.planted_d_ffn, seed=cfg.seed,
    )
    truth = {
        "good": [list(n) for n in planted.planted_good],
        "bad": [list(n) for n in planted.planted_bad],
        "junk": [list(n) for n in planted.junk],
        "letter_biased": [list(n) for n in planted.letter_biased],
        "delta": planted.delta,
        "min_margins": {f"{n.layer}:{n.index}": list(v) for n, v in sorted(planted.effects.items())},
    }
    run.weights_path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(planted.model, run.weights_path, {"source": "planted", "gate": {"passed": True},
                                                   "planted": truth, **run.provenance()})
    run.wrote(run.weights_path)


def _check_gate(header) -> None:
    gate = header.get("meta", {}).get("gate", {})
    if not gate.get("passed", False):
        raise ConfigError(
            f"checkpoint failed the Com >= {GATE_COM} gate ({gate.get('com')}); attribution refuses to run"
        )


def _attribution_sets(run, model, tok, template, task):
    """The first ``tr`` training questions the model comprehends, as proxy sets."""
    cfg = run.cfg
    train_ex = read_examples(run.read(run.data(task, "train")))
    pool = expand(train_ex[: max(cfg.tr * 20, cfg.tr)], cfg.seed)
    ev = evaluate(model, tok, pool, template=template)
    ok = {pid for pid, v in ev.by_parent().items() if sum(v) >= 2}
    chosen = [ps for ps in pool if ps.parent_id in ok][: cfg.tr]
    if len(chosen) < cfg.tr:
        log.warning("%s: only %d comprehended questions for attribution", task, len(chosen))
        chosen += [ps for ps in pool if ps.parent_id not in ok][: cfg.tr - len(chosen)]
    return chosen, train_ex


def cmd_attribute(run: Run) -> None:
    cfg = run.cfg
    tok, template = run.tokenizer(), run.template()
    model, header = run.model()
    _check_gate(header)
    run.p("sets").mkdir(parents=True, exist_ok=True)
    for task in cfg.tasks:
        chosen, parents = _attribution_sets(run, model, tok, template, task)
        sets = score_task(model, tok, chosen, parents, scorer=cfg.scorer, mode=cfg.mode, m=cfg.m, z=cfg.z,
                          K=cfg.K, tr=cfg.tr, seed=cfg.seed, template=template)
        meta = {
            "task": task,
            "model_hash": header["model_hash"],
            "m": cfg.m,
            "tr": len(chosen),
            "scorer": cfg.scorer,
            "mode": cfg.mode,
            "examples": [ps.parent_id for ps in chosen],
            **run.provenance(),
        }
        write_neuron_sets(run.sets_path(task), sets, meta)
        run.wrote(run.sets_path(task))


def _check_model(meta: dict, header: dict, what: Path) -> None:
    if meta.get("model_hash") != header["model_hash"]:
        raise StaleArtifact(
            f"{what} was made for model {str(meta.get('model_hash'))[:12]}, "
            f"current weights are {header['model_hash'][:12]}; rerun the upstream command"
        )


def cmd_intervene(run: Run) -> None:
    cfg = run.cfg
    header_hash = file_model_hash(run.read(run.weights_path))
    run.p("plans").mkdir(parents=True, exist_ok=True)
    for task in cfg.tasks:
        path = run.read(run.sets_path(task))
        sets, meta = read_neuron_sets(path)
        _check_model(meta, {"model_hash": header_hash}, path)
        plans = [p for d in DIRECTIONS_ORDER for p in ratio_sweep(sets, d, cfg.budget, cfg.step)]
        write_plans(run.plans_path(task), plans, {
            "task": task, "model_hash": header_hash, "sets_sha256": run.inputs[run._key(path)],
            "scorer": cfg.scorer, "mode": cfg.mode, **run.provenance(),
        })
        run.wrote(run.plans_path(task))


def _eval_sets(run, model, tok, template, task):
    proxies = read_proxy_sets(run.read(run.data(task, "proxies")))
    picked, info = select_eval_split(model, tok, proxies, run.cfg.n_comprehended, run.cfg.n_missed, template)
    return picked, info


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    tok, template = run.tokenizer(), run.template()
    model, header = run.model()
    run.p("reports").mkdir(parents=True, exist_ok=True)
    for task in cfg.tasks:
        sets_path = run.read(run.sets_path(task))
        _check_model(read_neuron_sets(sets_path)[1], header, sets_path)
        plans_path = run.read(run.plans_path(task))
        plans, meta = read_plans(plans_path)
        _check_model(meta, header, plans_path)
        if meta.get("sets_sha256") != run.inputs[run._key(sets_path)]:
            raise StaleArtifact(f"{plans_path} was built from a different neuron-set file; rerun intervene")
        picked, split = _eval_sets(run, model, tok, template, task)
        out = {"task": task, "model_hash": header["model_hash"], "split": split, "sweeps": {}, "collateral": {},
               **run.provenance()}
        for d in DIRECTIONS_ORDER:
            sw = sweep_report(model, tok, picked, [p for p in plans if p.direction == d], task, template)
            out["sweeps"][d] = sw.to_json(with_records=True)
            best = sw.best["joint"]
            if best is not None:
                plan = [p for p in plans if p.direction == d][best]
                out["collateral"][d] = {"ratio": plan.ratio,
                                        **collateral_report(model, tok, plan, picked, template).to_json()}
        write_json(run.eval_path(task), out)
        run.wrote(run.eval_path(task))


def _best_row(sweep: dict, conv: str):
    i = sweep["best"][conv]
    return None if i is None else sweep["table"][i]


def cmd_report(run: Run) -> None:
    cfg = run.cfg
    tok, template = run.tokenizer(), run.template()
    model, header = run.model()
    summary = {"config": cfg.emit().replace(f"out = {cfg.out}\n", ""), "model_hash": header["model_hash"], "tasks": {}, "diagnostics": []}
    sets_by_task, sweeps = {}, []
    for task in cfg.tasks:
        sets_path = run.read(run.sets_path(task))
        sets, smeta = read_neuron_sets(sets_path)
        _check_model(smeta, header, sets_path)
        sets_by_task[task] = sets
        ev = json.loads(run.read(run.eval_path(task)).read_text())
        _check_model(ev, header, run.eval_path(task))
        hist = layer_histogram(sets, model.cfg.n_layers)
        hist_path = run.p("reports", f"{task}.{cfg.scorer}.{cfg.mode}.layers.csv")
        hist_path.write_text(histogram_csv(hist))
        run.wrote(hist_path)
        entry = {"layers": hist, "split": ev["split"], "best": {}, "collateral": {}}
        for d in DIRECTIONS_ORDER:
            sw = ev["sweeps"][d]
            entry["best"][d] = {c: _best_row(sw, c) for c in ("by_rac", "by_rcc", "joint")}
            if d in ev["collateral"]:
                c = ev["collateral"][d]
                entry["collateral"][d] = {k: c[k] for k in ("ratio", "x", "y", "z", "n_questions",
                                                            "mean_correct_change", "mean_wrong_change")}
            sweeps.append(_sweep_stub(task, d, sw))
        joint = entry["best"]["degrade"]["joint"]
        if joint is None or (joint["rac"] or 0.0) < 10.0:
            entry["diagnostic"] = _diagnose(ev["sweeps"]["degrade"], sets)
            summary["diagnostics"].append(task)
        summary["tasks"][task] = entry
    table = run.p("reports", f"table.{cfg.scorer}.{cfg.mode}.csv")
    table.write_text(sweep_csv(sweeps))
    run.wrote(table)
    cg, cb = common_neurons(sets_by_task)
    summary["common"] = {"good": sorted(map(list, cg)), "bad": sorted(map(list, cb))}
    if len(cfg.tasks) > 1:
        proxies = {t: _eval_sets(run, model, tok, template, t)[0] for t in cfg.tasks}
        matrix = cross_task(model, tok, sets_by_task, proxies, "degrade", cfg.budget, cfg.step, template)
        mpath = run.p("reports", f"cross_task.{cfg.scorer}.{cfg.mode}.csv")
        mpath.write_text(matrix.to_csv())
        run.wrote(mpath)
        summary["cross_task"] = matrix.to_json()
    spath = run.p("reports", f"summary.{cfg.scorer}.{cfg.mode}.json")
    write_json(spath, {**summary, **run.provenance()})
    run.wrote(spath)


class _Stub:
    def __init__(self, row):
        self.plan = {"ratio": row["ratio"]}
        self.rac, self.rcc = row["rac"], row["rcc"]
        self.status = {"acc": row["acc_status"], "com": row["com_status"]}


def _sweep_stub(task, direction, sw: dict):
    return SweepReport(task, direction, [_Stub(r) for r in sw["table"]], sw["best"])


def _diagnose(sweep: dict, sets) -> dict:
    """Why the degrader missed the 10% RAC trend: enough neurons? any movement?"""
    rows = sweep["table"]
    return {
        "message": "degrade RAC below 10% or failed under every ratio",
        "n_good": len(sets.good),
        "n_bad": len(sets.bad),
        "shortfall": sets.shortfall,
        "acc_original": rows[0]["acc_original"],
        "acc_by_ratio": {str(r["ratio"]): r["acc_intervened"] for r in rows},
        "statuses": {str(r["ratio"]): r["acc_status"] for r in rows},
    }


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "plant": cmd_plant,
    "attribute": cmd_attribute,
    "intervene": cmd_intervene,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="taskneurons", description="Find and steer task neurons in small transformers.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0] if fn.__doc__ else name)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("-v", "--verbose", action="store_true")
        for f in fields(config_mod.RunConfig):
            sp.add_argument(f"--{f.name}", dest=f"opt_{f.name}", metavar="VALUE")
    return parser


def run_command(argv: list[str]) -> int:
    run = None
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("no command given; try --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = {k[4:]: config_mod.coerce(k[4:], v) for k, v in vars(args).items()
                     if k.startswith("opt_") and v is not None}
        cfg = config_mod.load(args.config, overrides)
        torch.set_num_threads(cfg.workers)
        run = Run(cfg, args.command)
        COMMANDS[args.command](run)
    except (UsageError, ConfigError) as e:
        return _fail(run, EXIT_USAGE, e)
    except MissingArtifact as e:
        return _fail(run, EXIT_MISSING, e)
    except (StaleArtifact, IntegrityError) as e:
        return _fail(run, EXIT_STALE, e)
    except NumericError as e:
        return _fail(run, EXIT_NUMERIC, e)
    run.manifest("ok", EXIT_OK)
    return EXIT_OK


def _fail(run, code, err) -> int:
    print(f"taskneurons: error: {err}", file=sys.stderr)
    if run is not None:
        run.manifest("error", code, str(err))
    return code


def main(argv: list[str] | None = None) -> None:
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
