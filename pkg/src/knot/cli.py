"""Command-line workbench: data generation through the comparison report.

Every subcommand reads one JSON config (``--config``) whose fields can be
overridden by flags, and writes below ``output_dir``::

    data/       CSV splits + manifest.json
    models/     teacher_<k>.json, global.json
    biases/     teacher_<k>.json, global.json
    students/   <divergence>-<scheme>.json (+ .meta.json)
    curves/     <divergence>-<scheme>.csv
    reports/    local_scores.csv
    results.csv, report.md

All randomness derives from the experiment seed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ._io import write_json_atomic, write_text_atomic
from .confidence import ProbabilityBias, WeightScheme, estimate_bias
from .data_sim import Dataset, FederationLayout, make_task, noise_sampler, partition_non_iid
from .distillation import LWF_TEACHER_ID, Teacher, TeacherEnsemble, augment_with_lwf, distill
from .divergences import DIVERGENCES, SinkhornConfig
from .label_space import BUILTIN_TASKS, LabelSpace, resolve_space
from .metrics import evaluate
from .model import LinearSoftmaxClassifier, OptimizerConfig, train_ce

RESULTS_HEADER = ["divergence", "scheme", "split", "metric_primary", "sd", "seed", "wall_time_s"]
DIVERGENCE_NAMES = {"sinkhorn": "Sinkhorn", "kl": "Entropy"}


class PipelineError(RuntimeError):
    """A missing or inconsistent artifact; reported without a traceback."""


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "SA"
    feature_dim: int = 8
    noise_std: float = 0.6
    layout: FederationLayout = field(default_factory=FederationLayout)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    local_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(learning_rate=0.5, batch_size=64, epochs=50)
    )
    schemes: tuple[str, ...] = ("A", "D", "U", "E")
    divergences: tuple[str, ...] = ("sinkhorn", "kl")
    lwf: bool = True
    n_noise_samples: int = 10000
    seed: int = 0
    output_dir: str = "knot_out"
    timing: bool = False

    def __post_init__(self):
        schemes = tuple(WeightScheme.parse(s).value for s in self.schemes)
        divs = tuple(str(d).lower() for d in self.divergences)
        if not schemes:
            raise ValueError("at least one weighting scheme is required")
        if not divs:
            raise ValueError("at least one divergence is required")
        for d in divs:
            if d not in DIVERGENCES:
                raise ValueError(f"unknown divergence {d!r}; expected one of {', '.join(DIVERGENCES)}")
        if len(set(schemes)) != len(schemes) or len(set(divs)) != len(divs):
            raise ValueError("schemes and divergences must not repeat")
        if int(self.n_noise_samples) < 1:
            raise ValueError("n_noise_samples must be >= 1")
        if str(self.task).upper() not in BUILTIN_TASKS and not Path(self.task).is_file():
            raise ValueError(f"task {self.task!r} is neither a builtin task nor an existing label-space file")
        object.__setattr__(self, "schemes", schemes)
        object.__setattr__(self, "divergences", divs)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(unknown)}")
        nested = {
            "layout": FederationLayout,
            "sinkhorn": SinkhornConfig,
            "optimizer": OptimizerConfig,
            "local_optimizer": OptimizerConfig,
        }
        for key, typ in nested.items():
            if key in doc and isinstance(doc[key], dict):
                sub_known = {f.name for f in fields(typ)}
                bad = sorted(set(doc[key]) - sub_known)
                if bad:
                    raise ValueError(f"unknown {key} fields: {', '.join(bad)}")
                doc[key] = typ(**doc[key])
        for key in ("schemes", "divergences"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout"]["sizes"] = list(d["layout"]["sizes"])
        d["schemes"] = list(self.schemes)
        d["divergences"] = list(self.divergences)
        return d

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def space(self) -> LabelSpace:
        return resolve_space(self.task)

    def subseed(self, *tags: int) -> int:
        """Independent stream for one pipeline stage; the data uses ``seed`` itself."""
        return int(np.random.SeedSequence([int(self.seed), *tags]).generate_state(1)[0])


# seed stream tags
_LOCAL, _GLOBAL, _BIAS, _DISTILL = 2, 3, 4, 5


def _cell(div: str, scheme: str) -> str:
    return f"{div}-{scheme}"


# -- data ----------------------------------------------------------------------

def _split_names(n_locals: int) -> list[str]:
    names = [f"local_{k}_train" for k in range(n_locals)] + ["global_train", "transfer"]
    names += [f"local_{k}_test" for k in range(n_locals)] + ["global_test"]
    return names


def cmd_gen_data(cfg: ExperimentConfig) -> dict:
    space = cfg.space()
    seed = int(cfg.seed)
    task = make_task(space, cfg.feature_dim, cfg.noise_std, seed)
    fed = partition_non_iid(task, cfg.layout, seed)
    splits: dict[str, Dataset] = {}
    for k, d in enumerate(fed.locals):
        splits[f"local_{k}_train"] = d
    splits["global_train"] = fed.global_train
    splits["transfer"] = fed.transfer
    for k, d in enumerate(fed.local_tests):
        splits[f"local_{k}_test"] = d
    splits["global_test"] = fed.global_test
    files = {}
    for name in _split_names(cfg.layout.n_locals):
        text = splits[name].to_csv_text()
        rel = f"data/{name}.csv"
        write_text_atomic(cfg.out / rel, text)
        files[name] = {
            "path": rel,
            "rows": len(splits[name]),
            "labeled": splits[name].labeled,
            "sha256": hashlib.sha256(text.encode()).hexdigest(),
        }
    manifest = {
        "seed": int(cfg.seed),
        "task": str(cfg.task),
        "space": space.to_dict(),
        "feature_dim": int(cfg.feature_dim),
        "n_locals": int(cfg.layout.n_locals),
        "proportions": np.round(fed.proportions, 12).tolist(),
        "files": files,
    }
    write_json_atomic(cfg.out / "data" / "manifest.json", manifest)
    return manifest


def _manifest(cfg: ExperimentConfig) -> dict:
    path = cfg.out / "data" / "manifest.json"
    if not path.is_file():
        raise PipelineError(f"missing {path}; run gen-data first")
    with open(path) as fh:
        return json.load(fh)


def _load_split(cfg: ExperimentConfig, manifest: dict, name: str) -> Dataset:
    try:
        rel = manifest["files"][name]["path"]
    except KeyError:
        raise PipelineError(f"manifest has no split {name!r}") from None
    path = cfg.out / rel
    if not path.is_file():
        raise PipelineError(f"missing dataset file {path}; run gen-data first")
    return Dataset.load_csv(path)


# -- local training --------------------------------------------------------------

def _primary_name(task: str) -> str:
    return "accuracy" if str(task).upper() == "NLI" else "macro_f1"


def cmd_train_local(cfg: ExperimentConfig) -> list[dict]:
    manifest = _manifest(cfg)
    space = resolve_space(manifest["space"])
    n = int(manifest["n_locals"])
    jobs = [(f"teacher_{k}", f"local_{k}_train", f"local_{k}_test", cfg.subseed(_LOCAL, k)) for k in range(n)]
    jobs.append(("global", "global_train", "global_test", cfg.subseed(_GLOBAL)))
    rows = []
    for model_name, train, test, seed in jobs:
        d = _load_split(cfg, manifest, train)
        init = LinearSoftmaxClassifier.initialize(space, d.X.shape[1], seed)
        model, _ = train_ce(init, d.X, d.y, replace(cfg.local_optimizer, seed=seed))
        model.save(cfg.out / "models" / f"{model_name}.json")
        t = _load_split(cfg, manifest, test)
        rep = evaluate(model(t.X), t.y, space)
        rows.append({
            "model": model_name,
            "split": test,
            "train_size": len(d),
            "metric_primary": rep.primary(cfg.task),
            "sd": rep.sd,
        })
    buf = io.StringIO()
    buf.write(f"model,split,train_size,{_primary_name(cfg.task)},sd\n")
    for r in rows:
        buf.write(f"{r['model']},{r['split']},{r['train_size']},{r['metric_primary']:.6f},{r['sd']:.6f}\n")
    write_text_atomic(cfg.out / "reports" / "local_scores.csv", buf.getvalue())
    return rows


def _load_model(cfg: ExperimentConfig, name: str) -> LinearSoftmaxClassifier:
    path = cfg.out / "models" / f"{name}.json"
    if not path.is_file():
        raise PipelineError(f"missing model {path}; run train-local first")
    return LinearSoftmaxClassifier.load(path)


# -- biases ----------------------------------------------------------------------

def cmd_estimate_bias(cfg: ExperimentConfig) -> dict[str, ProbabilityBias]:
    manifest = _manifest(cfg)
    space = resolve_space(manifest["space"])
    transfer = _load_split(cfg, manifest, "transfer")
    names = [f"teacher_{k}" for k in range(int(manifest["n_locals"]))] + ["global"]
    out = {}
    for k, name in enumerate(names):
        model = _load_model(cfg, name)
        sampler = noise_sampler(transfer, cfg.subseed(_BIAS, k))
        bias = estimate_bias(model, sampler, cfg.n_noise_samples, space=space, teacher_id=name)
        bias.save(cfg.out / "biases" / f"{name}.json")
        out[name] = bias
    return out


def _load_bias(cfg: ExperimentConfig, name: str, space: LabelSpace) -> ProbabilityBias | None:
    path = cfg.out / "biases" / f"{name}.json"
    return ProbabilityBias.load(path, space) if path.is_file() else None


# -- distillation ----------------------------------------------------------------

def _ensemble(cfg: ExperimentConfig, manifest: dict, space: LabelSpace, scheme: str,
              transfer: Dataset, global_model: LinearSoftmaxClassifier) -> TeacherEnsemble:
    teachers = []
    need_bias = scheme == "E"
    for k in range(int(manifest["n_locals"])):
        name = f"teacher_{k}"
        bias = _load_bias(cfg, name, space)
        if need_bias and bias is None:
            raise PipelineError(f"scheme E needs the probability bias of {name}; run estimate-bias first")
        size = int(manifest["files"][f"local_{k}_train"]["rows"])
        teachers.append(Teacher(name, _load_model(cfg, name), bias, size))
    ens = TeacherEnsemble(space, teachers, scheme)
    if cfg.lwf:
        bias = _load_bias(cfg, "global", space)
        if need_bias and bias is None:
            raise PipelineError(
                f"scheme E needs the probability bias of global (the {LWF_TEACHER_ID} teacher); "
                "run estimate-bias first"
            )
        ens = augment_with_lwf(
            ens, global_model, transfer.X, dataset_size=int(manifest["files"]["global_train"]["rows"]), bias=bias
        )
    return ens


def cmd_distill(cfg: ExperimentConfig) -> list[str]:
    manifest = _manifest(cfg)
    space = resolve_space(manifest["space"])
    transfer = _load_split(cfg, manifest, "transfer")
    global_model = _load_model(cfg, "global")
    written = []
    for div in cfg.divergences:
        for scheme in cfg.schemes:
            ens = _ensemble(cfg, manifest, space, scheme, transfer, global_model)
            opt = replace(cfg.optimizer, seed=cfg.subseed(_DISTILL, cfg.optimizer.seed))
            t0 = time.perf_counter()
            student, curve = distill(global_model, ens, transfer.X, div, cfg.sinkhorn, opt)
            elapsed = time.perf_counter() - t0 if cfg.timing else 0.0
            name = _cell(div, scheme)
            student.save(cfg.out / "students" / f"{name}.json")
            write_json_atomic(cfg.out / "students" / f"{name}.meta.json", {
                "divergence": div,
                "scheme": scheme,
                "teachers": [t.teacher_id for t in ens.teachers],
                "wall_time_s": elapsed,
            })
            write_text_atomic(cfg.out / "curves" / f"{name}.csv", curve.to_csv_text())
            written.append(name)
    return written


# -- evaluation ------------------------------------------------------------------

def _eval_splits(cfg: ExperimentConfig, manifest: dict) -> list[tuple[str, Dataset]]:
    n = int(manifest["n_locals"])
    splits = [(f"local_{k}", _load_split(cfg, manifest, f"local_{k}_test")) for k in range(n)]
    splits.append(("global", _load_split(cfg, manifest, "global_test")))
    X = np.vstack([d.X for _, d in splits])
    y = np.concatenate([d.y for _, d in splits])
    splits.append(("ALL", Dataset(X, y)))
    return splits


def cmd_evaluate(cfg: ExperimentConfig) -> list[dict]:
    manifest = _manifest(cfg)
    space = resolve_space(manifest["space"])
    splits = _eval_splits(cfg, manifest)
    rows = []
    for div in cfg.divergences:
        for scheme in cfg.schemes:
            name = _cell(div, scheme)
            path = cfg.out / "students" / f"{name}.json"
            if not path.is_file():
                raise PipelineError(f"missing student {path}; run distill first")
            student = LinearSoftmaxClassifier.load(path)
            wall = 0.0
            meta = cfg.out / "students" / f"{name}.meta.json"
            if cfg.timing and meta.is_file():
                with open(meta) as fh:
                    wall = float(json.load(fh).get("wall_time_s", 0.0))
            for split, d in splits:
                rep = evaluate(student(d.X), d.y, space)
                rows.append({
                    "divergence": div,
                    "scheme": scheme,
                    "split": split,
                    "metric_primary": f"{rep.primary(cfg.task):.6f}",
                    "sd": f"{rep.sd:.6f}",
                    "seed": str(int(cfg.seed)),
                    "wall_time_s": f"{wall:.3f}",
                })
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULTS_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    write_text_atomic(cfg.out / "results.csv", buf.getvalue())
    return rows


# -- report ----------------------------------------------------------------------

def read_results(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise PipelineError(f"results file {path} does not exist")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise PipelineError(f"{path} is empty")
        if list(reader.fieldnames) != RESULTS_HEADER:
            raise PipelineError(f"{path} has header {reader.fieldnames}, expected {RESULTS_HEADER}")
        rows = list(reader)
    if not rows:
        raise PipelineError(f"{path} has no result rows")
    for i, r in enumerate(rows, start=2):
        try:
            r["metric_primary"] = float(r["metric_primary"])
            r["sd"] = float(r["sd"])
        except (TypeError, ValueError):
            raise PipelineError(f"{path}:{i}: malformed metric values") from None
    return rows


def format_report(rows: list[dict], metric_name: str = "F1") -> str:
    """Markdown grid: one row per method, metric and SD per split, min SD in bold."""
    splits = list(dict.fromkeys(r["split"] for r in rows))
    schemes = list(dict.fromkeys(r["scheme"] for r in rows))
    # entropy rows first within a scheme, as in the usual comparison tables
    divs = sorted(dict.fromkeys(r["divergence"] for r in rows), key=lambda d: (d != "kl", d))
    cell = {(r["divergence"], r["scheme"], r["split"]): r for r in rows}
    methods = [(d, s) for s in schemes for d in divs if any((d, s, sp) in cell for sp in splits)]
    best = {}
    for sp in splits:
        vals = [cell[(d, s, sp)]["sd"] for d, s in methods if (d, s, sp) in cell]
        best[sp] = min(vals) if vals else None

    header = ["Method"] + [f"{sp} {h}" for sp in splits for h in (metric_name, "SD")]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for d, s in methods:
        out = [f"{DIVERGENCE_NAMES.get(d, d)}-{s}"]
        for sp in splits:
            r = cell.get((d, s, sp))
            if r is None:
                out += ["-", "-"]
                continue
            sd = f"{r['sd']:.4f}"
            out += [f"{r['metric_primary']:.4f}", f"**{sd}**" if r["sd"] == best[sp] else sd]
        lines.append("| " + " | ".join(out) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(results_path, output=None, metric_name: str = "F1") -> str:
    text = format_report(read_results(results_path), metric_name)
    if output is not None:
        write_text_atomic(output, text)
    return text


def cmd_run(cfg: ExperimentConfig) -> str:
    cmd_gen_data(cfg)
    cmd_train_local(cfg)
    cmd_estimate_bias(cfg)
    cmd_distill(cfg)
    cmd_evaluate(cfg)
    return cmd_report(cfg.out / "results.csv", cfg.out / "report.md", _metric_label(cfg.task))


def _metric_label(task: str) -> str:
    return "Acc" if str(task).upper() == "NLI" else "F1"


# -- argument handling -------------------------------------------------------------

def _csv_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, help="experiment seed")
    p.add_argument("--output-dir", help="artifact directory (or set KNOT_OUTPUT_DIR)")
    p.add_argument("--task", help="SA, ERC, NLI or a label-space JSON file")
    p.add_argument("--epsilon", type=float, help="Sinkhorn regularization")
    p.add_argument("--epochs", type=int, help="distillation epochs")
    p.add_argument("--lr", type=float, help="distillation learning rate")
    p.add_argument("--batch-size", type=int, help="distillation batch size")
    p.add_argument("--schemes", type=_csv_list, help="comma-separated subset of A,D,U,E")
    p.add_argument("--divergences", type=_csv_list, help="comma-separated subset of sinkhorn,kl")
    p.add_argument("--n-noise", type=int, help="noise samples per bias estimate")
    lwf = p.add_mutually_exclusive_group()
    lwf.add_argument("--lwf", dest="lwf", action="store_true", default=None, help="add the LWF pseudo-teacher")
    lwf.add_argument("--no-lwf", dest="lwf", action="store_false", help="distill from local teachers only")
    p.add_argument("--timing", action="store_true", default=None, help="record wall times in results")


def build_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    cfg = ExperimentConfig.from_dict(doc)
    over = {}
    if os.environ.get("KNOT_OUTPUT_DIR"):
        over["output_dir"] = os.environ["KNOT_OUTPUT_DIR"]
    for attr, key in [("seed", "seed"), ("output_dir", "output_dir"), ("task", "task"),
                      ("schemes", "schemes"), ("divergences", "divergences"), ("n_noise", "n_noise_samples"),
                      ("lwf", "lwf"), ("timing", "timing")]:
        v = getattr(args, attr, None)
        if v is not None:
            over[key] = tuple(v) if isinstance(v, list) else v
    if args.epsilon is not None:
        over["sinkhorn"] = replace(cfg.sinkhorn, epsilon=args.epsilon)
    opt = {}
    for attr, key in [("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size")]:
        v = getattr(args, attr, None)
        if v is not None:
            opt[key] = v
    if opt:
        over["optimizer"] = replace(cfg.optimizer, **opt)
    return replace(cfg, **over) if over else cfg


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knot", description="Optimal-transport ensemble distillation workbench"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("gen-data", "generate the synthetic federation"),
        ("train-local", "train local teachers and the global model"),
        ("estimate-bias", "estimate probability biases from noise inputs"),
        ("distill", "distill one student per divergence x scheme"),
        ("evaluate", "evaluate students and write results.csv"),
        ("run", "all of the above plus the report"),
        ("show-config", "print the effective config as JSON"),
    ]:
        _add_common(sub.add_parser(name, help=help_))
    rep = sub.add_parser("report", help="format a results CSV as a markdown table")
    rep.add_argument("results", help="results CSV")
    rep.add_argument("--output", help="also write the table here")
    rep.add_argument("--metric-name", default="F1", help="column label for metric_primary")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "report":
            sys.stdout.write(cmd_report(args.results, args.output, args.metric_name))
            return 0
        cfg = build_config(args)
        if args.command == "show-config":
            print(json.dumps(cfg.to_dict(), indent=1))
        elif args.command == "gen-data":
            m = cmd_gen_data(cfg)
            print(f"wrote {len(m['files'])} splits to {cfg.out / 'data'}")
        elif args.command == "train-local":
            for r in cmd_train_local(cfg):
                print(f"{r['model']}: {_primary_name(cfg.task)}={r['metric_primary']:.4f} sd={r['sd']:.4f}")
        elif args.command == "estimate-bias":
            for name, b in cmd_estimate_bias(cfg).items():
                print(f"{name}: B={np.round(b.b.p, 4).tolist()}")
        elif args.command == "distill":
            for name in cmd_distill(cfg):
                print(f"student {name}")
        elif args.command == "evaluate":
            rows = cmd_evaluate(cfg)
            print(f"wrote {len(rows)} rows to {cfg.out / 'results.csv'}")
        elif args.command == "run":
            sys.stdout.write(cmd_run(cfg))
    except (PipelineError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"knot: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
