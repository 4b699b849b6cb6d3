"""``cadlab`` command line: one subcommand per experiment step.

Every subcommand reads a TOML config and writes into the run's output
directory. Exit status is 0 on success, 2 for configuration or input problems
and 3 for numeric failures.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import MCConfig, ObjectiveSpec, attribute
from .config import load_config, parse_keys, sub_seed
from .data import SyntheticDataset, draw_concept, gen_dataset, specs_from_config
from .datamodel import block_scope, compare_to_first_order, fit_datamodel, sample_masks, write_masks_csv
from .diffusion import Architecture, DenoiserModel, TrainConfig, build_schedule, sample, train
from .editing import NEGATIVE, POSITIVE, EditPlan, cad_amplify, cad_erase, scale_intervention
from .errors import CADError, ConfigError
from .evaluation import concept_rates, correlation_study, edit_report, layer_breakdown, ratio_sweep
from .persistence import load_checkpoint, read_json, save_checkpoint, save_map, save_mask, write_csv, write_json

COMMANDS = ("gen-data", "train", "sample", "attribute", "erase", "amplify", "scale-intervene",
            "correlate", "sweep", "datamodel", "report")


class Run:
    """Resolved config plus the file layout of one output directory."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out_dir"])
        self.specs = specs_from_config(cfg["data"])

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise ConfigError(f"{p} not found; run the step that produces it first")
        return p

    def seed(self, name: str) -> int:
        return sub_seed(self.cfg["seed"], name)

    def mc(self, n_samples: int | None = None) -> MCConfig:
        m = self.cfg["mc"]
        return MCConfig(n_samples or m["n_samples"], self.seed("attribute"), m["pool_size"])

    def model(self, name: str) -> DenoiserModel:
        return load_checkpoint(self.need(name))

    def write(self, name: str, payload: dict) -> None:
        write_json({"tool_version": __version__, "config": self.cfg, **payload}, self.path(name))

    def n_report(self) -> int:
        return int(self.cfg["report"]["n_per_concept"])


def cmd_gen_data(run: Run) -> None:
    d, h = run.cfg["data"], run.cfg["handicap"]
    n = int(d["n_per_concept"])
    run.out.mkdir(parents=True, exist_ok=True)
    gen_dataset(run.specs, n, run.seed("data")).to_csv(run.path("data.csv"))
    counts = [n] * len(run.specs)
    counts[h["concept"]] = int(h["n"])
    handicap = gen_dataset(run.specs, counts, run.seed("data.handicap"), {h["concept"]: float(h["contamination"])})
    handicap.to_csv(run.path("handicap.csv"))
    run.write("data.json", {"specs": [s.to_dict() for s in run.specs], "handicap_counts": counts})


def _train_one(run: Run, csv_name: str) -> tuple[DenoiserModel, list]:
    ds = SyntheticDataset.from_csv(run.need(csv_name))
    s, m, t = run.cfg["schedule"], run.cfg["model"], run.cfg["train"]
    schedule = build_schedule(s["T"], s["beta_min"], s["beta_max"])
    arch = Architecture(m["hidden"], m["emb"], len(run.specs), s["T"])
    init = DenoiserModel.initialize(arch, seed=run.seed("init"), schedule=schedule, emb_scale=m["emb_scale"])
    config = TrainConfig(t["epochs"], t["batch_size"], t["lr"], t["momentum"], t["cond_dropout"],
                         run.seed("train"), t["clip_norm"])
    return train(init, ds.X, ds.y, schedule, config)


def cmd_train(run: Run) -> None:
    base, base_loss = _train_one(run, "data.csv")
    save_checkpoint(base, run.path("base.ckpt"))
    hand, hand_loss = _train_one(run, "handicap.csv")
    save_checkpoint(hand, run.path("handicap.ckpt"))
    run.write("train.json", {"loss": {"base": base_loss, "handicap": hand_loss},
                             "fingerprint": {"base": base.fingerprint(), "handicap": hand.fingerprint()}})


def cmd_sample(run: Run) -> None:
    model = run.model("base.ckpt")
    n = run.n_report()
    rows = []
    for spec in run.specs:
        pts = sample(model, spec.concept, None, (run.seed("sample"), spec.concept), n)
        rows.extend((spec.concept, float(x), float(y)) for x, y in pts)
    write_csv(run.path("samples.csv"), ["concept_id", "x", "y"], rows,
              comment=f"cadlab {__version__}; {n} ancestral samples per concept from base.ckpt")
    run.write("sample.json", {"rates": concept_rates(model, run.specs, n, run.seed("sample"))})


def _reference(run: Run) -> np.ndarray:
    a = run.cfg["amplify"]
    spec = run.specs[a["target"]]
    return draw_concept(spec, int(a["n_reference"]), np.random.default_rng(run.seed("reference")))


def cmd_attribute(run: Run) -> None:
    mc = run.mc()
    base = run.model("base.ckpt")
    emap = attribute(base, ObjectiveSpec.erase(run.cfg["erase"]["target"]), mc)
    save_map(emap, run.path("erase_map.json"))
    hand = run.model("handicap.ckpt")
    amap = attribute(hand, ObjectiveSpec.amplify(run.cfg["amplify"]["target"], _reference(run)), mc)
    save_map(amap, run.path("amplify_map.json"))
    run.write("layers.json", {"erase": layer_breakdown(emap), "amplify": layer_breakdown(amap)})


def _plan(section: dict, sign: str) -> EditPlan:
    return EditPlan(sign=sign, ratio=float(section["ratio"]), row_cap=float(section["row_cap"]),
                    scope=parse_keys(section["scope"]), budget_mode=section.get("budget_mode", "global"),
                    col_cap=section.get("col_cap"))


def cmd_erase(run: Run) -> None:
    e = run.cfg["erase"]
    model = run.model("base.ckpt")
    mc = run.mc()
    edited, mask, _ = cad_erase(model, e["target"], None, _plan(e, POSITIVE), mc)
    save_checkpoint(edited, run.path("erased.ckpt"))
    save_mask(mask, run.path("erase_mask.json"))
    report = edit_report(model, edited, run.specs, run.n_report(), run.seed("report"), mask,
                         ObjectiveSpec.erase(e["target"]), mc, {"target": e["target"]})
    run.write("erase.json", {"report": report.to_dict()})


def cmd_amplify(run: Run) -> None:
    a = run.cfg["amplify"]
    model = run.model("handicap.ckpt")
    mc = run.mc()
    reference = _reference(run)
    edited, mask, _ = cad_amplify(model, a["target"], reference, _plan(a, NEGATIVE), mc)
    save_checkpoint(edited, run.path("amplified.ckpt"))
    save_mask(mask, run.path("amplify_mask.json"))
    report = edit_report(model, edited, run.specs, run.n_report(), run.seed("report"), mask,
                         ObjectiveSpec.amplify(a["target"], reference), mc, {"target": a["target"]})
    run.write("amplify.json", {"report": report.to_dict()})


def cmd_scale(run: Run) -> None:
    s = run.cfg["scale"]
    model = run.model("base.ckpt")
    amap = attribute(model, ObjectiveSpec.erase(s["target"]), run.mc())
    before = concept_rates(model, run.specs, run.n_report(), run.seed("report"))
    out = []
    for factor in s["factors"]:
        edited, mask = scale_intervention(model, amap, NEGATIVE, float(s["ratio"]), float(factor), float(s["row_cap"]),
                                          parse_keys(s["scope"]))
        report = edit_report(model, edited, run.specs, run.n_report(), run.seed("report"), mask, before=before,
                             config={"target": s["target"], "factor": float(factor)})
        out.append(report.to_dict())
    run.write("scale.json", {"reports": out})


def cmd_correlate(run: Run) -> None:
    c = run.cfg["correlate"]
    model = run.model("base.ckpt")
    rep = correlation_study(model, ObjectiveSpec.erase(c["target"]), int(c["n_trials"]), float(c["fraction"]),
                            run.mc(int(c["n_samples"])), run.seed("correlate"))
    run.write("correlation.json", {"report": rep.to_dict()})
    write_csv(run.path("correlation.csv"), ["trial", "predicted", "actual"], rep.rows(),
              comment=f"cadlab {__version__}; predicted = sum of first-order scores, "
                      f"actual = J(w) - J(w ablated); r = {rep.r!r}")


def cmd_sweep(run: Run) -> None:
    s, e = run.cfg["sweep"], run.cfg["erase"]
    model = run.model("base.ckpt")
    results = ratio_sweep(model, s["target"], s["ratios"], _plan(e, POSITIVE), run.mc(), run.seed("report"),
                          run.specs, run.n_report())
    rows = [(ratio, len(mask), rep.after[s["target"]], rep.others_drop(s["target"])) for ratio, mask, rep in results]
    run.write("sweep.json", {"reports": [rep.to_dict() for _, _, rep in results]})
    write_csv(run.path("sweep.csv"), ["ratio", "mask_size", "target_rate", "others_drop"], rows,
              comment=f"cadlab {__version__}; target concept {s['target']}, one attribution map for all ratios")


def cmd_datamodel(run: Run) -> None:
    d = run.cfg["datamodel"]
    model = run.model("base.ckpt")
    mc = run.mc()
    objective = ObjectiveSpec.erase(d["target"])
    (key,) = parse_keys([d["layer"]])
    scope = block_scope(model, key, range(int(d["rows"])))
    samples = sample_masks(model, objective, scope, int(d["n"]), float(d["keep_prob"]), mc, run.seed("masks"))
    write_masks_csv(samples, run.path("masks.csv"))
    dm = fit_datamodel(samples, float(d["lam"]))
    agreement = compare_to_first_order(dm, attribute(model, objective, mc), scope)
    run.write("datamodel.json", {"datamodel": dm.to_dict(), "agreement": agreement, "scope_size": len(scope)})


def cmd_report(run: Run) -> None:
    """Collect the headline numbers of whatever steps have been run."""
    summary: dict = {}
    if run.path("erase.json").exists():
        rep = read_json(run.path("erase.json"))["report"]
        t = str(run.cfg["erase"]["target"])
        summary["erase"] = {"purity": rep["before"], "target_after": rep["after"][t], "mask_size": rep["mask_size"],
                            "others_drop": _others_drop(rep, t)}
    if run.path("amplify.json").exists():
        rep = read_json(run.path("amplify.json"))["report"]
        t = str(run.cfg["amplify"]["target"])
        summary["amplify"] = {"target_before": rep["before"][t], "target_after": rep["after"][t],
                              "mask_size": rep["mask_size"], "others_drop": _others_drop(rep, t)}
    if run.path("correlation.json").exists():
        summary["correlation_r"] = read_json(run.path("correlation.json"))["report"]["r"]
    if run.path("datamodel.json").exists():
        summary["datamodel"] = read_json(run.path("datamodel.json"))["agreement"]
    if not summary:
        raise ConfigError(f"no step reports found in {run.out}")
    run.write("report.json", {"summary": summary})


def _others_drop(rep: dict, target: str) -> float:
    others = [c for c in rep["before"] if c != target]
    return float(np.mean([rep["before"][c] - rep["after"][c] for c in others]))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "attribute": cmd_attribute,
    "erase": cmd_erase,
    "amplify": cmd_amplify,
    "scale-intervene": cmd_scale,
    "correlate": cmd_correlate,
    "sweep": cmd_sweep,
    "datamodel": cmd_datamodel,
    "report": cmd_report,
}


HELP = {
    "gen-data": "write the balanced and handicapped datasets",
    "train": "train the base and handicapped denoisers",
    "sample": "draw samples per concept from the base model",
    "attribute": "compute erase and amplify attribution maps",
    "erase": "ablate the top positive components for the erase target",
    "amplify": "ablate the top negative components for the handicapped concept",
    "scale-intervene": "rescale erase-map negative components by each factor",
    "correlate": "predicted vs measured objective change over random ablations",
    "sweep": "erase at every ratio from a single attribution map",
    "datamodel": "fit the ridge datamodel on random masks and compare to scores",
    "report": "summarize the step reports found in the output directory",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cadlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cadlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("config", help="TOML config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a config value, e.g. erase.ratio=0.002")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.seed, args.out, args.override)
        run = Run(cfg)
        run.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](run)
    except CADError as exc:
        print(f"cadlab {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
