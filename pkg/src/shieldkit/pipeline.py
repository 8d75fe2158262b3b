"""Stage-by-stage pipeline over an output directory.

Every stage reads artifacts written by earlier stages and writes its own,
plus ``meta/<stage>.json`` recording the sha256 of each input and output and
of the config section it used. A stage whose recorded hashes still match is
skipped. An input whose bytes no longer match what its producer recorded is
reported as stale.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import attacks, criticality, data, engine, formats, placement, privacy, secure_sim
from .engine import TrainConfig
from .errors import Unsatisfiable


class ConfigError(ValueError):
    """Invalid configuration or missing/stale stage inputs."""


DEFAULT_CONFIG: dict = {
    "seed": 1,
    "output": "runs/default",
    "model": None,
    "dataset": {"num_classes": 4, "per_class": 400, "image_shape": [1, 16, 16]},
    "train": {"public_epochs": 30, "public_lr": 0.05, "finetune_epochs": 20, "finetune_lr": 0.01,
              "momentum": 0.5, "weight_decay": 5e-4, "batch_size": 64},
    "criticality": {"probes": 16, "one_shot": False},
    "selection": {"ms_threshold": "allshield+0.01", "m": 20, "baseline_epochs": 100, "full_epochs": 100,
                  "tau": 0.05, "compare_intrinsic_only": True},
    "privacy": {"bins": 64, "jsd_threshold": 0.1, "mia_threshold": "allshield+0.01"},
    "attack": {"ms_epochs": 100, "ms_lr": 0.01, "pessimistic": False},
    "placement": {"profile": None, "solver": "exact"},
    "simulate": {"samples": 64, "wallclock": False},
}

STAGES = ("gen-data", "train", "criticality", "select-tensors", "feature-privacy", "plan", "simulate", "attack",
          "report")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> dict:
    """Defaults < config file < ``key.path=value`` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = _merge(cfg, doc)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    validate_config(cfg)
    return cfg


def parse_threshold(spec, reference: float) -> float:
    """``"allshield+0.01"`` -> reference + 0.01; a bare number is absolute."""
    if isinstance(spec, (int, float)):
        return float(spec)
    text = str(spec).replace(" ", "")
    if text.startswith("allshield"):
        rest = text[len("allshield"):]
        return reference + (float(rest) if rest else 0.0)
    return float(text)


def validate_config(cfg: dict) -> None:
    ds = cfg["dataset"]
    if ds["num_classes"] < 2 or ds["per_class"] < 100:
        raise ConfigError("dataset needs >= 2 classes and >= 100 samples per class (query split is 1% of members)")
    if len(ds["image_shape"]) != 3:
        raise ConfigError("image_shape must be [C, H, W]")
    for key in ("ms_threshold",):
        try:
            parse_threshold(cfg["selection"][key], 0.0)
        except ValueError as exc:
            raise ConfigError(f"bad selection.{key}: {cfg['selection'][key]!r}") from exc
    try:
        parse_threshold(cfg["privacy"]["mia_threshold"], 0.0)
    except ValueError as exc:
        raise ConfigError(f"bad privacy.mia_threshold: {cfg['privacy']['mia_threshold']!r}") from exc
    if cfg["placement"]["solver"] not in ("exact", "relaxed"):
        raise ConfigError("placement.solver must be 'exact' or 'relaxed'")
    sel = cfg["selection"]
    if not (0 < sel["m"] <= sel["baseline_epochs"]) or sel["tau"] < 0:
        raise ConfigError("selection needs 0 < m <= baseline_epochs and tau >= 0")
    for p in (cfg["model"], cfg["placement"]["profile"]):
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"file not found: {p}")


# --------------------------------------------------------------------------
# artifact bookkeeping


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not serializable: {type(o)}")


class Stage:
    def __init__(self, name: str, inputs: Sequence[str], outputs: Sequence[str], sections: Sequence[str],
                 fn: Callable[["Run"], None]):
        self.name, self.inputs, self.outputs, self.sections, self.fn = name, list(inputs), list(outputs), list(sections), fn


class Run:
    def __init__(self, cfg: dict, out: Optional[str] = None, log: Callable[[str], None] = print):
        self.cfg = cfg
        self.out = Path(out or cfg["output"])
        self.log = log

    def path(self, name: str) -> Path:
        return self.out / name

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text)

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, dump_json(obj))

    def read_json(self, name: str):
        return json.loads(self.path(name).read_text())

    # ---- loaders shared by stages
    def graph(self) -> engine.ModelGraph:
        return formats.load_model_spec(self.path("model.json"))

    def bundle(self) -> data.DatasetBundle:
        return formats.load_bundle(self.path("dataset.skd"))

    def checkpoint(self, which: str) -> data.Checkpoint:
        return formats.load_checkpoint(self.path(f"{which}.ckpt"))

    def section_hash(self, sections: Sequence[str]) -> str:
        part = {s: self.cfg[s] for s in sections}
        return hashlib.sha256(json.dumps(part, sort_keys=True).encode()).hexdigest()


def _producers() -> Dict[str, str]:
    return {o: s.name for s in PIPELINE.values() for o in s.outputs}


def check_inputs(run: Run, stage: Stage) -> Dict[str, str]:
    producers = _producers()
    hashes = {}
    for name in stage.inputs:
        p = run.path(name)
        if not p.is_file():
            raise ConfigError(f"stage {stage.name}: missing input {name} (run stage {producers.get(name, '?')} first)")
        h = sha256_file(p)
        meta_path = run.path(f"meta/{producers[name]}.json")
        if meta_path.is_file():
            recorded = json.loads(meta_path.read_text())["outputs"].get(name)
            if recorded is not None and recorded != h:
                raise ConfigError(f"stage {stage.name}: input {name} is stale: sha256 {h[:12]} does not match "
                                  f"{recorded[:12]} recorded by stage {producers[name]}")
        hashes[name] = h
    return hashes


def run_stage(run: Run, name: str, force: bool = False) -> bool:
    """Run one stage; returns False when skipped because nothing changed."""
    stage = PIPELINE[name]
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "meta").mkdir(exist_ok=True)
    inputs = check_inputs(run, stage)
    cfg_hash = run.section_hash(stage.sections)
    meta_path = run.path(f"meta/{name}.json")
    if not force and meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        if (meta.get("inputs") == inputs and meta.get("config") == cfg_hash
                and all(run.path(o).is_file() and sha256_file(run.path(o)) == h for o, h in meta["outputs"].items())):
            run.log(f"[{name}] up to date")
            return False
    run.log(f"[{name}] running")
    stage.fn(run)
    outputs = {o: sha256_file(run.path(o)) for o in stage.outputs}
    run.write_json(f"meta/{name}.json", {"stage": name, "config": cfg_hash, "inputs": inputs, "outputs": outputs})
    return True


def run_all(run: Run, force: bool = False) -> None:
    for name in STAGES:
        run_stage(run, name, force)


# --------------------------------------------------------------------------
# stage bodies


def _gen_data(run: Run) -> None:
    ds = run.cfg["dataset"]
    bundle = data.generate_synthetic_dataset(run.cfg["seed"], ds["num_classes"], ds["per_class"], tuple(ds["image_shape"]))
    formats.save_bundle(bundle, run.path("dataset.skd"))


def _train(run: Run) -> None:
    cfg, t = run.cfg, run.cfg["train"]
    bundle = run.bundle()
    if cfg["model"]:
        graph = formats.load_model_spec(cfg["model"])
        if graph.input_shape != bundle.image_shape or graph.num_classes != bundle.num_classes:
            raise ConfigError("model spec does not match the dataset's image shape / class count")
    else:
        graph = engine.default_graph(bundle.num_classes, bundle.image_shape, seed=None)
    common = dict(momentum=t["momentum"], weight_decay=t["weight_decay"], batch_size=t["batch_size"])
    setup_cfg = data.SetupConfig(public_epochs=t["public_epochs"], public_train=TrainConfig(lr=t["public_lr"], **common),
                                 finetune_epochs=t["finetune_epochs"], finetune=TrainConfig(lr=t["finetune_lr"], **common))
    res = data.make_public_and_victim(cfg["seed"], graph, bundle, setup_cfg)
    formats.save_model_spec(graph, run.path("model.json"))
    formats.save_checkpoint(res.public, run.path("public.ckpt"))
    formats.save_checkpoint(res.victim, run.path("victim.ckpt"))
    formats.save_replay(res.replay, run.path("replay.bin"))
    vic, pub = res.victim.apply(graph), res.public.apply(graph)
    run.write_json("train.json", {
        "public_losses": res.public_losses, "victim_losses": res.victim_losses,
        "victim_train_accuracy": engine.accuracy(vic, *bundle.split("members")),
        "victim_test_accuracy": engine.accuracy(vic, *bundle.split("test")),
        "public_test_accuracy": engine.accuracy(pub, *bundle.split("test")),
    })


def _probes(bundle: data.DatasetBundle, count: int, seed: int) -> np.ndarray:
    q = bundle.x["query"]
    idx = np.random.default_rng(seed).permutation(len(q))[:count]
    return q[np.sort(idx)]


def _criticality(run: Run) -> None:
    c = run.cfg["criticality"]
    graph, bundle = run.graph(), run.bundle()
    vic, pub = run.checkpoint("victim").apply(graph), run.checkpoint("public").apply(graph)
    probes = _probes(bundle, c["probes"], run.cfg["seed"])
    if c["one_shot"]:
        replay = criticality.one_shot_replay(vic, pub, probes, engine.predict(vic, probes).argmax(axis=1))
    else:
        replay = formats.load_replay(run.path("replay.bin"))
    snap = {"seed": run.cfg["seed"]}
    full = criticality.criticality_scores(vic, pub, replay, probes, config=snap)
    base = criticality.criticality_scores(vic, pub, replay, probes, intrinsic_only=True, config=snap)
    run.write_json("criticality.json", {"report": full.to_dict(), "intrinsic_only": base.to_dict()})


def _ms_simulator(run: Run, graph, bundle) -> attacks.MSSimulator:
    a = run.cfg["attack"]
    cfg = TrainConfig(lr=a["ms_lr"], momentum=run.cfg["train"]["momentum"], weight_decay=run.cfg["train"]["weight_decay"],
                      batch_size=run.cfg["train"]["batch_size"])
    return attacks.MSSimulator(graph, run.checkpoint("public"), run.checkpoint("victim"), bundle, cfg, run.cfg["seed"])


def _select(run: Run) -> None:
    s = run.cfg["selection"]
    graph, bundle = run.graph(), run.bundle()
    doc = run.read_json("criticality.json")
    ms = _ms_simulator(run, graph, bundle)
    all_shield = ms(graph.linear_ids, s["baseline_epochs"]).accuracy
    threshold = parse_threshold(s["ms_threshold"], all_shield)
    sc = criticality.SelectionConfig(s["m"], s["baseline_epochs"], s["full_epochs"], s["tau"])
    vic = run.checkpoint("victim").apply(graph)
    out = {"threshold": threshold, "all_shield_accuracy": all_shield}
    for key, report in (("selection", doc["report"]), ("intrinsic_only", doc["intrinsic_only"])):
        if key == "intrinsic_only" and not s["compare_intrinsic_only"]:
            continue
        res = criticality.select_critical_tensors(criticality.CriticalityReport.from_dict(report), ms, threshold, sc)
        d = res.to_dict()
        d["param_count"] = sum(vic.param_count(t) for t in res.selected)
        out[key] = d
    out["total_params"] = vic.total_params()
    if "intrinsic_only" in out and out["intrinsic_only"]["param_count"]:
        out["param_ratio"] = out["selection"]["param_count"] / out["intrinsic_only"]["param_count"]
    run.write_json("selection.json", out)


def _features(run: Run) -> None:
    p = run.cfg["privacy"]
    graph, bundle = run.graph(), run.bundle()
    vic_ck = run.checkpoint("victim")
    vic = vic_ck.apply(graph)
    selected = run.read_json("selection.json")["selection"]["selected"]
    ms = _ms_simulator(run, graph, bundle)
    surrogate = ms(selected, run.cfg["attack"]["ms_epochs"]).surrogate
    scores = privacy.feature_scores(vic, bundle.split("members"), bundle.split("nonmembers"), bins=p["bins"])
    mia = attacks.MIASimulator(graph, surrogate, vic_ck, bundle, run.cfg["seed"])
    mask_all = mia(graph.linear_ids)
    threshold = parse_threshold(p["mia_threshold"], mask_all)
    sel = privacy.select_masked_features(scores, p["jsd_threshold"], mia, threshold)
    run.write_json("features.json", {
        "scores": [vars(s) | {"masked": s.feature_id in sel.masked} for s in scores],
        "selection": sel.to_dict(), "mask_all_accuracy": mask_all, "threshold": threshold,
    })


def _profile(run: Run, graph) -> placement.HardwareProfile:
    src = run.cfg["placement"]["profile"]
    if src:
        prof = placement.HardwareProfile.load(src)
    else:
        prof = placement.synthetic_profile(graph, seed=run.cfg["seed"])
    missing = set(graph.linear_ids) - set(prof.ids)
    if missing:
        raise ConfigError(f"hardware profile lacks tensors {sorted(missing)}")
    return prof


def _plan(run: Run) -> None:
    graph = run.graph()
    profile = _profile(run, graph)
    profile.save(run.path("profile.json"))
    critical = run.read_json("selection.json")["selection"]["selected"]
    masked = run.read_json("features.json")["selection"]["masked"]
    units = placement.chain_units(graph)
    exact = placement.plan_exact(profile, critical, masked, units)
    relaxed = placement.plan_relaxed(profile, critical, masked, units)
    chosen = exact if run.cfg["placement"]["solver"] == "exact" else relaxed
    violations = placement.validate_plan(chosen, critical, masked, profile)
    if violations:
        raise ConfigError(f"plan violates {violations[0].rule} at {violations[0].unit}")
    run.write_json("plan.json", {
        "solver": run.cfg["placement"]["solver"], "plan": chosen.to_dict(),
        "exact_objective": exact.predicted_latency, "relaxed_objective": relaxed.predicted_latency,
        "gap": relaxed.predicted_latency - exact.predicted_latency,
        "relaxed_options": {k: v.name for k, v in relaxed.options.items()},
        "switches": placement.switch_count(chosen),
    })


def _load_plan(run: Run) -> placement.PlacementPlan:
    return placement.PlacementPlan.from_dict(run.read_json("plan.json")["plan"])


def _simulate(run: Run) -> None:
    sim = run.cfg["simulate"]
    graph, bundle = run.graph(), run.bundle()
    vic = run.checkpoint("victim").apply(graph)
    plan = _load_plan(run)
    profile = placement.HardwareProfile.load(run.path("profile.json"))
    keys = secure_sim.keygen(plan, vic, run.cfg["seed"])
    x = bundle.x["test"][:sim["samples"]]
    res = secure_sim.run_secure_inference(vic, plan, keys, plan.masked, profile, x,
                                          secure_sim.PadSource(run.cfg["seed"]), wallclock=sim["wallclock"])
    native = secure_sim.native_logits(vic, x)
    rel = float(np.max(np.abs(res.logits - native)) / max(np.max(np.abs(native)), 1e-300))
    # wall-clock fields would break byte-for-byte reproducibility, so they stay out of the artifact
    trace = secure_sim.ExecutionTrace([secure_sim.TraceEvent(e.unit_id, e.world, e.category, e.seconds)
                                       for e in res.trace.events])
    trace.save(run.path("trace.jsonl"))
    out = {
        "samples": int(len(x)), "max_relative_error": rel,
        "prediction_agreement": float(np.mean(res.logits.argmax(1) == native.argmax(1))),
        "trace_cost": secure_sim.trace_cost(res.trace), "predicted_latency": plan.predicted_latency,
        "breakdown": secure_sim.breakdown(res.trace),
        "audit": {"clean": res.audit.clean, "plaintext_params": sorted(res.audit.plaintext_params),
                  "exposed_features": sorted(res.audit.exposed_features), "violations": res.audit.violations},
    }
    if sim["wallclock"]:
        out["wall_seconds"] = math.fsum(e.wall or 0.0 for e in res.trace.events)
    run.write_json("simulate.json", out)


def _attack(run: Run) -> None:
    a = run.cfg["attack"]
    graph, bundle = run.graph(), run.bundle()
    plan = _load_plan(run)
    profile = placement.HardwareProfile.load(run.path("profile.json"))
    rep = attacks.evaluate_defense(plan, graph, run.checkpoint("public"), run.checkpoint("victim"), bundle, profile,
                                   seed=run.cfg["seed"], ms_epochs=a["ms_epochs"], pessimistic=a["pessimistic"],
                                   ms_config=TrainConfig(lr=a["ms_lr"], momentum=run.cfg["train"]["momentum"],
                                                         weight_decay=run.cfg["train"]["weight_decay"],
                                                         batch_size=run.cfg["train"]["batch_size"]))
    run.write_json("defense.json", rep.to_dict())


# --------------------------------------------------------------------------
# report


def _table(headers: List[str], rows: List[list]) -> str:
    cells = [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(headers)]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    sep = "  ".join("-" * w for w in widths)
    body = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join([line, sep, *body]) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if v is None:
        return "-"
    return str(v)


def _csv(headers: List[str], rows: List[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(headers)
    w.writerows([[("" if c is None else repr(c) if isinstance(c, float) else c) for c in r] for r in rows])
    return buf.getvalue()


def report_tables(run: Run) -> Dict[str, Tuple[List[str], List[list]]]:
    crit = run.read_json("criticality.json")
    sel = run.read_json("selection.json")
    feats = run.read_json("features.json")
    plan_doc = run.read_json("plan.json")
    sim = run.read_json("simulate.json")
    defense = run.read_json("defense.json")
    selected = set(sel["selection"]["selected"])
    base_rank = [e["tensor_id"] for e in crit["intrinsic_only"]["entries"]]
    tables = {}
    tables["criticality"] = (
        ["rank", "tensor", "params", "intrinsic", "transition", "score", "intrinsic_only_rank", "shielded"],
        [[i + 1, e["tensor_id"], e["param_count"], e["intrinsic"], e["transition"], e["score"],
          base_rank.index(e["tensor_id"]) + 1, e["tensor_id"] in selected]
         for i, e in enumerate(crit["report"]["entries"])])
    tables["features"] = (
        ["feature", "jsd_activation", "jsd_gradient", "score", "masked"],
        [[s["feature_id"], s["jsd_act"], s["jsd_grad"], s["score"], s["masked"]] for s in feats["scores"]])
    plan = plan_doc["plan"]
    tables["plan"] = (
        ["unit", "kind", "option", "world", "relaxed_option"],
        [[u, "linear" if u in plan["options"] else "non-linear", plan["options"].get(u), plan["worlds"][u],
          plan_doc["relaxed_options"].get(u)] for u in plan["sequence"]])
    b = sim["breakdown"]
    tables["breakdown"] = (
        ["Cal.", "Comm.", "Mask.", "Deobf.", "Total", "predicted", "exact_objective", "relaxed_objective", "gap"],
        [[b["Cal."], b["Comm."], b["Mask."], b["Deobf."], b["Total"], sim["predicted_latency"],
          plan_doc["exact_objective"], plan_doc["relaxed_objective"], plan_doc["gap"]]])
    tables["defense"] = (
        ["config", "ms_accuracy", "mia_accuracy", "mia_accuracy_plan", "leaked_fraction", "predicted_latency",
         "leaked_tensors"],
        [[r["name"], r["ms_accuracy"], r["mia_accuracy"], r["mia_accuracy_plan"], r["leaked_fraction"],
          r["predicted_latency"], " ".join(r["leaked"]) or "-"] for r in defense["rows"]])
    return tables


def _report(run: Run) -> None:
    tables = report_tables(run)
    sel = run.read_json("selection.json")
    titles = {"criticality": "Tensor criticality ranking", "features": "Feature membership divergence",
              "plan": f"Placement plan ({run.read_json('plan.json')['solver']} solver)",
              "breakdown": "Simulated latency breakdown (s)", "defense": "Defense vs attacks"}
    parts = []
    for key, (headers, rows) in tables.items():
        parts.append(f"== {titles[key]} ==\n" + _table(headers, rows))
        run.write_text(f"{key}.csv", _csv(headers, rows))
    s = sel["selection"]
    summary = [f"MS threshold {sel['threshold']:.4f} (all-shield {sel['all_shield_accuracy']:.4f})",
               f"selected {s['selected']} -> {s['param_count']} of {sel['total_params']} parameters shielded"]
    if "intrinsic_only" in sel:
        io_ = sel["intrinsic_only"]
        summary.append(f"intrinsic-only ranking selects {io_['selected']} -> {io_['param_count']} parameters"
                       + (f" (ratio {sel['param_ratio']:.4f})" if "param_ratio" in sel else ""))
    parts.append("== Selection ==\n" + "\n".join(summary) + "\n")
    run.write_text("report.txt", "\n".join(parts))


PIPELINE: Dict[str, Stage] = {s.name: s for s in [
    Stage("gen-data", [], ["dataset.skd"], ["seed", "dataset"], _gen_data),
    Stage("train", ["dataset.skd"], ["model.json", "public.ckpt", "victim.ckpt", "replay.bin", "train.json"],
          ["seed", "model", "train"], _train),
    Stage("criticality", ["model.json", "dataset.skd", "public.ckpt", "victim.ckpt", "replay.bin"],
          ["criticality.json"], ["seed", "criticality"], _criticality),
    Stage("select-tensors", ["model.json", "dataset.skd", "public.ckpt", "victim.ckpt", "criticality.json"],
          ["selection.json"], ["seed", "selection", "attack", "train"], _select),
    Stage("feature-privacy", ["model.json", "dataset.skd", "public.ckpt", "victim.ckpt", "selection.json"],
          ["features.json"], ["seed", "privacy", "attack", "train"], _features),
    Stage("plan", ["model.json", "selection.json", "features.json"], ["profile.json", "plan.json"],
          ["seed", "placement"], _plan),
    Stage("simulate", ["model.json", "dataset.skd", "victim.ckpt", "plan.json", "profile.json"],
          ["trace.jsonl", "simulate.json"], ["seed", "simulate"], _simulate),
    Stage("attack", ["model.json", "dataset.skd", "public.ckpt", "victim.ckpt", "plan.json", "profile.json"],
          ["defense.json"], ["seed", "attack", "train"], _attack),
    Stage("report", ["criticality.json", "selection.json", "features.json", "plan.json", "simulate.json",
                     "defense.json"],
          ["report.txt", "criticality.csv", "features.csv", "plan.csv", "breakdown.csv", "defense.csv"], [], _report),
]}


__all__ = ["ConfigError", "DEFAULT_CONFIG", "STAGES", "PIPELINE", "Run", "load_config", "parse_threshold",
           "run_stage", "run_all", "report_tables", "Unsatisfiable"]
