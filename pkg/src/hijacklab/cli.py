"""Command-line entry point.

Every command is a thin, deterministic wrapper over one pipeline operation:
it resolves its configuration (JSON config file, overridden by flags),
derives all randomness from --seed, writes its artifacts plus a manifest
into --out, and exits 0 on success, 2 on validation errors, 3 on runtime
failures. Nothing is read from environment variables and no timestamps are
written, so re-running a command with the same manifest reproduces its
outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, attackopt, detector, harness, imaging, losses, mot, stage1
from .attackopt import AttackConfig
from .geometry import Vec2
from .imaging import EotParams
from .losses import LOSS_LOG_HEADER, LossHyper, breakdown_row
from .mot import MotConfig
from .stage1 import Stage1Config
from .util import canonical_json, config_hash, to_jsonable

_DIRECTIONS = {"l2r": Vec2(2.0, 0.0), "r2l": Vec2(-2.0, 0.0)}


def _fail(msg: str, code: int) -> "NoReturn":  # noqa: F821
    print(f"error: {msg}", file=sys.stderr)
    raise SystemExit(code)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        _fail(f"config file not found: {path}", 2)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        _fail(f"malformed config file: {e}", 2)


def _build(cls, section: dict, **overrides):
    known = {f.name for f in dataclasses.fields(cls)}
    bad = set(section) - known
    if bad:
        _fail(f"unknown {cls.__name__} fields: {sorted(bad)}", 2)
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def _attack_config(cfg: dict, args) -> AttackConfig:
    section = dict(cfg.get("attack", {}))
    hyper = _build(LossHyper, section.pop("hyper", harness.BENCH_HYPER))
    eot = dict(section.pop("eot", harness.BENCH_EOT))
    eot["contrast"] = tuple(eot.get("contrast", (0.9, 1.1)))
    return _build(
        AttackConfig,
        section,
        hyper=hyper,
        eot=EotParams(**eot),
        iterations=args.iters,
        optimizer=getattr(args, "optimizer", None),
        eta=getattr(args, "eta", None),
        seed=args.seed,
    )


def _mot_config(cfg: dict, args) -> MotConfig:
    return _build(
        MotConfig,
        cfg.get("mot", {}),
        cov=getattr(args, "mot_cov", None),
        confirm_hits=getattr(args, "mot_h", None),
        max_misses=getattr(args, "mot_r", None),
        t_iou=getattr(args, "t_iou", None),
    )


def _stage1_config(cfg: dict, sc: harness.Scenario) -> Stage1Config:
    section = dict(cfg.get("stage1", {}))
    hyper = _build(LossHyper, section.pop("hyper", harness.BENCH_HYPER))
    section.setdefault("window_h", sc.patch_h)
    section.setdefault("window_w", sc.patch_w)
    return _build(Stage1Config, section, hyper=hyper)


def _scene_spec(cfg: dict) -> harness.SceneSpec:
    section = dict(cfg.get("scene", {}))
    for key in ("target_w", "target_h", "target_speed"):
        if key in section:
            section[key] = tuple(section[key])
    return _build(harness.SceneSpec, section)


def _write_manifest(out: Path, command: str, args, resolved: dict, inputs: dict, outputs: list[str]):
    doc = {
        "command": command,
        "config": to_jsonable(resolved),
        "config_hash": config_hash(resolved),
        "seed": args.seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_weights(args):
    if not args.weights:
        _fail("--weights is required for this command", 2)
    p = Path(args.weights)
    if not p.is_file():
        _fail(f"weights file not found: {p}", 2)
    return detector.load_weights(p)


def _load_scenarios(cfg: dict, args) -> list[harness.Scenario]:
    if getattr(args, "scenario", None):
        p = Path(args.scenario)
        if not (p / "scenario.json").is_file():
            _fail(f"not a scenario directory: {p}", 2)
        return [harness.load_scenario(p)]
    bench = cfg.get("benchmark", {})
    spec = _scene_spec(cfg)
    return harness.make_benchmark(
        n=int(bench.get("n", 20)), seed=int(bench.get("seed", 1000)), spec=spec
    )


def _write_report(path: Path, rows: list[harness.EvalRow]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "asr", "mean_frames_to_success", "successes", "total"])
        for r in rows:
            writer.writerow([r.label, f"{r.asr:.4f}", "" if r.mean_frames is None else f"{r.mean_frames:.3f}", r.successes, r.total])


def _write_loss_log(path: Path, log):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_LOG_HEADER)
        for i, b in enumerate(log):
            writer.writerow(breakdown_row(i, b))


def _gray_to_image(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    return np.repeat(scaled[:, :, None], 3, axis=2)


# -- commands -------------------------------------------------------------------


def cmd_detector_train(args):
    cfg_doc = _load_config(args.config)
    out = _out_dir(args)
    spec = _scene_spec(cfg_doc)
    train_cfg = cfg_doc.get("train", {})
    det_cfg = detector.DetectorConfig.from_dict(cfg_doc["detector"]) if "detector" in cfg_doc else detector.DetectorConfig()
    corpus = harness.make_corpus(
        n_scenes=int(train_cfg.get("n_scenes", 100)),
        seed=int(train_cfg.get("corpus_seed", 5000)),
        spec=spec,
    )
    weights = detector.train(
        corpus, det_cfg, seed=args.seed,
        epochs=int(train_cfg.get("epochs", 120)),
        lr=float(train_cfg.get("lr", 3e-3)),
    )
    detector.save_weights(out / "weights.cldw", weights, det_cfg)
    ap = harness.ap_at_05(corpus, weights, det_cfg)
    (out / "train.json").write_text(json.dumps({"ap_at_05": ap, "corpus_size": len(corpus)}, indent=2) + "\n")
    resolved = {"detector": det_cfg.to_dict(), "train": train_cfg, "scene": to_jsonable(spec)}
    _write_manifest(out, "detector-train", args, resolved, {}, ["weights.cldw", "train.json"])
    print(f"AP@0.5 on the training corpus: {ap:.3f}")
    return 0


def cmd_detector_check(args):
    weights, det_cfg = _load_weights(args)
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(0.15, 0.85, (det_cfg.h, det_cfg.w, 3))
    report = harness.gradient_fidelity_report(x, weights, det_cfg, n_pixels=32, seed=args.seed)
    out = _out_dir(args)
    (out / "gradcheck.json").write_text(json.dumps(to_jsonable(report), indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "detector-check", args, {"weights": _file_hash(args.weights)}, {"weights": str(args.weights)}, ["gradcheck.json"])
    for name, rep in report.items():
        print(f"{name}: max_rel_err={rep['max_rel_err']:.2e} pass={bool(rep['pass'])}")
    return 0 if all(rep["pass"] for rep in report.values()) else 3


def cmd_scene_gen(args):
    cfg_doc = _load_config(args.config)
    out = _out_dir(args)
    spec = _scene_spec(cfg_doc)
    goal = (args.goal or "move-out").replace("-", "_")
    direction = _DIRECTIONS[args.direction] if args.direction else None
    sc = harness.gen_scene(spec, args.seed, goal=goal, direction=direction)
    harness.save_scenario(out, sc)
    resolved = {"scene": to_jsonable(spec), "goal": goal, "direction": to_jsonable(sc.v)}
    outputs = ["scenario.json"] + [f"frames/{i:03d}.clim" for i in range(sc.n_frames)]
    _write_manifest(out, "scene-gen", args, resolved, {}, outputs)
    print(f"scenario with {sc.n_frames} frames written to {out}")
    return 0


def cmd_stage1(args):
    cfg_doc = _load_config(args.config)
    out = _out_dir(args)
    weights, det_cfg = _load_weights(args)
    scenarios = _load_scenarios(cfg_doc, args)
    sc = scenarios[0]
    s1 = _stage1_config(cfg_doc, sc)
    f = sc.t_start
    (x, y), diag = stage1.preselect_location(
        sc.frames[f], sc.target_boxes[f], sc.direction, sc.regions[f], s1, weights, det_cfg
    )
    imaging.write_image(out / "mask.ppm", _gray_to_image(diag.mask))
    imaging.write_image(out / "scores.ppm", _gray_to_image(diag.scores))
    doc = {
        "location": [x, y],
        "window": [s1.window_h, s1.window_w],
        "loss_log": diag.loss_log,
        "weights_hash": _file_hash(args.weights),
    }
    (out / "location.json").write_text(json.dumps(to_jsonable(doc), indent=2, sort_keys=True) + "\n")
    resolved = {"stage1": to_jsonable(s1)}
    _write_manifest(
        out, "stage1", args, resolved,
        {"weights": str(args.weights), "scenario": str(args.scenario or "benchmark[0]")},
        ["mask.ppm", "scores.ppm", "location.json"],
    )
    print(f"selected window top-left: ({x}, {y})")
    return 0


def cmd_attack_gen(args):
    cfg_doc = _load_config(args.config)
    out = _out_dir(args)
    weights, det_cfg = _load_weights(args)
    sc = _load_scenarios(cfg_doc, args)[0]
    atk = _attack_config(cfg_doc, args)
    location = cfg_doc.get("location", "stage1")
    if isinstance(location, list):
        location = tuple(location)
    s1 = _stage1_config(cfg_doc, sc)
    x, y = harness.choose_location(sc, location, weights, det_cfg, s1, seed=atk.seed)
    atk = dataclasses.replace(atk, patch_h=sc.patch_h, patch_w=sc.patch_w, patch_x=x, patch_y=y)
    frames = sc.frames[sc.t_start : sc.t_end + 1]
    boxes = sc.target_boxes[sc.t_start : sc.t_end + 1]
    if atk.dual:
        result = attackopt.dual_generate(frames, boxes, sc.direction, atk, weights, det_cfg)
    else:
        result = attackopt.generate_patch(frames, boxes, sc.direction, atk, weights, det_cfg)
    imaging.write_image(out / "patch.clim", result.patch.pixels.astype(np.float32).astype(np.float64))
    imaging.write_image(out / "patch.ppm", result.patch.pixels)
    _write_loss_log(out / "loss_log.csv", result.log)
    outputs = ["patch.clim", "patch.ppm", "loss_log.csv", "attack.json"]
    if result.second_patch is not None:
        imaging.write_image(out / "patch2.clim", result.second_patch.pixels.astype(np.float32).astype(np.float64))
        _write_loss_log(out / "loss_log2.csv", result.second_log)
        outputs += ["patch2.clim", "loss_log2.csv"]
    resolved = {"attack": to_jsonable(atk), "location": [x, y]}
    meta = {
        "location": [x, y],
        "size": [atk.patch_h, atk.patch_w],
        "seed": args.seed,
        "config_hash": config_hash(resolved),
        "weights_hash": _file_hash(args.weights),
        "terminal": result.terminal,
        "iterations": result.iterations,
    }
    if result.second_patch is not None:
        meta["second_location"] = [result.second_patch.x, result.second_patch.y]
    (out / "attack.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_manifest(
        out, "attack-gen", args, resolved,
        {"weights": str(args.weights), "scenario": str(args.scenario or "benchmark[0]")},
        outputs,
    )
    print(f"patch at ({x}, {y}), terminal condition: {result.terminal}")
    return 0


def _eval_command(args, *, optimizer: str | None, location="stage1", label: str):
    cfg_doc = _load_config(args.config)
    out = _out_dir(args)
    weights, det_cfg = _load_weights(args)
    scenarios = _load_scenarios(cfg_doc, args)
    mot_cfg = _mot_config(cfg_doc, args)
    rows = [harness.summarize([harness.run_benign(sc, weights, det_cfg, mot_cfg) for sc in scenarios], "benign")]
    resolved = {"mot": to_jsonable(mot_cfg), "label": label}
    if optimizer is not None:
        atk = _attack_config(cfg_doc, args)
        atk = dataclasses.replace(atk, optimizer=optimizer)
        s1 = _stage1_config(cfg_doc, scenarios[0]) if location == "stage1" else None
        row, results = harness.evaluate(
            scenarios, weights, det_cfg, mot_cfg, atk,
            location=location, stage1_cfg=s1, jobs=args.jobs, label=label,
        )
        rows.append(row)
        resolved["attack"] = to_jsonable(atk)
        terminal = sum(1 for _, res, _ in results if res.terminal)
        (out / "details.json").write_text(
            json.dumps(
                {
                    "terminal_rate": terminal / len(results),
                    "per_scenario": [
                        {
                            "seed": sc.seed,
                            "success": o.success,
                            "frames_to_success": o.frames_to_success,
                            "location": list(loc),
                            "terminal": res.terminal,
                        }
                        for sc, (o, res, loc) in zip(scenarios, results)
                    ],
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
    _write_report(out / "report.csv", rows)
    _write_manifest(
        out, label, args, resolved,
        {"weights": str(args.weights), "scenario": str(args.scenario or "benchmark")},
        ["report.csv"] + (["details.json"] if optimizer else []),
    )
    for r in rows:
        frames = "-" if r.mean_frames is None else f"{r.mean_frames:.2f}"
        print(f"{r.label}: ASR {100 * r.asr:.1f}% ({r.successes}/{r.total}), frames-to-success {frames}")
    return 0


def cmd_attack_eval(args):
    return _eval_command(args, optimizer=args.optimizer or "conditional", label="attack-eval")


def cmd_baseline_slrm(args):
    return _eval_command(args, optimizer="slrm", label="baseline-slrm")


def cmd_baseline_randloc(args):
    return _eval_command(args, optimizer=args.optimizer or "conditional", location="random", label="baseline-randloc")


def cmd_baseline_maxcap(args):
    cfg_doc = _load_config(args.config)
    out = _out_dir(args)
    scenarios = _load_scenarios(cfg_doc, args)
    mot_cfg = _mot_config(cfg_doc, args)
    outcomes = [harness.max_capability(sc, None, mot_cfg) for sc in scenarios]
    rows = [harness.summarize(outcomes, "max-capability")]
    _write_report(out / "report.csv", rows)
    _write_manifest(out, "baseline-maxcap", args, {"mot": to_jsonable(mot_cfg)}, {}, ["report.csv"])
    r = rows[0]
    print(f"max-capability: ASR {100 * r.asr:.1f}%, frames-to-success {r.mean_frames}")
    return 0


def cmd_defense_eval(args):
    cfg_doc = _load_config(args.config)
    out = _out_dir(args)
    weights, det_cfg = _load_weights(args)
    scenarios = _load_scenarios(cfg_doc, args)
    mot_cfg = _mot_config(cfg_doc, args)
    atk = _attack_config(cfg_doc, args)
    s1 = _stage1_config(cfg_doc, scenarios[0])
    if args.defense and args.defense != "none":
        defenses = [("none", 0.0), (args.defense, args.strength or 0.0)]
    else:
        defenses = [tuple(d) for d in cfg_doc.get("defenses", [["none", 0], ["bitdepth", 8], ["gauss", 0.05], ["median", 9]])]
    _, results = harness.evaluate(
        scenarios, weights, det_cfg, mot_cfg, atk, location="stage1", stage1_cfg=s1, jobs=args.jobs
    )
    patches = [res.patch for _, res, _ in results]
    spec = _scene_spec(cfg_doc)
    corpus = harness.make_corpus(
        n_scenes=int(cfg_doc.get("train", {}).get("n_scenes", 100)),
        seed=int(cfg_doc.get("train", {}).get("corpus_seed", 5000)),
        spec=spec,
    )
    rows = harness.defense_eval(scenarios, patches, corpus, weights, det_cfg, mot_cfg, defenses, seed=args.seed)
    with open(out / "defense.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["defense", "strength", "asr", "ap_at_05"])
        for r in rows:
            writer.writerow([r["defense"], r["strength"], f"{r['asr']:.4f}", f"{r['ap']:.4f}"])
    resolved = {"mot": to_jsonable(mot_cfg), "attack": to_jsonable(atk), "defenses": defenses}
    _write_manifest(out, "defense-eval", args, resolved, {"weights": str(args.weights)}, ["defense.csv"])
    for r in rows:
        print(f"{r['defense']}({r['strength']}): ASR {100 * r['asr']:.1f}%  AP {r['ap']:.3f}")
    return 0


def cmd_report(args):
    out = _out_dir(args)
    root = Path(args.scenario) if args.scenario else out
    rows = []
    for csv_path in sorted(root.rglob("*.csv")):
        with open(csv_path) as f:
            reader = csv.reader(f)
            header = next(reader, None)
            for row in reader:
                rows.append({"file": str(csv_path.relative_to(root)), "fields": dict(zip(header, row))})
    summary = {"rows": rows, "count": len(rows)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "report", args, {"root": str(root)}, {}, ["summary.json"])
    print(f"aggregated {len(rows)} rows from {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hijacklab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **help_kw):
        p = sub.add_parser(name, **help_kw)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, required=True)
        p.add_argument("--weights", type=str, default=None)
        p.add_argument("--scenario", type=str, default=None)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--optimizer", choices=["conditional", "slrm"], default=None)
        p.add_argument("--eta", type=float, default=None)
        p.add_argument("--direction", choices=["l2r", "r2l"], default=None)
        p.add_argument("--goal", choices=["move-in", "move-out"], default=None)
        p.add_argument("--mot-cov", dest="mot_cov", type=float, default=None)
        p.add_argument("--mot-h", dest="mot_h", type=int, default=None)
        p.add_argument("--mot-r", dest="mot_r", type=int, default=None)
        p.add_argument("--t-iou", dest="t_iou", type=float, default=None)
        p.add_argument("--defense", choices=["none", "bitdepth", "gauss", "median"], default=None)
        p.add_argument("--strength", type=float, default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.set_defaults(fn=fn)
        return p

    add("detector-train", cmd_detector_train, help="train the toy detector on a synthetic corpus")
    add("detector-check", cmd_detector_check, help="finite-difference check of analytic input gradients")
    add("scene-gen", cmd_scene_gen, help="generate one synthetic scenario directory")
    add("stage1", cmd_stage1, help="preselect the patch location for a scenario")
    add("attack-gen", cmd_attack_gen, help="generate an adversarial patch for a scenario")
    add("attack-eval", cmd_attack_eval, help="run the attack pipeline and report ASR")
    add("baseline-slrm", cmd_baseline_slrm, help="fixed-weight loss baseline evaluation")
    add("baseline-maxcap", cmd_baseline_maxcap, help="maximum-attack-capability upper bound")
    add("baseline-randloc", cmd_baseline_randloc, help="random patch location baseline")
    add("defense-eval", cmd_defense_eval, help="input-transformation defense sweep")
    add("report", cmd_report, help="aggregate report CSVs into one summary")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
