"""Command-line pipeline: simulate -> curate -> select -> fit -> eval.

Every stage reads and writes files in one work directory and leaves a
``manifest_<stage>.json`` recording the sha256 of its inputs and outputs,
the resolved configuration and the package version.  Settings resolve as
built-in defaults, then the ``--config`` JSON document, then flags.

Work-directory layout::

    model.obj, model.meta.json      template
    truth.jsonl                     simulator ground truth (read only by eval)
    images/<id>.pgm                 stand-in images for deduplication
    boxes.jsonl                     object detections (image_id, bbox, score)
    detections_primary.jsonl        pseudo-labels, with augmented predictions
    detections_auxiliary.jsonl      second detector's pseudo-labels
    curated.jsonl                   ids that survive dedup and thresholding
    selection_<criterion>_<N>.jsonl ranked scores and selected flags
    fits.jsonl                      fitted pose per selected image
    report.csv, report.txt          per-category AUC and rotation error
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, curate, metrics, simulate
from .fit import FitConfig
from .geometry import StructureError
from .records import (
    BoxDetection,
    DetectionRecord,
    FitRecord,
    RecordError,
    SceneTruth,
    read_jsonl,
    write_jsonl,
)
from .select import Criterion, bbox_center, default_transforms, fit_to_records, score_records, select_top_n
from .template import load_template, quadruped, save_template

CHUNK = 16

DEFAULTS = {
    "workdir": "artfit-run",
    "seed": 0,
    "template": None,
    "pool": {"n": 1000, "corruption_rate": 0.3, "duplicate_rate": 0.05, "image_size": 48},
    "detectors": {"primary": {}, "auxiliary": {}},
    "curate": {"tau": curate.DEFAULT_TAU, "hamming": curate.DEFAULT_HAMMING},
    "select": {"criterion": "cf-cm", "top_n": 1000},
    "fit": {},
}


class MissingArtifact(Exception):
    pass


class ConfigError(Exception):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def fixture_config_path() -> Path:
    return Path(str(resources.files("artfit") / "data" / "fixture.json"))


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = fixture_config_path() if args.config == "fixture" else Path(args.config)
        if not path.is_file():
            raise MissingArtifact(f"config file {path}")
        try:
            cfg = _merge(cfg, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if args.workdir is not None:
        cfg["workdir"] = args.workdir
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.criterion is not None:
        cfg["select"]["criterion"] = args.criterion
    if args.top_n is not None:
        cfg["select"]["top_n"] = args.top_n
    if args.tau is not None:
        cfg["curate"]["tau"] = args.tau

    if not 0 <= int(cfg["seed"]) < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if int(cfg["select"]["top_n"]) < 0:
        raise ConfigError("top_n must be >= 0")
    if not 0.0 <= float(cfg["curate"]["tau"]) <= 1.0:
        raise ConfigError("tau must be in [0, 1]")
    try:
        Criterion(cfg["select"]["criterion"])
        FitConfig(**cfg["fit"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def stage_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for a named stage, derived from the top-level seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def thread_count() -> int:
    raw = os.environ.get("ARTFIT_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError as exc:
            raise ConfigError(f"ARTFIT_THREADS must be an integer, got {raw!r}") from exc
        return max(1, n)
    return max(1, min(4, os.cpu_count() or 1))


def _chunked_map(fn, items: list) -> list:
    """Apply ``fn`` to fixed-size chunks, possibly in parallel; output order matches input."""
    chunks = [items[i:i + CHUNK] for i in range(0, len(items), CHUNK)]
    threads = thread_count()
    if threads == 1 or len(chunks) <= 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(fn, chunks))
    return [x for p in parts for x in p]


# --------------------------------------------------------------------------- #
# paths and manifests
# --------------------------------------------------------------------------- #


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(str(path))
    return path


def _hash_inputs(wd: Path, names) -> dict:
    out = {}
    for n in names:
        p = wd / n
        if p.is_dir():
            for f in sorted(p.iterdir()):
                out[f"{n}/{f.name}"] = _sha256(f)
        else:
            out[n] = _sha256(_need(p))
    return out


def _write_manifest(wd: Path, stage: str, cfg: dict, inputs: dict, outputs, extra=None) -> None:
    doc = {
        "stage": stage,
        "version": __version__,
        "config": {k: v for k, v in cfg.items() if k != "workdir"},
        "inputs": inputs,
        "outputs": {n: _sha256(wd / n) for n in outputs},
    }
    if extra:
        doc.update(extra)
    (wd / f"manifest_{stage}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _model(wd: Path):
    return load_template(_need(wd / "model.obj"))


def _profiles(cfg: dict):
    seed = int(cfg["seed"])
    out = []
    for name, sigma, bias in (("primary", 0.02, (0.004, -0.002)), ("auxiliary", 0.025, (-0.004, 0.004))):
        params = {"sigma": sigma, "bias": bias, "seed": stage_seed(seed, "detector-" + name)}
        params.update(cfg["detectors"].get(name, {}))
        params["bias"] = tuple(params["bias"])
        out.append(simulate.DetectorProfile(name=name, **params))
    return out


def selection_name(cfg: dict) -> str:
    return f"selection_{cfg['select']['criterion']}_{int(cfg['select']['top_n'])}.jsonl"


# --------------------------------------------------------------------------- #
# stages
# --------------------------------------------------------------------------- #


def cmd_simulate(cfg: dict) -> None:
    wd = Path(cfg["workdir"])
    wd.mkdir(parents=True, exist_ok=True)
    inputs = {}
    if cfg["template"]:
        src = _need(Path(cfg["template"]))
        model = load_template(src)
        inputs["template"] = _sha256(src)
    else:
        model = quadruped()
    save_template(model, wd / "model.obj")

    seed = int(cfg["seed"])
    pc = cfg["pool"]
    scenes = simulate.make_pool(model, int(pc["n"]), float(pc["corruption_rate"]), stage_seed(seed, "pool"),
                                duplicate_rate=float(pc.get("duplicate_rate", 0.0)))
    primary, auxiliary = _profiles(cfg)
    write_jsonl(wd / "truth.jsonl", scenes)
    write_jsonl(wd / "detections_primary.jsonl",
                [simulate.detect_with_transforms(primary, s, default_transforms(bbox_center(s.bbox))) for s in scenes])
    write_jsonl(wd / "detections_auxiliary.jsonl", [simulate.detect(auxiliary, s) for s in scenes])
    box_seed = stage_seed(seed, "boxes")
    write_jsonl(wd / "boxes.jsonl", [simulate.box_detection(s, box_seed) for s in scenes])
    img_dir = wd / "images"
    img_dir.mkdir(exist_ok=True)
    for old in img_dir.glob("*.pgm"):
        old.unlink()
    img_seed = stage_seed(seed, "images")
    for s in scenes:
        curate.write_pgm(img_dir / f"{s.image_id}.pgm", simulate.render_image(s, int(pc.get("image_size", 48)), img_seed))
    outputs = ["model.obj", "model.meta.json", "truth.jsonl", "detections_primary.jsonl",
               "detections_auxiliary.jsonl", "boxes.jsonl"]
    _write_manifest(wd, "simulate", cfg, inputs, outputs, {"images": _hash_inputs(wd, ["images"])})


def cmd_curate(cfg: dict) -> dict:
    wd = Path(cfg["workdir"])
    boxes = read_jsonl(_need(wd / "boxes.jsonl"), BoxDetection.from_dict)
    img_dir = _need(wd / "images")
    hashes = []
    for b in boxes:
        img = curate.read_pnm(_need(img_dir / f"{b.image_id}.pgm"))
        hashes.append(curate.dhash(img, b.image_id))
    unique = set(curate.dedup(hashes, int(cfg["curate"]["hamming"])))
    confident = {d.image_id for d in curate.filter_detections(boxes, float(cfg["curate"]["tau"]))}
    rows = [
        {"image_id": h.image_id, "dhash": h.hex(), "score": b.score,
         "duplicate": h.image_id not in unique, "kept": h.image_id in unique and h.image_id in confident}
        for h, b in sorted(zip(hashes, boxes), key=lambda hb: hb[0].image_id)
    ]
    write_jsonl(wd / "curated.jsonl", rows)
    summary = {"n_in": len(rows), "n_duplicates": sum(r["duplicate"] for r in rows),
               "n_kept": sum(r["kept"] for r in rows)}
    _write_manifest(wd, "curate", cfg, _hash_inputs(wd, ["boxes.jsonl", "images"]), ["curated.jsonl"],
                    {"summary": summary})
    return summary


def _kept_ids(wd: Path) -> list:
    return [r["image_id"] for r in read_jsonl(_need(wd / "curated.jsonl")) if r["kept"]]


def _records(wd: Path, name: str, ids: list) -> list:
    recs = {r.image_id: r for r in read_jsonl(_need(wd / name), DetectionRecord.from_dict)}
    missing = [i for i in ids if i not in recs]
    if missing:
        raise MissingArtifact(f"{name} has no record for {missing[0]} ({len(missing)} missing)")
    return [recs[i] for i in ids]


def _fit(records, model, fit_cfg: FitConfig) -> list:
    return _chunked_map(lambda chunk: fit_to_records(chunk, model, fit_cfg), records)


def cmd_select(cfg: dict, stderr=None) -> dict:
    wd = Path(cfg["workdir"])
    crit = Criterion(cfg["select"]["criterion"])
    n = int(cfg["select"]["top_n"])
    ids = _kept_ids(wd)
    prim = _records(wd, "detections_primary.jsonl", ids)
    inputs = ["curated.jsonl", "detections_primary.jsonl"]
    aux, model, fits = None, None, None
    if crit in (Criterion.CF_CM, Criterion.CF_CM2):
        aux = _records(wd, "detections_auxiliary.jsonl", ids)
        inputs.append("detections_auxiliary.jsonl")
    if crit is Criterion.CF_CM2:
        model = _model(wd)
        inputs += ["model.obj", "model.meta.json"]
        fits = _fit(aux, model, FitConfig(**cfg["fit"]))
    scores = score_records(crit, prim, aux, model, fits=fits)
    rep = select_top_n(scores, n)
    name = selection_name(cfg)
    write_jsonl(wd / name, rep.rows())
    summary = {"criterion": crit.value, "N": n, "pool": len(rep.ranked),
               "selected": sum(rep.selected), "shortfall": rep.shortfall}
    if rep.shortfall:
        print(f"warning: asked for {n} images but only {len(rep.ranked)} are available; all selected",
              file=stderr or sys.stderr)
    _write_manifest(wd, "select", cfg, _hash_inputs(wd, inputs), [name], {"summary": summary})
    return summary


def cmd_fit(cfg: dict) -> None:
    wd = Path(cfg["workdir"])
    name = selection_name(cfg)
    ids = sorted(r["image_id"] for r in read_jsonl(_need(wd / name)) if r["selected"])
    model = _model(wd)
    recs = _records(wd, "detections_primary.jsonl", ids)
    results = _fit(recs, model, FitConfig(**cfg["fit"]))
    rows = [FitRecord(r.image_id, f.params, float(f.final_loss), f.iterations, f.converged, model.name)
            for r, f in zip(recs, results)]
    write_jsonl(wd / "fits.jsonl", rows)
    _write_manifest(wd, "fit", cfg, _hash_inputs(wd, [name, "detections_primary.jsonl", "model.obj",
                                                     "model.meta.json"]), ["fits.jsonl"])


def cmd_eval(cfg: dict, stderr=None) -> metrics.Report:
    wd = Path(cfg["workdir"])
    model = _model(wd)
    fits = {r.image_id: r.params for r in read_jsonl(_need(wd / "fits.jsonl"), FitRecord.from_dict)}
    truths = {t.image_id: t for t in read_jsonl(_need(wd / "truth.jsonl"), SceneTruth.from_dict)}
    truths = {i: t for i, t in truths.items() if i in fits}
    rep = metrics.report(fits, truths, model)
    for w in rep.warnings:
        print(f"warning: {w}", file=stderr or sys.stderr)
    (wd / "report.csv").write_text(rep.csv(), encoding="utf-8")
    (wd / "report.txt").write_text(rep.table(), encoding="utf-8")
    _write_manifest(wd, "eval", cfg, _hash_inputs(wd, ["fits.jsonl", "truth.jsonl", "model.obj",
                                                      "model.meta.json"]), ["report.csv", "report.txt"])
    return rep


def cmd_pipeline(cfg: dict, stderr=None) -> metrics.Report:
    cmd_simulate(cfg)
    cmd_curate(cfg)
    cmd_select(cfg, stderr)
    cmd_fit(cfg)
    return cmd_eval(cfg, stderr)


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file, or 'fixture' for the bundled 200-scene fixture")
    common.add_argument("--workdir", "-w", help="directory holding all stage artifacts")
    common.add_argument("--seed", type=int, help="top-level seed (unsigned 64-bit)")
    common.add_argument("--criterion", choices=[c.value for c in Criterion])
    common.add_argument("--top-n", type=int, dest="top_n", help="number of pseudo-labels to select")
    common.add_argument("--tau", type=float, help="object-detection score threshold (strict)")

    p = argparse.ArgumentParser(prog="artfit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"artfit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "generate scenes, detections, boxes and images",
        "curate": "drop near-duplicate images and low-confidence detections",
        "select": "score pseudo-labels and select the top N",
        "fit": "fit the template to selected pseudo-labels",
        "eval": "write the per-category AUC / rotation-error report",
        "pipeline": "run every stage in order",
    }
    for name, h in helps.items():
        sub.add_parser(name, parents=[common], help=h)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "curate":
            s = cmd_curate(cfg)
            print(f"kept {s['n_kept']} of {s['n_in']} images ({s['n_duplicates']} duplicates)")
        elif args.command == "select":
            s = cmd_select(cfg)
            print(f"selected {s['selected']} of {s['pool']} by {s['criterion']}")
        elif args.command == "fit":
            cmd_fit(cfg)
        elif args.command == "eval":
            sys.stdout.write(cmd_eval(cfg).table())
        else:
            sys.stdout.write(cmd_pipeline(cfg).table())
    except MissingArtifact as exc:
        print(f"artfit: missing artifact: {exc}", file=sys.stderr)
        return 2
    except (RecordError, ConfigError, curate.ImageFormatError, StructureError) as exc:
        print(f"artfit: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
