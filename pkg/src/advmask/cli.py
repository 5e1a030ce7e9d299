"""``advmask`` command line front end.

Exit codes: 0 success, 1 internal error, 2 bad input or missing asset.  On
failure a one-line JSON error object is printed to stderr (and written to
``error.json`` in the output directory when one is known).
"""

import argparse
from dataclasses import asdict
import json
import logging
import sys
import urllib.request
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .assets import asset_dir, resolve, sha256_file
from .config import load_config, save_config
from .countermeasures import (ManifestRow, SanitizationPolicy, TrainingManifest, generate_adv_training_set,
                              substitute_mask)
from .data import group_by_identity, iter_image_files, load_dataset, load_image, read_split, save_dataset, save_image
from .embedding import build_gallery
from .errors import AdvMaskError, ChecksumMismatch, InputError
from .evaluation import (PersistenceConfig, SimilarityReport, TransferMatrix, calibration_probes,
                         eval_similarity, events_to_csv, impostor_scores, load_frames,
                         persistence_detection, recognition_rate, simulate_stream, threshold_at_far,
                         transferability_matrix, write_json)
from .masks import standard_mask, white_mask
from .optimizer import OptimizerConfig, load_checkpoint, optimize_targeted, optimize_universal, save_checkpoint, substream
from .registry import ModelRegistry, read_manifest
from .renderer import AugmentationConfig, detect_landmarks
from .synthetic import synthetic_dataset

log = logging.getLogger("advmask")

COMMANDS = ("train", "eval", "transfer", "calibrate", "simulate", "defend", "report", "fetch", "synth")


# ----------------------------------------------------------------- helpers

class Context:
    def __init__(self, config):
        self.config = config
        self.seed = int(config["seed"])
        self.out = Path(config["output_dir"])
        self.registry = ModelRegistry.from_manifest(config["models"]["manifest"])
        rcfg = config["renderer"]
        self.landmarks = rcfg["landmark_backend"]
        self.backend = rcfg["reconstruction_backend"]
        self.augmentation = AugmentationConfig.from_dict(rcfg["augmentation"])

    def models(self):
        return [self.registry.load(n) for n in self.config["models"]["names"]]

    def rng(self, name):
        return substream(self.seed, name)

    def faces(self, root_key="root", split_key="split"):
        ds = self.config["dataset"]
        if ds.get("synthetic") and root_key == "root":
            syn = ds["synthetic"]
            return synthetic_dataset(int(syn.get("identities", 20)), int(syn.get("images", 5)),
                                     seed=int(syn.get("seed", 0)), prefix=syn.get("prefix", "id"))
        root = ds.get(root_key)
        if root is None:
            raise InputError(f"dataset.{root_key} is not set")
        identities = read_split(ds[split_key]) if ds.get(split_key) else None
        return load_dataset(root, self.landmarks, identities)

    def gallery_and_probes(self):
        """Enrollment images and probe images.

        With ``dataset.gallery_root`` the two come from separate trees;
        otherwise the first ``gallery.images_per_identity`` images of each
        identity enroll it and the rest are probes.
        """
        if self.config["dataset"].get("gallery_root"):
            return self.faces("gallery_root", "gallery_split"), self.faces()
        k = int(self.config["gallery"]["images_per_identity"])
        gallery, probes = [], []
        for faces in group_by_identity(self.faces()).values():
            gallery.extend(faces[:k])
            probes.extend(faces[k:])
        return gallery, probes

    def control_faces(self):
        ds = self.config["dataset"]
        root = self.config["eval"].get("control_root")
        if root:
            return load_dataset(root, self.landmarks)
        if ds.get("synthetic"):
            seed = int(ds["synthetic"].get("seed", 0)) + 1
            return synthetic_dataset(2, 1, seed=seed, prefix="control")
        return None

    def galleries(self, models, faces, mode=None):
        # a fresh "gallery" stream per model, so a model's gallery does not
        # depend on which other models share the run
        mode = mode or self.config["gallery"]["mode"]
        return {m.name: build_gallery(m, faces, mode, rng=self.rng("gallery"), backend=self.backend)
                for m in models}

    def snapshot(self):
        save_config(self.out / "config.snapshot.yaml", self.config)


def _load_texture(path):
    mask, _ = load_checkpoint(path)
    return mask


# ---------------------------------------------------------------- commands

def cmd_train(ctx):
    cfg = ctx.config
    ocfg = dict(cfg["optimizer"])
    target = ocfg.pop("identity", None)
    opt = OptimizerConfig(seed=ctx.seed, ensemble=tuple(cfg["models"]["names"]),
                          augmentation=ctx.augmentation, **ocfg)
    faces = ctx.faces()
    if opt.mode == "targeted":
        if target is None:
            raise InputError("optimizer.identity must name the targeted identity")
        faces = [f for f in faces if f.identity == target]
        if not faces:
            raise InputError(f"identity {target!r} has no images")
    models = ctx.models()
    galleries = ctx.galleries(models, faces, mode="plain")
    run = optimize_targeted if opt.mode == "targeted" else optimize_universal
    mask, history = run(white_mask(), faces, models, [galleries[m.name] for m in models], opt, ctx.backend)
    ctx.out.mkdir(parents=True, exist_ok=True)
    ctx.snapshot()
    save_checkpoint(ctx.out, mask, history, models, faces)
    if history.records:
        log.info("sim_loss %.4f -> %.4f over %d iterations", history.records[0].sim_loss,
                 history.records[-1].sim_loss, len(history.records))
    return {"checkpoint": str(ctx.out / "mask.png"), "iterations": len(history.records)}


def _write_report(ctx, report, extra):
    from .plots import similarity_boxplot

    report.to_csv(ctx.out / "report.csv")
    means = {}
    for r in report.records:
        means.setdefault(r.model, {})
    for model in means:
        means[model] = {c: report.mean(c, model) for c in report.conditions()}
    summary = {"means": means, "aggregates": report.aggregates(), "config": ctx.config}
    summary.update(extra)
    write_json(ctx.out / "summary.json", summary)
    similarity_boxplot(report, ctx.out / "similarity_boxplot.png")
    return summary


def cmd_eval(ctx):
    ecfg = ctx.config["eval"]
    conditions = list(ecfg["conditions"])
    texture = None
    if "adv" in conditions:
        if not ecfg.get("checkpoint"):
            raise InputError("eval.checkpoint is required for the adv condition")
        texture = _load_texture(ecfg["checkpoint"])
    gallery_faces, probes = ctx.gallery_and_probes()
    if not probes:
        raise InputError("no probe images left after enrollment")
    models = ctx.models()
    galleries = ctx.galleries(models, gallery_faces)
    controls = ctx.control_faces() if {"male_face", "female_face"} & set(conditions) else None
    augmentation = ctx.augmentation if ecfg.get("augment") else None
    report = SimilarityReport()
    for model in models:
        for cond in conditions:
            report = report + eval_similarity(cond, probes, model, galleries[model.name], ctx.rng(f"eval/{cond}"),
                                              texture if cond == "adv" else None, augmentation, controls,
                                              backend=ctx.backend)
    ctx.snapshot()
    summary = _write_report(ctx, report, {"checkpoint": ecfg.get("checkpoint")})
    return {"means": summary["means"]}


def cmd_transfer(ctx):
    from .plots import transfer_heatmap

    tcfg = ctx.config["transfer"]
    masks = {c: ("control", c, None) for c in tcfg.get("controls", [])}
    for name, spec in (tcfg.get("masks") or {}).items():
        spec = {"path": spec} if isinstance(spec, str) else spec
        masks[name] = (spec.get("group", "single"), "adv", _load_texture(spec["path"]))
    if not masks:
        raise InputError("transfer needs at least one mask or control")
    gallery_faces, probes = ctx.gallery_and_probes()
    models = ctx.models()
    galleries = ctx.galleries(models, gallery_faces)
    controls = ctx.control_faces()
    matrix = transferability_matrix(masks, models, probes, galleries, ctx.seed, None, controls, ctx.backend)
    ctx.snapshot()
    matrix.to_csv(ctx.out / "matrix.csv")
    write_json(ctx.out / "summary.json", {"rows": matrix.rows, "columns": matrix.columns,
                                          "values": matrix.values.tolist(), "groups": matrix.groups,
                                          "config": ctx.config})
    transfer_heatmap(matrix, ctx.out / "transfer_heatmap.png")
    return {"rows": matrix.rows, "columns": matrix.columns}


def cmd_calibrate(ctx):
    ccfg = ctx.config["calibrate"]
    far = float(ccfg["far_target"])
    if ccfg.get("scores"):
        # precomputed impostor similarities, one per line
        path = Path(ccfg["scores"])
        if not path.exists():
            raise InputError(f"impostor score file not found: {path}", path=path)
        scores = np.loadtxt(path, dtype=np.float64, ndmin=1)
        payload = {"threshold": threshold_at_far(scores, far), "far_target": far, "impostor_pairs": int(scores.size),
                   "source": str(path)}
        ctx.snapshot()
        write_json(ctx.out / "threshold.json", payload)
        return payload
    gallery_faces, probes = ctx.gallery_and_probes()
    masks = {name: standard_mask(name) for name in ccfg["masks"]}
    masked = calibration_probes(probes, masks, ctx.rng("calibrate"), ctx.backend)
    models = ctx.models()
    galleries = ctx.galleries(models, gallery_faces)
    thresholds, pairs = {}, {}
    for model in models:
        scores = impostor_scores(model, galleries[model.name], masked)
        thresholds[model.name] = threshold_at_far(scores, far)
        pairs[model.name] = int(scores.size)
    ctx.snapshot()
    payload = {"threshold": thresholds[models[0].name], "thresholds": thresholds,
               "far_target": far, "impostor_pairs": pairs, "gallery_mode": ctx.config["gallery"]["mode"]}
    write_json(ctx.out / "threshold.json", payload)
    return payload


def _threshold(scfg):
    if scfg.get("threshold") is not None:
        return float(scfg["threshold"])
    path = scfg.get("threshold_file")
    if not path or not Path(path).exists():
        raise InputError(f"threshold file not found: {path}", path=path)
    return float(json.loads(Path(path).read_text())["threshold"])


def cmd_simulate(ctx):
    scfg = ctx.config["simulate"]
    threshold = _threshold(scfg)
    persistence = PersistenceConfig(**scfg["persistence"])
    if not scfg["streams"]:
        raise InputError("simulate.streams is empty")
    model = ctx.models()[0]
    gallery = ctx.galleries([model], ctx.faces())[model.name]
    ctx.out.mkdir(parents=True, exist_ok=True)
    rows, summaries = [], []
    for n, stream in enumerate(scfg["streams"]):
        frames = load_frames(stream["frames"])
        events = simulate_stream(frames, scfg["detector"], model, gallery, threshold, stream["identity"],
                                 require_argmax=bool(scfg["require_argmax"]))
        detected = sum(e.detected for e in events)
        summaries.append({"stream": n, "frames": str(stream["frames"]), "identity": stream["identity"],
                          "n_frames": len(events), "detected": detected,
                          "recognized": sum(e.recognized for e in events),
                          "recognition_rate": recognition_rate(events) if detected else None,
                          "identified": persistence_detection(events, persistence)})
        rows.append(events)
    with open(ctx.out / "events.csv", "w") as fh:
        fh.write("stream,")
        tmp = ctx.out / ".events.tmp"
        for n, events in enumerate(rows):
            events_to_csv(tmp, events)
            lines = tmp.read_text().splitlines()
            if n == 0:
                fh.write(lines[0] + "\n")
            fh.writelines(f"{n},{line}\n" for line in lines[1:])
        tmp.unlink()
    ctx.snapshot()
    payload = {"threshold": threshold, "persistence": asdict(persistence), "streams": summaries,
               "persistence_detection_rate": float(np.mean([s["identified"] for s in summaries]))}
    write_json(ctx.out / "summary.json", payload)
    return payload


def cmd_defend(ctx):
    dcfg = ctx.config["defend"]
    source = dcfg.get("input")
    if not source or not Path(source).is_dir():
        raise InputError(f"defend.input directory not found: {source}", path=source)
    faces = load_dataset(source, ctx.landmarks) if any(p.is_dir() for p in Path(source).iterdir()) else []
    loose = iter_image_files(source)
    if not faces and not loose:
        log.warning("input directory %s holds no images; writing an empty manifest", source)
    ctx.out.mkdir(parents=True, exist_ok=True)
    ctx.snapshot()
    if dcfg["mode"] == "adv_training":
        masks = {name: _load_texture(path) for name, path in (dcfg.get("masks") or {}).items()}
        if not masks:
            raise InputError("defend.masks must name at least one texture for adv_training")
        manifest = generate_adv_training_set(faces, masks, ctx.rng("defend"), ctx.out / "adv_training",
                                             ctx.augmentation, ctx.backend)
        manifest.to_csv(ctx.out / "manifest.csv")
        return {"rows": len(manifest.rows), "failures": len(manifest.failures)}
    if dcfg["mode"] != "substitute":
        raise InputError(f"defend.mode must be substitute or adv_training, got {dcfg['mode']!r}")
    policy = SanitizationPolicy(standard_mask(dcfg.get("replacement", "blue")))
    manifest = TrainingManifest([])
    items = [(f.key, f.identity, f.image, f.landmarks) for f in faces]
    for path in loose:
        items.append((str(path), "", load_image(path), None))
    for key, identity, image, landmarks in items:
        try:
            if landmarks is None:
                landmarks = detect_landmarks(image, ctx.landmarks)
            clean = substitute_mask(image, landmarks, policy, ctx.landmarks, ctx.backend)
        except AdvMaskError as exc:
            log.warning("skipping %s: %s", key, exc)
            manifest.failures.append(key)
            continue
        out = ctx.out / "sanitized" / (identity or ".") / Path(key).name
        save_image(out, clean)
        manifest.rows.append(ManifestRow(key, str(out), dcfg.get("replacement", "blue"), identity, ctx.seed))
    manifest.to_csv(ctx.out / "manifest.csv")
    return {"rows": len(manifest.rows), "failures": len(manifest.failures)}


def cmd_report(ctx):
    from .plots import similarity_boxplot, transfer_heatmap

    folder = Path(ctx.config["report"].get("input") or ctx.out)
    written = []
    if (folder / "report.csv").exists():
        similarity_boxplot(SimilarityReport.from_csv(folder / "report.csv"), ctx.out / "similarity_boxplot.png")
        written.append("similarity_boxplot.png")
    if (folder / "matrix.csv").exists():
        transfer_heatmap(TransferMatrix.from_csv(folder / "matrix.csv"), ctx.out / "transfer_heatmap.png")
        written.append("transfer_heatmap.png")
    if not written:
        raise InputError(f"no report.csv or matrix.csv in {folder}", path=folder)
    return {"plots": written}


def cmd_fetch(ctx):
    """Download manifest assets that carry a ``url`` and verify their checksums."""
    manifest = ctx.config["models"]["manifest"]
    if not manifest:
        raise InputError("models.manifest is required for fetch")
    fetched = []
    for entry in read_manifest(manifest):
        if entry.get("kind") != "asset" or not entry.get("url"):
            continue
        target = resolve(entry["path"])
        if not target.exists():
            target.parent.mkdir(parents=True, exist_ok=True)
            urllib.request.urlretrieve(entry["url"], target)
        if entry.get("checksum") and sha256_file(target) != entry["checksum"].lower():
            raise ChecksumMismatch(f"checksum mismatch for {target}", path=target)
        fetched.append(str(target))
    return {"asset_dir": str(asset_dir()), "fetched": fetched}


def cmd_synth(ctx, identities, images, seed):
    faces = synthetic_dataset(identities, images, seed=seed)
    save_dataset(ctx.out, faces)
    names = sorted({f.identity for f in faces})
    (ctx.out / "identities.txt").write_text("\n".join(names) + "\n")
    return {"identities": len(names), "images": len(faces), "root": str(ctx.out)}


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "transfer": cmd_transfer, "calibrate": cmd_calibrate,
            "simulate": cmd_simulate, "defend": cmd_defend, "report": cmd_report, "fetch": cmd_fetch}


def build_parser():
    parser = argparse.ArgumentParser(prog="advmask", description="Universal adversarial face-mask toolkit")
    parser.add_argument("--version", action="version", version=f"advmask {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "synth":
            p.add_argument("--identities", type=int, default=20)
            p.add_argument("--images", type=int, default=8)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = args.out
    try:
        config = load_config(args.config, seed=args.seed, workers=args.workers,
                             output_dir=str(out) if out is not None else None)
        out = Path(config["output_dir"])
        torch.set_num_threads(max(1, int(config["workers"])))
        ctx = Context(config)
        if args.command == "synth":
            result = cmd_synth(ctx, args.identities, args.images, ctx.seed)
        else:
            result = HANDLERS[args.command](ctx)
    except AdvMaskError as exc:
        return _fail(exc.to_dict(), exc.exit_code, out)
    except Exception as exc:  # noqa: BLE001 - every failure must surface as error JSON
        log.debug("internal error", exc_info=True)
        return _fail({"error": type(exc).__name__, "message": str(exc)}, 1, out)
    print(json.dumps(result, default=str))
    return 0


def _fail(payload, code, out):
    line = json.dumps(payload, default=str)
    print(line, file=sys.stderr)
    if out is not None:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "error.json").write_text(line + "\n")
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
