"""End-to-end stages behind the command line: data preparation, training runs,
evaluation runs and the full table-reproduction driver."""
from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint, to_model
from .dataset import (
    align_many_to_one,
    align_one_to_one,
    load_fsdd,
    load_mnist,
    load_scd_digits,
    spectrograms_from_clips,
    split_90_10,
)
from .evaluation import (
    classify_generated,
    compare_error_rates,
    emit_comparison_grid,
    generate_test_images,
    intra_class_variance,
    mask_sweep,
)
from .pairfile import atomic_write_bytes, read_pairset, write_pairset
from .training import TrainConfig, train_aivae, train_aivaegan, train_lenet5

log = logging.getLogger(__name__)

DATASETS = ("mnist-fsdd", "mnist-scd")
ALPHAS = (0.2, 0.5, 1.0, 2.0)
SCALES = {
    "desk": {"lenet5": 10, "aivae": 30, "aivaegan": 30},
    "full": {"lenet5": 100, "aivae": 100, "aivaegan": 100},
}

# Published reference numbers the summary is compared against.
REFERENCE = {
    "lenet5": 0.987,
    "aivae": {"mnist-fsdd": 0.942, "mnist-scd": 0.866},
    "aivaegan": {
        "mnist-fsdd": {"0.2": 0.810, "0.5": 0.805, "1": 0.930, "2": 0.943},
        "mnist-scd": {"0.2": 0.669, "0.5": 0.762, "1": 0.817, "2": 0.815},
    },
    "error_drop": {"mnist-fsdd": 0.70, "mnist-scd": 0.44},
    "counts": {
        "fsdd_clips": 2000,
        "scd_clips": 23666,
        "mnist-fsdd.train": 60000,
        "mnist-fsdd.test": 10000,
        "mnist-scd.train": 21160,
        "mnist-scd.test": 2360,
    },
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def alpha_key(alpha: float) -> str:
    return f"{alpha:g}"


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def environment_lines() -> list:
    return [
        f"# crossgen {__version__}",
        f"# numpy {np.__version__}",
        f"# python {platform.python_version()}",
    ]


def config_snapshot(options: dict) -> str:
    """``key = value`` lines loadable with ``--config``, headed by version comments."""
    lines = environment_lines()
    for key in sorted(options):
        value = options[key]
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = " ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def run_directory(out, seed: int, tag: str = "") -> Path:
    """Fresh ``<out>/<timestamp>-seed<N>[-tag]`` directory (suffixed if it already exists)."""
    stem = f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}" + (f"-{tag}" if tag else "")
    path = Path(out) / stem
    n = 1
    while path.exists():
        path = Path(out) / f"{stem}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def _require_dir(path, what: str) -> Path:
    if path is None:
        raise PipelineError("prepare", f"--{what} is required")
    path = Path(path)
    if not path.is_dir():
        raise PipelineError("prepare", f"{what} corpus not found: {path}")
    return path


def prepare(mnist, fsdd, scd, out, seed: int, only: str = "all", stratified: bool = False,
            balanced: bool = False) -> dict:
    """Build and write the aligned pair files plus ``manifest.json``; returns the manifest."""
    out = Path(out)
    mnist = _require_dir(mnist, "mnist")
    train_images, test_images = load_mnist(mnist, "train"), load_mnist(mnist, "test")
    manifest = {
        "seed": seed,
        "stratified": stratified,
        "balanced": balanced,
        "counts": {"mnist_train": len(train_images), "mnist_test": len(test_images)},
        "files": {},
        "sources": {"mnist": str(mnist.resolve())},
    }

    def emit(name, ps):
        crc = write_pairset(out / f"{name}.aipx", ps)
        manifest["files"][name] = {"pairs": len(ps), "crc32": f"{crc:08x}", "mapping": ps.mapping_kind}
        manifest["counts"][name] = len(ps)
        log.info("wrote %s: %d pairs", name, len(ps))

    if only in ("all", "fsdd"):
        fsdd = _require_dir(fsdd, "fsdd")
        specs = spectrograms_from_clips(load_fsdd(fsdd))
        manifest["counts"]["fsdd_clips"] = len(specs)
        manifest["sources"]["fsdd"] = str(fsdd.resolve())
        tr, te = split_90_10(specs, seed, "fsdd-split", labels=specs.labels if stratified else None)
        emit("mnist-fsdd.train", align_many_to_one(train_images, tr, seed, "train", "fsdd-align-train"))
        emit("mnist-fsdd.test", align_many_to_one(test_images, te, seed, "test", "fsdd-align-test"))
    if only in ("all", "scd"):
        scd = _require_dir(scd, "scd")
        specs = spectrograms_from_clips(load_scd_digits(scd))
        manifest["counts"]["scd_clips"] = len(specs)
        manifest["sources"]["scd"] = str(scd.resolve())
        tr, te = split_90_10(specs, seed, "scd-split", labels=specs.labels if stratified else None)
        emit("mnist-scd.train", align_one_to_one(train_images, tr, seed, "train", "scd-align-train", balanced))
        emit("mnist-scd.test", align_one_to_one(test_images, te, seed, "test", "scd-align-test", balanced))
    write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# single training / evaluation runs
# ---------------------------------------------------------------------------

def train_generative(arch: str, config: TrainConfig, train_path, run_dir: Path, test_path=None) -> dict:
    """Train one AIVAE/AIVAEGAN model; writes checkpoint, log and a generated-vs-real grid."""
    pairs = read_pairset(train_path)
    trainer = train_aivae if arch == "aivae" else train_aivaegan
    ckpt, tlog = trainer(config, pairs, checkpoint_path=run_dir / "checkpoint.aick")
    save_checkpoint(run_dir / "checkpoint.aick", ckpt)
    write_text(run_dir / "train_log.tsv", tlog.to_tsv())
    shown = read_pairset(test_path) if test_path else pairs
    shown = shown.subset(np.arange(min(32, len(shown))))
    generated = generate_test_images(ckpt, shown, seed=config.seed)
    _, real, _ = shown.batch(np.arange(len(shown)))
    emit_comparison_grid(real, generated.images, run_dir / "grid.png")
    return {"checkpoint": str(run_dir / "checkpoint.aick"), "final": tlog.records[-1].values if tlog.records else {}}


def train_classifier(config: TrainConfig, mnist, run_dir: Path) -> dict:
    train, test = load_mnist(mnist, "train"), load_mnist(mnist, "test")
    best, tlog = train_lenet5(config, train, test, checkpoint_path=run_dir / "checkpoint.aick")
    write_text(run_dir / "train_log.tsv", tlog.to_tsv())
    return {"checkpoint": str(run_dir / "checkpoint.aick"), "accuracy": best.extra["test_accuracy"]}


@dataclass
class EvalOutputs:
    accuracy: float
    archetype_variance: float
    sweep: Optional[dict]


def evaluate(model_path, data_path, classifier_path, run_dir: Path, seed: int, dataset: str = "",
             sweep: bool = False, trials: int = 1, use_mean: bool = False, ks=None) -> EvalOutputs:
    """Report, reconstruction grid and (optionally) mask-sweep table for one model."""
    ckpt = load_checkpoint(model_path)
    if ckpt.arch not in ("aivae", "aivaegan"):
        raise PipelineError("eval", f"--model must be an aivae or aivaegan checkpoint, got {ckpt.arch!r}")
    model = to_model(ckpt)
    classifier = to_model(load_checkpoint(classifier_path, "lenet5"))
    test = read_pairset(data_path)
    generated = generate_test_images(model, test, seed=seed, use_mean=use_mean)
    alpha = ckpt.config.get("alpha") if ckpt.arch == "aivaegan" else None
    report = classify_generated(classifier, generated, dataset=dataset, model=ckpt.arch, seed=seed,
                                alpha=alpha, sampling="mean" if use_mean else "sample")
    variance = intra_class_variance(generated.images, generated.labels)
    text = report.to_text() + f"intra_class_variance: {variance:.6f}\n"
    result = None
    if sweep:
        res = mask_sweep(model, test, classifier, seed=seed, ks=ks, trials=trials, use_mean=use_mean)
        write_text(run_dir / "sweep.tsv", res.to_tsv())
        result = {"k": res.ks, "accuracy": res.accuracy, "trials": trials}
    write_text(run_dir / "report.txt", text)
    n = min(32, len(test))
    _, real, _ = test.batch(np.arange(n))
    emit_comparison_grid(real, generated.images[:n], run_dir / "grid.png")
    return EvalOutputs(report.accuracy, variance, result)


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------

def reproduce_stages() -> list:
    stages = ["lenet5"]
    stages += [f"aivae-{ds}" for ds in DATASETS]
    stages += [f"aivaegan-{ds}-a{alpha_key(a)}" for ds in DATASETS for a in ALPHAS]
    return stages


def _load_state(path: Path, settings: dict, resume: bool) -> dict:
    if resume and path.exists():
        state = json.loads(path.read_text())
        if state.get("settings") != settings:
            raise PipelineError("reproduce", f"{path} was written with different settings: {state.get('settings')}")
        return state
    return {"settings": settings, "completed": {}, "failed": None}


def reproduce(data_dir, out, seed: int, scale: str = "desk", epochs: Optional[int] = None,
              mnist=None, resume: bool = False, trials: int = 1, batch_size: int = 128) -> dict:
    """Run every training/evaluation behind the accuracy tables and the masking sweep.

    Progress is recorded in ``state.json`` after each stage; with ``resume``
    finished stages are skipped. Returns the summary dictionary.
    """
    data_dir, out = Path(data_dir), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise PipelineError("reproduce", f"prepared data not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    mnist = mnist or manifest.get("sources", {}).get("mnist")
    if scale not in SCALES:
        raise PipelineError("reproduce", f"unknown scale {scale!r}")
    epoch_plan = {k: (epochs or v) for k, v in SCALES[scale].items()}
    settings = {"seed": seed, "scale": scale, "epochs": epoch_plan, "trials": trials, "batch_size": batch_size,
                "data": str(data_dir.resolve())}
    state_path = out / "state.json"
    state = _load_state(state_path, settings, resume)
    write_text(out / "config.txt", config_snapshot({"data": data_dir, "seed": seed, "scale": scale,
                                                    "epochs": epochs, "mnist": mnist, "trials": trials,
                                                    "batch_size": batch_size}))

    def data(name):
        path = data_dir / f"{name}.aipx"
        if not path.exists():
            raise PipelineError("reproduce", f"missing prepared pair file {path}")
        return path

    for stage in reproduce_stages():
        if stage in state["completed"]:
            log.info("skipping finished stage %s", stage)
            continue
        stage_dir = out / stage
        stage_dir.mkdir(parents=True, exist_ok=True)
        log.info("stage %s", stage)
        try:
            if stage == "lenet5":
                if not mnist:
                    raise PipelineError(stage, "MNIST directory unknown; pass --mnist")
                cfg = TrainConfig(epochs=epoch_plan["lenet5"], batch_size=batch_size, seed=seed, dataset=str(mnist))
                write_text(stage_dir / "config.txt", config_snapshot(cfg.to_dict()))
                result = train_classifier(cfg, mnist, stage_dir)
            else:
                arch, rest = stage.split("-", 1)
                ds = rest if arch == "aivae" else rest.rsplit("-a", 1)[0]
                cfg = TrainConfig(epochs=epoch_plan[arch], batch_size=batch_size, seed=seed,
                                  dataset=str(data(f"{ds}.train")),
                                  alpha=float(rest.rsplit("-a", 1)[1]) if arch == "aivaegan" else 1.0)
                write_text(stage_dir / "config.txt", config_snapshot(cfg.to_dict()))
                trained = train_generative(arch, cfg, data(f"{ds}.train"), stage_dir, data(f"{ds}.test"))
                ev = evaluate(trained["checkpoint"], data(f"{ds}.test"), state["completed"]["lenet5"]["checkpoint"],
                              stage_dir, seed, dataset=ds, sweep=(arch == "aivae"), trials=trials)
                result = {**trained, "accuracy": ev.accuracy, "archetype_variance": ev.archetype_variance}
                if ev.sweep is not None:
                    result["sweep"] = ev.sweep
        except PipelineError as exc:
            exc.stage = stage
            state["failed"] = stage
            write_json(state_path, state)
            raise
        except Exception as exc:
            state["failed"] = stage
            write_json(state_path, state)
            raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
        state["completed"][stage] = result
        state["failed"] = None
        write_json(state_path, state)

    summary = summarize(state["completed"], manifest)
    write_json(out / "summary.json", summary)
    write_text(out / "summary.txt", summary_text(summary))
    return summary


def collect_results(completed: dict, manifest: dict) -> dict:
    results = {"counts": manifest.get("counts", {}), "lenet5": {"accuracy": completed["lenet5"]["accuracy"]},
               "aivae": {}, "aivaegan": {ds: {} for ds in DATASETS}}
    for ds in DATASETS:
        r = completed[f"aivae-{ds}"]
        results["aivae"][ds] = {"accuracy": r["accuracy"], "archetype_variance": r["archetype_variance"],
                                "sweep": r.get("sweep")}
        for a in ALPHAS:
            results["aivaegan"][ds][alpha_key(a)] = completed[f"aivaegan-{ds}-a{alpha_key(a)}"]["accuracy"]
    return results


def verdicts(results: dict) -> list:
    """Pass/fail per tolerance band: list of (name, obtained, target, passed)."""
    out = []
    fsdd, scd = results["aivae"]["mnist-fsdd"], results["aivae"]["mnist-scd"]
    gan = results["aivaegan"]
    out.append(("lenet5 accuracy >= 0.98", results["lenet5"]["accuracy"], 0.98, results["lenet5"]["accuracy"] >= 0.98))
    out.append(("aivae mnist-fsdd accuracy >= 0.90", fsdd["accuracy"], 0.90, fsdd["accuracy"] >= 0.90))
    out.append(("aivae mnist-scd accuracy >= 0.80", scd["accuracy"], 0.80, scd["accuracy"] >= 0.80))
    for ds in DATASETS:
        g = gan[ds]
        out.append((f"aivaegan {ds} acc(2) - acc(0.2) >= 0.05", g["2"] - g["0.2"], 0.05, g["2"] - g["0.2"] >= 0.05))
        out.append((f"aivaegan {ds} acc(1) > acc(0.2)", g["1"] - g["0.2"], 0.0, g["1"] > g["0.2"]))
    for a in ALPHAS:
        k = alpha_key(a)
        diff = gan["mnist-fsdd"][k] - gan["mnist-scd"][k]
        out.append((f"aivaegan alpha={k} fsdd > scd", diff, 0.0, diff > 0))
    drops = {ds: compare_error_rates(gan[ds]["0.2"], gan[ds]["2"]) for ds in DATASETS}
    diff = drops["mnist-fsdd"] - drops["mnist-scd"]
    out.append(("error-rate drop fsdd > scd", diff, 0.0, bool(diff > 0)))
    ratio = fsdd["archetype_variance"] / scd["archetype_variance"] if scd["archetype_variance"] else float("inf")
    out.append(("archetype variance fsdd < 0.25 x scd", ratio, 0.25, ratio < 0.25))
    for ds, r in (("mnist-fsdd", fsdd), ("mnist-scd", scd)):
        sw = r["sweep"]
        acc = dict(zip(sw["k"], sw["accuracy"]))
        out.append((f"{ds} sweep k=0 equals unmasked", acc[0] - r["accuracy"], 0.0, acc[0] == r["accuracy"]))
        out.append((f"{ds} sweep k=64 <= 0.25", acc[64], 0.25, acc[64] <= 0.25))
    a_f = dict(zip(fsdd["sweep"]["k"], fsdd["sweep"]["accuracy"]))
    a_s = dict(zip(scd["sweep"]["k"], scd["sweep"]["accuracy"]))
    gap0 = abs(a_f[0] - a_s[0])
    late = [abs(a_f[k] - a_s[k]) for k in range(56, 65)]
    out.append(("sweep gap at k>=56 below gap at k=0", max(late) - gap0, 0.0, max(late) < gap0))
    return out


def summarize(completed: dict, manifest: dict) -> dict:
    results = collect_results(completed, manifest)
    return {
        "results": results,
        "reference": REFERENCE,
        "verdicts": [{"check": n, "value": float(v), "target": t, "passed": bool(p)} for n, v, t, p in verdicts(results)],
    }


def summary_text(summary: dict) -> str:
    r, ref = summary["results"], summary["reference"]
    lines = ["cell\tobtained\treference"]
    lines.append(f"lenet5\t{r['lenet5']['accuracy']:.4f}\t{ref['lenet5']:.3f}")
    for ds in DATASETS:
        lines.append(f"aivae {ds}\t{r['aivae'][ds]['accuracy']:.4f}\t{ref['aivae'][ds]:.3f}")
    for ds in DATASETS:
        for k, v in r["aivaegan"][ds].items():
            lines.append(f"aivaegan {ds} alpha={k}\t{v:.4f}\t{ref['aivaegan'][ds][k]:.3f}")
    lines.append("")
    lines.append("check\tvalue\ttarget\tverdict")
    for v in summary["verdicts"]:
        lines.append(f"{v['check']}\t{v['value']:.4f}\t{v['target']}\t{'PASS' if v['passed'] else 'FAIL'}")
    return "\n".join(lines) + "\n"
