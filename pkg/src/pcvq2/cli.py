"""Command-line entry point.

Values resolve as flags > config file > defaults. The config file holds a
``[run]`` section (paths, counts, seeds) and, for the training commands, a
``[train]`` section with :class:`pcvq2.train.TrainConfig` fields. Unknown
sections or keys are usage errors. Artifact-producing commands write the
resolved values back out in the same format, so ``--config`` on that file
replays the run.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Sequence

from . import checkpoint
from .train import TrainConfig

PROG = "pcvq2"
AUDIT_NAME = "resolved_config.ini"
REQUIRED = object()

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# run-section keys per command: name -> (type, default)
RUN_KEYS: dict[str, dict[str, tuple[type, Any]]] = {
    "make-synthetic": {"out": (str, REQUIRED), "n": (int, 100), "resolution": (int, 32),
                       "seed": (int, 0)},
    "train-vqvae": {"data": (str, REQUIRED), "subset": (str, ""), "out": (str, REQUIRED)},
    "train-prior": {"data": (str, REQUIRED), "subset": (str, ""), "out": (str, REQUIRED),
                    "vqvae": (str, REQUIRED), "level": (str, REQUIRED)},
    "sample": {"vqvae": (str, REQUIRED), "top": (str, REQUIRED), "bottom": (str, REQUIRED),
               "n": (int, 8), "seed": (int, 0), "temperature": (float, 1.0),
               "out": (str, REQUIRED)},
    "eval": {"real": (str, REQUIRED), "subset": (str, ""), "vqvae": (str, REQUIRED),
             "top": (str, REQUIRED), "bottom": (str, REQUIRED), "n": (int, 500),
             "seed": (int, 0), "features": (str, "fixed:0"), "out": (str, REQUIRED)},
    "augment-preview": {"input": (str, REQUIRED), "iteration": (int, 0),
                        "mode": (str, "phased"), "scale": (float, 1.0), "index": (int, 0),
                        "seed": (int, 0), "out": (str, REQUIRED)},
    "gradcheck": {"seed": (int, 0), "instances": (int, 0), "eps": (float, 1e-5)},
}
TRAIN_COMMANDS = ("train-vqvae", "train-prior")
# flags that land in the [train] section
TRAIN_FLAGS = {"seed": "seed", "scale": "scale", "vqvae_scale": "vqvae_scale",
               "batch_size": "batch_size", "base_lr": "base_lr", "aug": "aug_mode"}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Hierarchical VQ-VAE with phased augmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    helps = {
        "make-synthetic": "write a seeded synthetic PNG corpus",
        "train-vqvae": "train the two-level VQ-VAE",
        "train-prior": "train the top or bottom prior",
        "sample": "generate images from trained checkpoints",
        "eval": "Frechet distance of generated images against a real set",
        "augment-preview": "apply the augmentation policy of one iteration to an image",
        "gradcheck": "finite-difference gradient suite",
    }
    for name, keys in RUN_KEYS.items():
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", required=name in TRAIN_COMMANDS,
                       help="config file with [run]%s sections" %
                            (" and [train]" if name in TRAIN_COMMANDS else ""))
        for key, (typ, _) in keys.items():
            kw: dict[str, Any] = {"type": typ, "default": argparse.SUPPRESS}
            if key == "level":
                kw["choices"] = ("top", "bottom")
            if key == "mode":
                kw["choices"] = ("phased", "standard", "none")
            p.add_argument(_flag(key), **kw)
        if name in TRAIN_COMMANDS:
            p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
            p.add_argument("--scale", type=float, default=argparse.SUPPRESS)
            p.add_argument("--vqvae-scale", type=float, default=argparse.SUPPRESS)
            p.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
            p.add_argument("--base-lr", type=float, default=argparse.SUPPRESS)
            if name == "train-prior":
                p.add_argument("--aug", choices=("phased", "standard", "none"),
                               default=argparse.SUPPRESS)
    return parser


def _train_types() -> dict[str, Callable[[str], Any]]:
    out: dict[str, Callable[[str], Any]] = {}
    for f in fields(TrainConfig):
        default = f.default
        if isinstance(default, tuple):
            out[f.name] = lambda s: tuple(float(v) if "." in v or "e" in v else int(v)
                                          for v in (p.strip() for p in s.split(",")) if v)
        else:
            out[f.name] = type(default)
    return out


def _format(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config(path: str | Path, command: str) -> tuple[dict, dict]:
    """``(train, run)`` dicts of typed values from a config file."""
    parser = configparser.ConfigParser(interpolation=None, default_section="\0none")
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    except configparser.Error as e:
        raise UsageError(f"malformed config {path}: {str(e).splitlines()[0]}") from None
    allowed = {"run"} | ({"train"} if command in TRAIN_COMMANDS else set())
    extra = set(parser.sections()) - allowed
    if extra:
        raise UsageError(f"unknown config section(s) {sorted(extra)} for {command}")
    types = {"run": {k: t for k, (t, _) in RUN_KEYS[command].items()}, "train": _train_types()}
    out: dict[str, dict] = {"train": {}, "run": {}}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in types[section]:
                raise UsageError(f"unknown key {key!r} in [{section}] of {path}")
            try:
                out[section][key] = types[section][key](raw.strip())
            except ValueError:
                raise UsageError(f"bad value for {section}.{key}: {raw!r}") from None
    return out["train"], out["run"]


def resolve(args: argparse.Namespace) -> tuple[TrainConfig | None, dict]:
    """Merge defaults, config file and flags."""
    command = args.command
    file_train, file_run = read_config(args.config, command) if args.config else ({}, {})
    given = vars(args)
    run = {}
    for key, (_, default) in RUN_KEYS[command].items():
        value = given.get(key, file_run.get(key, default))
        if value is REQUIRED:
            raise UsageError(f"{command}: missing required value {_flag(key)}")
        run[key] = value
    if command not in TRAIN_COMMANDS:
        return None, run
    train = dict(file_train)
    for flag, key in TRAIN_FLAGS.items():
        if flag in given:
            train[key] = given[flag]
    try:
        return TrainConfig.from_dict(train), run
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from None


def config_text(cfg: TrainConfig | None, run: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if cfg is not None:
        parser["train"] = {k: _format(v) for k, v in cfg.to_dict().items()}
    parser["run"] = {k: _format(v) for k, v in run.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_audit(out_dir: Path, cfg: TrainConfig | None, run: dict) -> Path:
    path = out_dir / AUDIT_NAME
    path.write_text(config_text(cfg, run), encoding="utf-8")
    return path


def _load_images(directory: str, subset: str, resolution: int):
    from .data import DatasetManifest, load_dataset, select_subset

    manifest = DatasetManifest.from_directory(directory, resolution)
    if subset:
        manifest = select_subset(manifest, subset)
    return manifest, load_dataset(manifest)


def _out_dir(run: dict) -> Path:
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_make_synthetic(cfg, run) -> str:
    from .data import make_synthetic_corpus

    out = _out_dir(run)
    manifest = make_synthetic_corpus(out, run["n"], run["resolution"], run["seed"])
    write_audit(out, None, run)
    return f"wrote {len(manifest.files)} images to {out}"


def _save_failure(out: Path, err) -> None:
    checkpoint.save(err.checkpoint, out / "failed.ckpt")


def cmd_train_vqvae(cfg: TrainConfig, run) -> str:
    from .data import save_manifest
    from .train import TrainingError, train_vqvae

    manifest, images = _load_images(run["data"], run["subset"], cfg.resolution)
    out = _out_dir(run)
    write_audit(out, cfg, run)
    save_manifest(manifest, out / "manifest.txt")
    try:
        ckpt = train_vqvae(images, cfg, out / "metrics.csv")
    except TrainingError as e:
        _save_failure(out, e)
        raise
    checkpoint.save(ckpt, out / "vqvae.ckpt")
    return f"vqvae: {cfg.vqvae_iterations} iterations, final loss {ckpt.metrics[-1]['loss']:.5f}"


def cmd_train_prior(cfg: TrainConfig, run) -> str:
    from .data import save_manifest
    from .train import TrainingError, train_prior

    level = run["level"]
    if level not in ("top", "bottom"):
        raise UsageError(f"level must be top or bottom, got {level!r}")
    vq = checkpoint.load(run["vqvae"])
    manifest, images = _load_images(run["data"], run["subset"], cfg.resolution)
    out = _out_dir(run)
    write_audit(out, cfg, run)
    save_manifest(manifest, out / "manifest.txt")
    try:
        ckpt = train_prior(level, images, vq, cfg, out / "metrics.csv")
    except TrainingError as e:
        _save_failure(out, e)
        raise
    checkpoint.save(ckpt, out / f"prior_{level}.ckpt")
    return (f"{level} prior: {cfg.prior_iterations} iterations, "
            f"final nll {ckpt.meta['final_nll']:.4f}")


def _load_models(run):
    from .train import load_prior, load_vqvae

    return (load_vqvae(checkpoint.load(run["vqvae"])), load_prior(checkpoint.load(run["top"])),
            load_prior(checkpoint.load(run["bottom"])))


def cmd_sample(cfg, run) -> str:
    from .sample import SamplerRequest, generate_images, write_samples

    models = _load_models(run)
    images = generate_images(*models, SamplerRequest(run["n"], run["seed"], run["temperature"]))
    out = _out_dir(run)
    write_samples(images, out)
    write_audit(out, None, run)
    return f"wrote {len(images)} samples to {out}"


def cmd_eval(cfg, run) -> str:
    from .eval import FeatureExtractor, evaluate, write_report

    vq, top, bottom = _load_models(run)
    extractor = FeatureExtractor.parse(run["features"])
    _, real = _load_images(run["real"], run["subset"], vq.config.resolution)
    report = evaluate(vq, top, bottom, real, run["n"], extractor, seed=run["seed"])
    # the report is the only artifact, so it carries the resolved run config
    report.update({f"run.{k}": v for k, v in run.items()})
    out = Path(run["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    return f"score = {report['score']!r}"


def cmd_augment_preview(cfg, run) -> str:
    from . import augment
    from .data import decode_image, write_png
    from .seeding import derive_seed

    img = decode_image(run["input"])
    schedule = augment.PhaseSchedule.for_mode(run["mode"], run["scale"])
    phase, policy = augment.policy_for_iteration(schedule, run["iteration"])
    rng = augment.SampleRng(derive_seed(run["seed"], "augment", "preview"), run["iteration"],
                            run["index"])
    out = Path(run["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(augment.apply(img, policy, rng), out, text={"pcvq2-config": config_text(None, run)})
    return f"phase {phase}: wrote {out}"


def cmd_gradcheck(cfg, run) -> str:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(seed=run["seed"], instances=run["instances"] or None, eps=run["eps"],
                        report=lambda n, w, t: print(f"{n:24s} {w:.3e}  ({t:.1f}s)", flush=True))
    bad = [n for n, w in results.items() if not w < TOLERANCE]
    if bad:
        raise GradientCheckFailed(f"relative error >= {TOLERANCE:g} for {', '.join(bad)}")
    return f"all {len(results)} ops below {TOLERANCE:g}"


class GradientCheckFailed(RuntimeError):
    pass


COMMANDS: dict[str, Callable] = {
    "make-synthetic": cmd_make_synthetic,
    "train-vqvae": cmd_train_vqvae,
    "train-prior": cmd_train_prior,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "augment-preview": cmd_augment_preview,
    "gradcheck": cmd_gradcheck,
}


def _one_line(e: BaseException) -> str:
    msg = " ".join(str(e).split()) or type(e).__name__
    return f"{PROG}: error: {msg}"


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg, run = resolve(args)
    except UsageError as e:
        print(_one_line(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        print(COMMANDS[args.command](cfg, run))
    except UsageError as e:
        print(_one_line(e), file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every failure becomes one diagnostic line
        print(_one_line(e), file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
