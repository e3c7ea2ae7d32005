"""Drives the whole CLI pipeline in the current working directory with relative paths."""
from pathlib import Path

from pcvq2.cli import main

from conftest import TINY


def write_config(path, **train):
    values = {**TINY, "scale": 0.001, "vqvae_scale": 0.01, **train}
    body = "\n".join(f"{k} = {v}" for k, v in values.items())
    Path(path).write_text(f"[train]\n{body}\n", encoding="utf-8")


def run(*argv) -> None:
    code = main([str(a) for a in argv])
    assert code == 0, f"exit {code} for {argv}"


def run_pipeline(seed=0, n_images=16, samples=4, eval_n=8, **train):
    """Corpus, VQ-VAE, both priors, samples and report under ./runs."""
    write_config("train.ini", seed=seed, **train)
    run("make-synthetic", "--out", "runs/corpus", "--n", n_images, "--seed", seed)
    run("train-vqvae", "--config", "train.ini", "--data", "runs/corpus", "--out", "runs/vq")
    for level in ("top", "bottom"):
        run("train-prior", "--config", "train.ini", "--data", "runs/corpus",
            "--vqvae", "runs/vq/vqvae.ckpt", "--level", level, "--out", f"runs/{level}")
    models = ("--vqvae", "runs/vq/vqvae.ckpt", "--top", "runs/top/prior_top.ckpt",
              "--bottom", "runs/bottom/prior_bottom.ckpt")
    run("sample", *models, "--n", samples, "--seed", seed, "--out", "runs/samples")
    run("eval", *models, "--real", "runs/corpus", "--n", eval_n, "--seed", seed,
        "--out", "runs/report.txt")


def artifact_bytes(root="runs") -> dict[str, bytes]:
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
