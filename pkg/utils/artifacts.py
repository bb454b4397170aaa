""" File emission helpers: JSON, CSV, static plots and content-hash manifests """
import hashlib
import json
import logging
import os
from typing import Dict, Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

# Agg writes a Software tag by default; dropping it keeps PNG bytes stable across versions
PNG_METADATA = {"Software": None}


def _surface(path: str, exc: Exception):
    raise OSError(f"failed to write artifact {path}: {exc}") from exc


def write_json(path: str, payload) -> str:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    except OSError as e:
        _surface(path, e)
    return path


def write_csv(frame: pd.DataFrame, path: str) -> str:
    try:
        frame.to_csv(path, index=False, float_format="%.10g")
    except OSError as e:
        _surface(path, e)
    return path


def _save(fig, path: str) -> str:
    try:
        fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    except OSError as e:
        _surface(path, e)
    finally:
        plt.close(fig)
    return path


def plot_trajectory_curves(curves: pd.DataFrame, path: str) -> str:
    """ Per-step mean norm and variance of predicted noise, one line per model """
    fig, (ax_mean, ax_var) = plt.subplots(1, 2, figsize=(10, 4))
    for model_id, group in curves.groupby("model_id", sort=True):
        ax_mean.plot(group["step"], group["mean_norm"], label=model_id)
        ax_var.plot(group["step"], group["variance"], label=model_id)
    ax_mean.set_xlabel("timestep")
    ax_mean.set_ylabel("|mean predicted noise|")
    ax_var.set_xlabel("timestep")
    ax_var.set_ylabel("variance of predicted noise")
    ax_mean.invert_xaxis()
    ax_var.invert_xaxis()
    ax_var.legend(fontsize="x-small")
    fig.tight_layout()
    return _save(fig, path)


def plot_asr_curve(curve: pd.DataFrame, path: str) -> str:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(curve["iteration_budget"], curve["asr"], where="post")
    ax.set_xlabel("optimization iterations")
    ax.set_ylabel("ASR")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    return _save(fig, path)


def plot_similarity_hist(similarities: Iterable[float], path: str) -> str:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.hist(list(similarities), bins=20, range=(-1.0, 1.0))
    ax.axvline(0.5, color="gray", linestyle="--")
    ax.set_xlabel("similarity to reference")
    ax.set_ylabel("count")
    fig.tight_layout()
    return _save(fig, path)


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def remove_stale(out_dir: str, names: Iterable[str]) -> list:
    """ Delete leftovers of an earlier emission so the directory only holds what this one writes """
    removed = []
    for name in names:
        path = os.path.join(out_dir, name)
        if os.path.isfile(path):
            try:
                os.remove(path)
            except OSError as e:
                raise OSError(f"cannot remove stale artifact {path}: {e}") from e
            removed.append(name)
    if removed:
        logging.info(f"[ARTIFACT] removed stale files from {out_dir}: {removed}")
    return removed


def files_in(out_dir: str, exclude: Iterable[str] = ("manifest.json",)) -> list:
    skip = set(exclude)
    return sorted(os.path.join(out_dir, name) for name in os.listdir(out_dir)
                  if name not in skip and os.path.isfile(os.path.join(out_dir, name)))


def write_manifest(out_dir: str, files: Iterable[str], name: str = "manifest.json") -> Dict[str, str]:
    """ Map of file name -> sha256 for every listed file, written next to them """
    manifest = {os.path.relpath(p, out_dir): file_sha256(p) for p in sorted(files)}
    write_json(os.path.join(out_dir, name), manifest)
    logging.info(f"[ARTIFACT] manifest lists {len(manifest)} files in {out_dir}")
    return manifest
