"""CSV exports: latent projections, selections, energy traces, and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .model import ModelConfig, forward, free_energies, unflatten


def pca_2d(points: np.ndarray) -> np.ndarray:
    """Project onto the top two principal components.

    Each component's sign is fixed so its largest-magnitude loading is
    positive, which keeps the output reproducible across LAPACK builds.
    """
    X = np.asarray(points, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    proj = Xc @ comps.T
    if proj.shape[1] < 2:
        proj = np.concatenate([proj, np.zeros((proj.shape[0], 2 - proj.shape[1]))], axis=1)
    return proj - proj.mean(axis=0)


def projection_rows(theta, model_config: ModelConfig, federation, selection) -> list[tuple]:
    """One row per sample of every source pool and the target: latent PCA plus energy."""
    params = unflatten(model_config, theta, copy=False)
    blocks = []
    for k, src in enumerate(federation.sources):
        selected = np.zeros(len(src), dtype=bool)
        selected[selection.indices[k]] = True
        blocks.append((src, selected))
    blocks.append((federation.target, np.zeros(len(federation.target), dtype=bool)))
    zs, meta = [], []
    for ds, selected in blocks:
        trace = forward(params, ds.features, mode="eval")
        zs.append(trace.mu)
        F = free_energies(trace.logits)
        meta += list(zip([ds.domain] * len(ds), ds.labels.tolist(), selected.astype(int).tolist(), F.tolist()))
    pcs = pca_2d(np.concatenate(zs))
    # full precision so the exported components stay centred to rounding error
    return [(d, y, sel, repr(f), repr(float(p[0])), repr(float(p[1])))
            for (d, y, sel, f), p in zip(meta, pcs)]


def write_rows(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def write_projection(path, rows) -> None:
    write_rows(path, ["domain", "label", "is_selected", "free_energy", "pc1", "pc2"], rows)


def write_energy_log(path, energy_log) -> None:
    rows = []
    for r in energy_log:
        rows.append([r.round, r.target_energy, float(np.mean(r.source_energies)),
                     r.fea_loss, int(r.stepped)])
    write_rows(path, ["round", "target_free_energy", "source_free_energy_mean", "fea_loss", "stepped"], rows)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, config: dict, config_digest: str, outputs: list[Path], timings: dict) -> Path:
    """Write ``manifest.json`` atomically (temp file + rename)."""
    out_dir = Path(out_dir)
    manifest = {
        "config": config,
        "config_hash": config_digest,
        "outputs": {str(Path(p).relative_to(out_dir)): sha256_file(p) for p in sorted(outputs)},
        "timings_seconds": timings,
    }
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    final = out_dir / "manifest.json"
    os.replace(tmp, final)
    return final
