"""
Output writers: CSV tables, JSON documents, coordinate-format sparse matrices
and report figures.

Every file carries the tool version and the config hash: JSON documents in a
``provenance`` block, CSV and matrix files in a leading ``#`` comment line.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from matplotlib.figure import Figure

from .chain import TransitionModel
from .experiment import RunManifest
from .solver import InvariantDistribution

logger = logging.getLogger(__name__)


def provenance(manifest: RunManifest) -> dict:
    return {"version": manifest.version, "config_hash": manifest.config_hash, "seed": manifest.seed}


def _comment(manifest: RunManifest) -> str:
    return f"# depo-lab {manifest.version} config {manifest.config_hash} seed {manifest.seed}\n"


def write_json(path: Path, payload: dict, manifest: RunManifest, kind: str, root: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"provenance": provenance(manifest), **payload}
    path.write_text(json.dumps(document, indent=2, sort_keys=True, default=_jsonable) + "\n")
    manifest.add_artifact(path, kind, root)
    return path


def write_rows_csv(
    path: Path,
    rows: Sequence[dict],
    manifest: RunManifest,
    kind: str,
    root: Path,
    columns: Optional[Sequence[str]] = None,
) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as handle:
        handle.write(_comment(manifest))
        writer = csv.DictWriter(handle, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    manifest.add_artifact(path, kind, root)
    return path


def trajectory_rows(trajectory, kernel) -> Iterable[dict]:
    """One row per step t >= 1: dropped vertex, m_V(t) and the relative profile."""
    n = kernel.g.n
    for t in range(1, len(trajectory.direct)):
        row = {
            "t": t,
            "dropped_vertex": int(trajectory.dropped[t - 1]),
            "max_height": int(trajectory.direct[t]),
        }
        profile = kernel.profile(trajectory.states[t])
        row.update({f"x_{j}": profile[j] for j in range(n)})
        yield row


def trajectory_columns(n: int) -> list[str]:
    return ["t", "dropped_vertex", "max_height"] + [f"x_{j}" for j in range(n)]


def state_json(kernel, state):
    driver_kind = kernel.driver.kind
    if driver_kind == "layer":
        return state.as_json()
    if driver_kind == "markov":
        return {"profile": list(state[0]), "driver": state[1]}
    return list(state)


def export_state_space(
    model: TransitionModel, directory: Path, manifest: RunManifest, root: Path
) -> tuple[Path, Path]:
    """
    JSON manifest of the states plus a "row col value" text file. Leaked mass
    is written against column ``len(states)``, the tail class.
    """
    space = model.space
    kernel = space.kernel
    core = set(space.core_indices)
    states_path = write_json(
        directory / "states.json",
        {
            "depth_bound": space.depth_bound,
            "tail_index": space.tail_index,
            "core_indices": list(space.core_indices),
            "states": [
                {
                    "index": idx,
                    "encoding": enc.hex(),
                    "state": state_json(kernel, state),
                    "core": idx in core,
                }
                for idx, (enc, state) in enumerate(zip(space.encodings, space.states))
            ],
        },
        manifest,
        "state_space",
        root,
    )

    matrix = model.matrix.tocoo()
    order = np.lexsort((matrix.col, matrix.row))
    leaking = np.flatnonzero(model.leak > 0)
    matrix_path = directory / "transitions.coo"
    with matrix_path.open("w") as handle:
        handle.write(_comment(manifest))
        handle.write(f"{len(space)} {len(space) + 1} {matrix.nnz + leaking.size}\n")
        for i in order:
            handle.write(f"{matrix.row[i]} {matrix.col[i]} {matrix.data[i]!r}\n")
        for r in leaking:
            handle.write(f"{r} {space.tail_index} {float(model.leak[r])!r}\n")
    manifest.add_artifact(matrix_path, "transition_matrix", root)
    return states_path, matrix_path


def distribution_payload(pi: InvariantDistribution) -> dict:
    summary = {"method": pi.method, "tail_bound": pi.tail_bound, **pi.diagnostics}
    payload = {
        "summary": summary,
        "distribution": {enc.hex(): float(p) for enc, p in zip(pi.encodings, pi.probs)},
    }
    if pi.stderr is not None:
        payload["stderr"] = {enc.hex(): float(s) for enc, s in zip(pi.encodings, pi.stderr)}
    return payload


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Cannot serialise {type(value).__name__}")


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def _save(fig: Figure, path: Path, manifest: RunManifest, root: Path) -> Optional[Path]:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(str(path), dpi=160, bbox_inches="tight", facecolor="#ffffff")
    except Exception:  # noqa: BLE001
        logger.warning("Failed to write figure %s", path, exc_info=True)
        return None
    manifest.add_artifact(path, "figure", root)
    return path


def plot_coupling_decay(estimate, path: Path, manifest: RunManifest, root: Path) -> Optional[Path]:
    fig = Figure(figsize=(7.0, 4.2))
    ax = fig.add_subplot(111)
    lags = np.arange(estimate.horizon + 1)
    ax.step(lags, estimate.d_hat, where="post", color="#0f766e", label="empirical uncoupled fraction")
    ax.step(lags, estimate.bound, where="post", color="#b91c1c", linestyle="--", label="certified bound")
    ax.fill_between(
        lags,
        np.clip(estimate.d_hat - 3 * estimate.sigma, 0, 1),
        np.clip(estimate.d_hat + 3 * estimate.sigma, 0, 1),
        step="post", color="#99f6e4", alpha=0.5,
    )
    ax.set_xlabel("lag")
    ax.set_ylabel("P(not coalesced)")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path, manifest, root)


def plot_concentration(report, path: Path, manifest: RunManifest, root: Path) -> Optional[Path]:
    fig = Figure(figsize=(7.0, 4.2))
    ax = fig.add_subplot(111)
    ys = [row["y"] for row in report.rows]
    ax.semilogy(ys, [max(row["empirical"], 1e-12) for row in report.rows], "o-", color="#1d4ed8", label="empirical tail")
    ax.semilogy(ys, [max(row["bound"], 1e-12) for row in report.rows], "s--", color="#b91c1c", label="bound")
    ax.set_xlabel("y")
    ax.set_ylabel("P(|m_V(t) - mean| > y)")
    ax.legend(loc="lower left", fontsize=8)
    return _save(fig, path, manifest, root)


def plot_tv_decay(profile: np.ndarray, path: Path, manifest: RunManifest, root: Path) -> Optional[Path]:
    fig = Figure(figsize=(7.0, 4.2))
    ax = fig.add_subplot(111)
    ax.semilogy(np.arange(profile.size), np.maximum(profile, 1e-16), color="#7c3aed")
    ax.set_xlabel("t")
    ax.set_ylabel("TV(M^t(x, .), pi)")
    return _save(fig, path, manifest, root)
