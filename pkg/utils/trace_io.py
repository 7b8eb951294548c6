"""
Trace and result files.

A trace is stored as a CSV `t,delta_alpha[,delta_epsilon,delta_abs,delta_phase]`
with every value written as %.17e, plus a sidecar `<name>.meta.json` holding TraceMeta.
"""

import csv
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from models.schemas import ReconstructionResult, StateSpec, TraceMeta
from services.forward import SignalTrace
from services.qstate import DensityMatrix, random_mixed, random_pure, reference_state
from utils.errors import ConfigError
from utils.json_encoder import finite_or_none, numpy_safe_dumps

logger = logging.getLogger(__name__)

# CSV column -> SignalTrace field
CHANNELS = {
    "delta_alpha": "delta_alpha",
    "delta_epsilon": "delta_epsilon",
    "delta_abs": "delta_absorption",
    "delta_phase": "delta_phase",
}


def meta_path(csv_path) -> Path:
    path = Path(csv_path)
    return path.with_name(path.stem + ".meta.json")


def write_trace(trace: SignalTrace, path) -> Path:
    """Write the trace CSV and its metadata sidecar; returns the CSV path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    channels = [column for column, field in CHANNELS.items() if getattr(trace, field) is not None]
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t", *channels])
        columns = [trace.times] + [getattr(trace, CHANNELS[column]) for column in channels]
        for row in zip(*columns):
            writer.writerow([f"{float(value):.17e}" for value in row])
    if trace.meta is not None:
        meta_path(path).write_text(
            numpy_safe_dumps(finite_or_none(trace.meta.model_dump(mode="json")), indent=2)
        )
    logger.debug(f"Wrote trace {path}", extra={"samples": trace.times.size})
    return path


def read_trace(path) -> SignalTrace:
    """
    Raises:
        FileNotFoundError: If the CSV is missing
        ValueError: If the header lacks t or delta_alpha
    """
    path = Path(path)
    with path.open(newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        values = np.array([[float(x) for x in row] for row in reader if row], dtype=float)
    if header[:2] != ["t", "delta_alpha"] or any(name not in CHANNELS for name in header[1:]):
        raise ValueError(f"{path}: unexpected trace header {header}")
    if values.size == 0:
        raise ValueError(f"{path}: trace has no samples")
    columns = {CHANNELS[name]: values[:, k + 1] for k, name in enumerate(header[1:])}
    meta: Optional[TraceMeta] = None
    sidecar = meta_path(path)
    if sidecar.exists():
        meta = TraceMeta.model_validate_json(sidecar.read_text())
    return SignalTrace(times=values[:, 0], meta=meta, **columns)


def read_traces(paths: Sequence) -> List[SignalTrace]:
    return [read_trace(p) for p in paths]


def write_density(rho: DensityMatrix, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rho.to_json())
    return path


def read_density(path) -> DensityMatrix:
    return DensityMatrix.from_json(Path(path).read_text())


def write_result(result: ReconstructionResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(numpy_safe_dumps(finite_or_none(result.model_dump(mode="json")), indent=2))
    return path


def write_matrix_magnitudes(rho: DensityMatrix, path) -> Path:
    """|rho| as nested lists (bar-chart data of the reconstruction figures)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(numpy_safe_dumps({"abs": np.abs(rho.elements), "elements": rho.elements}, indent=2))
    return path


def plot_traces(traces: Sequence[SignalTrace], path, fits: Optional[Sequence] = None) -> Path:
    """delta_alpha of each trace (and optional fitted curves) as an SVG (matplotlib, Agg backend)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(len(traces), 1, figsize=(6, 1.8 * len(traces)), sharex=True, squeeze=False)
    for k, trace in enumerate(traces):
        ax = axes[k, 0]
        ax.plot(trace.times, trace.delta_alpha, ".", markersize=2, label="signal")
        if fits is not None and fits[k] is not None:
            ax.plot(trace.times, fits[k], "-", linewidth=1, label="fit")
        if trace.meta is not None:
            ax.set_title(f"phi={trace.meta.pulse.phi:.3f}, theta={trace.meta.pulse.theta:.3f}", fontsize=8)
        ax.set_ylabel("delta_alpha")
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def load_state(state: StateSpec, seed) -> DensityMatrix:
    """
    Resolve a named state or a DensityMatrix JSON file.

    Raises:
        ConfigError: If the state file is missing or not a valid density matrix
    """
    if state.file is not None:
        try:
            return read_density(state.file)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot load state file {state.file}: {e}") from e
    if state.name == "random_pure":
        return random_pure(seed=seed)
    if state.name == "random_mixed":
        return random_mixed(seed=seed, target_purity=state.purity)
    return reference_state(state.name)
