"""File formats: market, schedule and certificate JSON, trajectory CSV.

Reals are written with 17 significant digits so every file reads back to
the exact doubles that were written.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .dynamics import ActivationSchedule, Trajectory
from .errors import InvalidInputError
from .market import MarketInstance


def format_real(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def _encode(obj) -> str:
    # json.dumps offers no hook for float formatting, so walk the value here
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_real(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj) -> str:
    return _encode(obj) + "\n"


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InvalidInputError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: not valid JSON ({exc})") from exc


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --------------------------------------------------------------------------
# market


def market_to_dict(market: MarketInstance) -> dict:
    return {
        "n": market.n,
        "m": market.m,
        "budgets": market.budgets,
        "valuations": market.valuations,
    }


def market_from_dict(data) -> MarketInstance:
    if not isinstance(data, dict):
        raise InvalidInputError("market JSON must be an object")
    try:
        market = MarketInstance(budgets=data["budgets"], valuations=data["valuations"])
    except KeyError as exc:
        raise InvalidInputError(f"market JSON lacks field {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(f"malformed market arrays: {exc}") from exc
    for key, value in (("n", market.n), ("m", market.m)):
        if key in data and data[key] != value:
            raise InvalidInputError(f"declared {key}={data[key]} but arrays give {value}")
    return market


def write_market(market: MarketInstance, path) -> None:
    _write(path, dumps(market_to_dict(market)))


def read_market(path) -> MarketInstance:
    return market_from_dict(read_json(path))


# --------------------------------------------------------------------------
# bid profiles


def write_bids(b, path) -> None:
    _write(path, dumps({"bids": np.asarray(b, dtype=float)}))


def read_bids(path) -> np.ndarray:
    """Bids from a JSON array of rows, or from an object with a ``bids`` field
    (which includes certificate files)."""
    data = read_json(path)
    if isinstance(data, dict):
        if "bids" not in data:
            raise InvalidInputError(f"{path}: object has no 'bids' field")
        data = data["bids"]
    try:
        arr = np.array(data, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{path}: malformed bid array") from exc
    if arr.ndim != 2:
        raise InvalidInputError(f"{path}: bids must be a 2-d array")
    return arr


# --------------------------------------------------------------------------
# schedules


def schedule_to_json(s: ActivationSchedule) -> str:
    steps = [list(step) for step in s.steps]
    if s.liveness_T is None:
        return dumps(steps)
    return dumps({"T": s.liveness_T, "steps": steps})


def schedule_from_json(data, n: int) -> ActivationSchedule:
    """Accept a bare array of steps or an object ``{"steps": [...], "T": k}``."""
    T = None
    if isinstance(data, dict):
        if "steps" not in data:
            raise InvalidInputError("schedule object has no 'steps' field")
        T = data.get("T")
        data = data["steps"]
    if not isinstance(data, list) or not all(isinstance(s, list) for s in data):
        raise InvalidInputError("schedule must be an array of arrays of buyer indices")
    for step in data:
        if not all(isinstance(i, int) and not isinstance(i, bool) for i in step):
            raise InvalidInputError("schedule entries must be integer buyer indices")
    if T is not None and (not isinstance(T, int) or isinstance(T, bool)):
        raise InvalidInputError("schedule 'T' must be an integer")
    return ActivationSchedule(n=n, steps=tuple(tuple(s) for s in data), liveness_T=T)


def write_schedule(s: ActivationSchedule, path) -> None:
    _write(path, schedule_to_json(s))


def read_schedule(path, n: int) -> ActivationSchedule:
    return schedule_from_json(read_json(path), n)


# --------------------------------------------------------------------------
# certificates


def certificate_to_dict(cert) -> dict:
    return {
        "prices": cert.prices,
        "utilities": cert.utilities,
        "residuals": {k: float(v) for k, v in cert.residuals.items()},
        "acyclic": bool(cert.acyclic),
        "generic_verdict": cert.generic_verdict,
        "methods_agree": cert.methods_agree,
        "bids": cert.bids,
    }


def write_certificate(cert, path) -> None:
    _write(path, dumps(certificate_to_dict(cert)))


def read_certificate(path) -> dict:
    """Certificate fields with arrays as numpy arrays."""
    data = read_json(path)
    required = ("prices", "utilities", "residuals", "acyclic", "generic_verdict", "methods_agree", "bids")
    missing = [k for k in required if k not in data]
    if missing:
        raise InvalidInputError(f"{path}: certificate lacks {missing}")
    for key in ("prices", "utilities", "bids"):
        data[key] = np.array(data[key], dtype=float)
    return data


# --------------------------------------------------------------------------
# trajectories


def trajectory_header(m: int) -> list[str]:
    return ["t", "potential", "nsw", "distance"] + [f"price_{j}" for j in range(m)]


def write_trajectory(traj: Trajectory, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = traj.prices.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_header(m))
        for k in range(traj.t.size):
            w.writerow(
                [str(int(traj.t[k])), format_real(traj.potential[k]), format_real(traj.nsw[k]),
                 format_real(traj.distance[k])]
                + [format_real(v) for v in traj.prices[k]]
            )


def read_trajectory(path) -> dict:
    """Columns of a trajectory CSV: ``t``, ``potential``, ``nsw``,
    ``distance`` and the ``(rows, m)`` array ``prices``."""
    try:
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise InvalidInputError(f"no such file: {path}") from exc
    if not rows:
        raise InvalidInputError(f"{path}: empty trajectory file")
    header, body = rows[0], rows[1:]
    m = len(header) - 4
    if m < 1 or header != trajectory_header(m):
        raise InvalidInputError(f"{path}: unexpected trajectory header")
    try:
        vals = np.array([[float(x) for x in r] for r in body], dtype=float).reshape(len(body), m + 4)
    except ValueError as exc:
        raise InvalidInputError(f"{path}: malformed trajectory row") from exc
    return {
        "t": vals[:, 0].astype(int),
        "potential": vals[:, 1],
        "nsw": vals[:, 2],
        "distance": vals[:, 3],
        "prices": vals[:, 4:],
    }
