"""Separately observed samples, the signed/weighted combined datasets, and file I/O.

The four inputs are, for each regime ``k in {0, 1}``:

* covariates of treated units, ``x ~ P(X | D^(k) = 1)``;
* outcome/covariate pairs, ``(y, x) ~ P(Y^(k), X)``;

plus the treatment rates ``p_d_hat[k]``. Regime membership probability is
fixed at 1/2 throughout.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    InputError,
    MalformedRowError,
    MissingFileError,
    ValidationError,
)
from .kernel_basis import KernelBasis, kernel_from_sq_dists, squared_distances

TREATMENT = "treatment"
OUTCOME = "outcome"

CONFIG_KEYS = ("treated_cov_1", "treated_cov_0", "outcomes_1", "outcomes_0")


def _frozen(a, ndim):
    a = np.array(a, dtype=np.float64)
    if ndim == 2 and a.ndim == 1:
        a = a[:, None]
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SeparateDatasets:
    """The four separately observed sample sets, indexed by regime ``k``.

    ``treated_cov[k]`` is ``(n_d^(k), q_x)``; ``outcome_y[k]`` is ``(n^(k),)``
    and ``outcome_x[k]`` is ``(n^(k), q_x)``.
    """

    treated_cov: tuple
    outcome_y: tuple
    outcome_x: tuple
    p_d_hat: tuple

    def __post_init__(self):
        tc = tuple(_frozen(a, 2) for a in self.treated_cov)
        oy = tuple(_frozen(a, 1).reshape(-1) for a in self.outcome_y)
        ox = tuple(_frozen(a, 2) for a in self.outcome_x)
        p = tuple(float(v) for v in self.p_d_hat)
        if not (len(tc) == len(oy) == len(ox) == len(p) == 2):
            raise InputError("expected exactly two regimes (k = 0, 1) for every field")
        dims = {a.shape[1] for a in tc + ox}
        if len(dims) != 1:
            raise DimensionMismatchError(f"covariate dimensions disagree across sets: {sorted(dims)}")
        for k in (0, 1):
            if tc[k].shape[0] == 0:
                raise InputError(f"treated covariate set for k={k} is empty")
            if ox[k].shape[0] == 0:
                raise InputError(f"outcome set for k={k} is empty")
            if oy[k].shape[0] != ox[k].shape[0]:
                raise InputError(f"outcome set k={k}: {oy[k].shape[0]} outcomes vs {ox[k].shape[0]} rows")
            if not (0.0 <= p[k] <= 1.0):
                raise ValidationError(f"p_d_hat_{k} = {p[k]!r} is outside [0, 1]")
        object.__setattr__(self, "treated_cov", tc)
        object.__setattr__(self, "outcome_y", oy)
        object.__setattr__(self, "outcome_x", ox)
        object.__setattr__(self, "p_d_hat", p)

    @property
    def dim(self) -> int:
        return self.treated_cov[0].shape[1]


@dataclass(frozen=True, eq=False)
class CombinedDataset:
    """Signed, importance-weighted merge of both regimes.

    ``values`` holds ``t`` (treatment side, +1/-1) or the signed outcome ``u``
    (outcome side). Rows of regime 1 come first.
    """

    values: np.ndarray
    x: np.ndarray
    weights: np.ndarray
    kind: str
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in (TREATMENT, OUTCOME):
            raise InputError(f"unknown combined dataset kind {self.kind!r}")
        object.__setattr__(self, "values", _frozen(self.values, 1).reshape(-1))
        object.__setattr__(self, "x", _frozen(self.x, 2))
        object.__setattr__(self, "weights", _frozen(self.weights, 1).reshape(-1))
        n = self.values.shape[0]
        if self.x.shape[0] != n or self.weights.shape[0] != n:
            raise InputError("values, x and weights must have the same number of rows")

    def __len__(self):
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def design(self, basis: KernelBasis) -> np.ndarray:
        """Kernel design matrix of the rows, reusing squared distances per center set."""
        key = id(basis.centers)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not basis.centers:
            hit = (basis.centers, squared_distances(self.x, basis.centers))
            self._cache[key] = hit
        return kernel_from_sq_dists(hit[1], basis.bandwidth)

    def memo(self, owner, fn):
        """Cache ``fn()`` for the lifetime of ``owner`` (compared by identity)."""
        key = ("memo", id(owner))
        hit = self._cache.get(key)
        if hit is None or hit[0] is not owner:
            hit = (owner, fn())
            self._cache[key] = hit
        return hit[1]


def combine_treatment(data: SeparateDatasets) -> CombinedDataset:
    n1, n0 = (data.treated_cov[k].shape[0] for k in (1, 0))
    if n1 == 0 or n0 == 0:
        raise InputError("both treated covariate sets must be nonempty")
    total = n1 + n0
    w1 = data.p_d_hat[1] * total / (2.0 * n1)
    w0 = data.p_d_hat[0] * total / (2.0 * n0)
    return CombinedDataset(
        values=np.concatenate([np.ones(n1), -np.ones(n0)]),
        x=np.vstack([data.treated_cov[1], data.treated_cov[0]]),
        weights=np.concatenate([np.full(n1, w1), np.full(n0, w0)]),
        kind=TREATMENT,
    )


def combine_outcome(data: SeparateDatasets) -> CombinedDataset:
    n1, n0 = (data.outcome_x[k].shape[0] for k in (1, 0))
    if n1 == 0 or n0 == 0:
        raise InputError("both outcome sets must be nonempty")
    total = n1 + n0
    return CombinedDataset(
        values=np.concatenate([data.outcome_y[1], -data.outcome_y[0]]),
        x=np.vstack([data.outcome_x[1], data.outcome_x[0]]),
        weights=np.concatenate([np.full(n1, total / (2.0 * n1)), np.full(n0, total / (2.0 * n0))]),
        kind=OUTCOME,
    )


def weighted_moment(ds: CombinedDataset, f) -> float:
    """Sample average ``(1/n) sum r_i v_i f(x_i)``; ``f`` maps an ``(n, q)`` array to ``(n,)``."""
    fx = np.broadcast_to(np.asarray(f(ds.x), dtype=np.float64), (ds.n,))
    return float(np.sum(ds.weights * ds.values * fx) / ds.n)


# --- files -----------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def _read_csv(path: Path, with_outcome: bool, allow_extra: bool = False):
    if not path.is_file():
        raise MissingFileError("file not found", path=path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRowError("missing header row", path=path, line=1) from None
        header = [h.strip() for h in header]
        lead = 1 if with_outcome else 0
        if allow_extra and "x1" in header:
            lead = header.index("x1")
        expected_x = header[lead:]
        if with_outcome and (not header or header[0] != "y"):
            raise MalformedRowError(f"first column must be 'y', got {header[:1]}", path=path, line=1)
        if not expected_x or expected_x != [f"x{j + 1}" for j in range(len(expected_x))]:
            raise MalformedRowError(f"covariate columns must be x1..xq, got {expected_x}", path=path, line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedRowError(
                    f"expected {len(header)} fields, got {len(row)}", path=path, line=lineno
                )
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise MalformedRowError(f"non-numeric field in {row}", path=path, line=lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise MalformedRowError("non-finite value", path=path, line=lineno)
            rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    q = len(expected_x)
    if with_outcome:
        return arr[:, 0].copy(), arr[:, 1:].copy(), q
    return arr[:, lead:].copy(), q


def read_covariates_csv(path, allow_extra: bool = False) -> np.ndarray:
    """Read a covariate CSV with header ``x1..xq``.

    With ``allow_extra`` any columns before ``x1`` (e.g. ``mu`` in a test file)
    are parsed for validity and then dropped.
    """
    arr, _ = _read_csv(Path(path), with_outcome=False, allow_extra=allow_extra)
    return arr


def load_separate_datasets(config_path) -> SeparateDatasets:
    """Load the four CSV files referenced by a JSON config.

    Relative paths in the config resolve against the config's directory.
    """
    config_path = Path(config_path)
    if not config_path.is_file():
        raise MissingFileError("config not found", path=config_path)
    try:
        cfg = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedRowError(f"invalid JSON: {exc.msg}", path=config_path, line=exc.lineno) from None
    missing = [k for k in CONFIG_KEYS + ("p_d_hat_1", "p_d_hat_0") if k not in cfg]
    if missing:
        raise ValidationError(f"config is missing keys {missing}", path=config_path)
    p = []
    for k in (0, 1):
        v = cfg[f"p_d_hat_{k}"]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not (0.0 <= v <= 1.0):
            raise ValidationError(f"p_d_hat_{k} = {v!r} must be a number in [0, 1]", path=config_path)
        p.append(float(v))

    base = config_path.parent
    paths = {key: base / cfg[key] for key in CONFIG_KEYS}
    treated, outcomes, dims = {}, {}, {}
    for k in (1, 0):
        treated[k], dims[f"treated_cov_{k}"] = _read_csv(paths[f"treated_cov_{k}"], with_outcome=False)
        y, x, dims[f"outcomes_{k}"] = _read_csv(paths[f"outcomes_{k}"], with_outcome=True)
        outcomes[k] = (y, x)
    for key, q in dims.items():
        ref = "treated_cov_1"
        if q != dims[ref]:
            raise DimensionMismatchError(
                f"q_x={q} in {paths[key]} but q_x={dims[ref]} in {paths[ref]}", path=paths[key]
            )
    for key in CONFIG_KEYS:
        k = int(key[-1])
        n = treated[k].shape[0] if key.startswith("treated") else outcomes[k][0].shape[0]
        if n == 0:
            raise ValidationError("dataset has no rows", path=paths[key])
    return SeparateDatasets(
        treated_cov=(treated[0], treated[1]),
        outcome_y=(outcomes[0][0], outcomes[1][0]),
        outcome_x=(outcomes[0][1], outcomes[1][1]),
        p_d_hat=(p[0], p[1]),
    )


def write_covariates_csv(path, x, extra=None):
    """Write ``x1..xq`` columns, optionally preceded by named leading columns."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    extra = extra or {}
    header = list(extra) + [f"x{j + 1}" for j in range(x.shape[1])]
    cols = [np.asarray(v, dtype=np.float64).reshape(-1) for v in extra.values()]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(x.shape[0]):
            w.writerow([_fmt(c[i]) for c in cols] + [_fmt(v) for v in x[i]])


def save_separate_datasets(data: SeparateDatasets, directory, prefix="") -> Path:
    """Write the four CSVs and a config JSON into ``directory``; returns the config path."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    cfg = {}
    for k in (1, 0):
        tname = f"{prefix}treated_cov_{k}.csv"
        oname = f"{prefix}outcomes_{k}.csv"
        write_covariates_csv(directory / tname, data.treated_cov[k])
        write_covariates_csv(directory / oname, data.outcome_x[k], extra={"y": data.outcome_y[k]})
        cfg[f"treated_cov_{k}"] = tname
        cfg[f"outcomes_{k}"] = oname
    cfg["p_d_hat_1"] = data.p_d_hat[1]
    cfg["p_d_hat_0"] = data.p_d_hat[0]
    path = directory / f"{prefix}config.json"
    path.write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    return path
