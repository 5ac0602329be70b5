"""Observed-data records, design formulas, and parameter bundles.

A unit's complete data is (Y, Z, U); the analyst sees X = (Z, U) always and
Y only when the response indicator R is 1. Design formulas map (z, u) pairs
to numeric design vectors through a small term language:

    1: intercept               u2: second covariate      z: instrument
    u1:u2 pairwise product     u1^2 square               z:u1 product

Terms are separated by "+". Products are canonicalized (z first, then
ascending covariate index), so parse/to_string round-trips are exact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation, DataError

# Term encodings: ("1",) intercept, ("u", j) covariate, ("z",) instrument,
# ("uu", j, k) covariate product with j < k, ("u2", j) covariate square,
# ("zu", j) instrument-covariate product. Indices are 0-based internally.
_TermTuple = tuple

_U_TOKEN = re.compile(r"^u([1-9][0-9]*)$")
_U_SQ_TOKEN = re.compile(r"^u([1-9][0-9]*)\^2$")


def _parse_atom(atom: str, position: int):
    """Parse a non-product token: '1', 'z', or 'u<k>'."""
    if atom == "1":
        return ("1",)
    if atom == "z":
        return ("z",)
    m = _U_TOKEN.match(atom)
    if m:
        return ("u", int(m.group(1)) - 1)
    raise ConfigurationError(f"term {position}: unrecognized token {atom!r}")


def _parse_term(text: str, position: int) -> _TermTuple:
    m = _U_SQ_TOKEN.match(text)
    if m:
        return ("u2", int(m.group(1)) - 1)
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 2:
            raise ConfigurationError(
                f"term {position}: only pairwise products are supported, got {text!r}"
            )
        a = _parse_atom(parts[0].strip(), position)
        b = _parse_atom(parts[1].strip(), position)
        if ("1",) in (a, b):
            raise ConfigurationError(
                f"term {position}: products with the intercept are redundant"
            )
        if a == ("z",) and b == ("z",):
            raise ConfigurationError(f"term {position}: z:z is not a valid term")
        if a[0] == "u" and b[0] == "u":
            if a[1] == b[1]:
                raise ConfigurationError(
                    f"term {position}: use u{a[1] + 1}^2 instead of {text!r}"
                )
            j, k = sorted((a[1], b[1]))
            return ("uu", j, k)
        # one side is z, the other a covariate
        j = a[1] if a[0] == "u" else b[1]
        return ("zu", j)
    return _parse_atom(text, position)


def _term_to_string(term: _TermTuple) -> str:
    kind = term[0]
    if kind == "1":
        return "1"
    if kind == "z":
        return "z"
    if kind == "u":
        return f"u{term[1] + 1}"
    if kind == "u2":
        return f"u{term[1] + 1}^2"
    if kind == "uu":
        return f"u{term[1] + 1}:u{term[2] + 1}"
    if kind == "zu":
        return f"z:u{term[1] + 1}"
    raise ConfigurationError(f"unknown term encoding {term!r}")


@dataclass(frozen=True)
class DesignFormula:
    """An ordered tuple of design terms over (z, u1..uL)."""

    terms: tuple

    def __post_init__(self):
        if not self.terms:
            raise ConfigurationError("a design formula needs at least one term")
        seen = set()
        for t in self.terms:
            if t in seen:
                raise ConfigurationError(f"duplicate term {_term_to_string(t)!r}")
            seen.add(t)

    @classmethod
    def parse(cls, text: str) -> "DesignFormula":
        pieces = [p.strip() for p in text.split("+")]
        if any(not p for p in pieces):
            raise ConfigurationError(f"empty term in formula {text!r}")
        terms = tuple(_parse_term(p, i + 1) for i, p in enumerate(pieces))
        return cls(terms)

    def to_string(self) -> str:
        return " + ".join(_term_to_string(t) for t in self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def uses_z(self) -> bool:
        return any(t[0] in ("z", "zu") for t in self.terms)

    @property
    def max_u_index(self) -> int:
        """Largest 1-based covariate index referenced, 0 if none."""
        worst = 0
        for t in self.terms:
            if t[0] in ("u", "u2", "zu"):
                worst = max(worst, t[1] + 1)
            elif t[0] == "uu":
                worst = max(worst, t[2] + 1)
        return worst

    def evaluate_many(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Design matrix for arrays z (n,) and u (n, L). Returns (n, k)."""
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if u.ndim != 2:
            raise ContractViolation("u must be a 2-d array of shape (n, L)")
        if self.max_u_index > u.shape[1]:
            raise ConfigurationError(
                f"formula references u{self.max_u_index} but data has "
                f"{u.shape[1]} covariate(s)"
            )
        n = u.shape[0]
        cols = []
        for t in self.terms:
            kind = t[0]
            if kind == "1":
                cols.append(np.ones(n))
            elif kind == "u":
                cols.append(u[:, t[1]])
            elif kind == "z":
                cols.append(z)
            elif kind == "uu":
                cols.append(u[:, t[1]] * u[:, t[2]])
            elif kind == "u2":
                cols.append(u[:, t[1]] ** 2)
            elif kind == "zu":
                cols.append(z * u[:, t[1]])
        return np.column_stack(cols)


def evaluate_design(formula: DesignFormula, z: float, u) -> np.ndarray:
    """Design vector for a single unit. Deterministic in its inputs."""
    u_arr = np.asarray(u, dtype=float).reshape(1, -1)
    return formula.evaluate_many(np.array([float(z)]), u_arr)[0]


@dataclass(frozen=True)
class ObservedRecord:
    """One unit's observed data: (r, y?, z, u).

    y must be None exactly when r == 0; reading the outcome of a
    nonrespondent raises instead of silently yielding a placeholder.
    """

    r: int
    y: float | None
    z: float
    u: tuple

    def __post_init__(self):
        if self.r not in (0, 1):
            raise ContractViolation(f"r must be 0 or 1, got {self.r!r}")
        if self.r == 1 and self.y is None:
            raise ContractViolation("respondent record (r=1) is missing y")
        if self.r == 0 and self.y is not None:
            raise ContractViolation("nonrespondent record (r=0) must have y=None")
        object.__setattr__(self, "u", tuple(float(v) for v in self.u))
        if self.y is not None:
            object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "z", float(self.z))

    @property
    def outcome(self) -> float:
        """The observed outcome; raises for nonrespondents."""
        if self.r == 0:
            raise ContractViolation("outcome is unobserved when r=0")
        return self.y


class Dataset:
    """An immutable sample of observed records with cached array views.

    Internally the outcome column stores 0.0 for nonrespondents; every
    computation masks by r so the fill value is never read as data.
    """

    __slots__ = ("records", "_r", "_y_filled", "_z", "_u")

    def __init__(self, records):
        records = tuple(records)
        if not records:
            raise DataError("dataset is empty")
        dim = len(records[0].u)
        for i, rec in enumerate(records):
            if not isinstance(rec, ObservedRecord):
                raise ContractViolation(f"record {i} is not an ObservedRecord")
            if len(rec.u) != dim:
                raise DataError(
                    f"record {i} has {len(rec.u)} covariates, expected {dim}"
                )
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "_r", None)
        object.__setattr__(self, "_y_filled", None)
        object.__setattr__(self, "_z", None)
        object.__setattr__(self, "_u", None)

    def __setattr__(self, name, value):
        raise AttributeError("Dataset is immutable")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self.records == other.records

    def __hash__(self):
        return hash(self.records)

    @property
    def n_covariates(self) -> int:
        return len(self.records[0].u)

    @classmethod
    def from_arrays(cls, r, y, z, u) -> "Dataset":
        """Build from columns; y entries for r==0 rows are ignored/None."""
        r = np.asarray(r)
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if u.ndim != 2:
            raise ContractViolation("u must be 2-d (n, L)")
        recs = []
        for i in range(len(r)):
            ri = int(r[i])
            yi = None
            if ri == 1:
                if y is None or y[i] is None:
                    raise DataError(f"record {i}: respondent without outcome")
                yi = float(y[i])
            recs.append(ObservedRecord(r=ri, y=yi, z=float(z[i]), u=tuple(u[i])))
        return cls(recs)

    def _materialize(self):
        n = len(self.records)
        r = np.empty(n)
        yf = np.zeros(n)
        z = np.empty(n)
        u = np.empty((n, self.n_covariates))
        for i, rec in enumerate(self.records):
            r[i] = rec.r
            if rec.r == 1:
                yf[i] = rec.y
            z[i] = rec.z
            u[i] = rec.u
        for name, arr in (("_r", r), ("_y_filled", yf), ("_z", z), ("_u", u)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def r(self) -> np.ndarray:
        if self._r is None:
            self._materialize()
        return self._r

    @property
    def y_filled(self) -> np.ndarray:
        """Outcome column with 0.0 at nonrespondent rows; mask by r."""
        if self._y_filled is None:
            self._materialize()
        return self._y_filled

    @property
    def z(self) -> np.ndarray:
        if self._z is None:
            self._materialize()
        return self._z

    @property
    def u(self) -> np.ndarray:
        if self._u is None:
            self._materialize()
        return self._u

    @property
    def n_respondents(self) -> int:
        return int(np.sum(self.r))


@dataclass(frozen=True)
class ParamVector:
    """Full parameter bundle (mu, gamma, xi, beta, psi).

    mu is the target mean; gamma tilts the response model in the outcome;
    xi parametrizes the response index over x; beta the instrument model;
    psi the outcome regression. Blocks are tuples so the bundle is hashable
    and value-comparable.
    """

    mu: float
    gamma: tuple
    xi: tuple
    beta: tuple
    psi: tuple

    def __post_init__(self):
        object.__setattr__(self, "mu", float(self.mu))
        for name in ("gamma", "xi", "beta", "psi"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not all(np.isfinite(vals)):
                raise ContractViolation(f"non-finite entry in {name}")
            object.__setattr__(self, name, vals)
        if not np.isfinite(self.mu):
            raise ContractViolation("non-finite mu")

    def block_sizes(self) -> tuple:
        return (len(self.gamma), len(self.xi), len(self.beta), len(self.psi))


def flatten(p: ParamVector) -> np.ndarray:
    """Pack (mu, gamma, xi, beta, psi) into one vector in block order."""
    return np.concatenate(
        ([p.mu], p.gamma, p.xi, p.beta, p.psi)
    ).astype(float)


def unflatten(v, spec) -> ParamVector:
    """Invert flatten using block sizes from a model spec.

    spec must expose param_block_sizes() -> (p_gamma, n_xi, n_beta, n_psi).
    """
    v = np.asarray(v, dtype=float)
    sizes = spec.param_block_sizes()
    total = 1 + sum(sizes)
    if v.shape != (total,):
        raise ContractViolation(
            f"parameter vector has length {v.shape}, expected ({total},)"
        )
    p_g, n_xi, n_beta, n_psi = sizes
    pos = 1
    blocks = []
    for size in (p_g, n_xi, n_beta, n_psi):
        blocks.append(tuple(v[pos : pos + size]))
        pos += size
    return ParamVector(mu=v[0], gamma=blocks[0], xi=blocks[1], beta=blocks[2], psi=blocks[3])
