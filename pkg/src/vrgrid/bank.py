"""Multi-branch virtual-resistance bank.

A bank is a parallel sum of branches; each branch is a series sum of static
scalar elements applied independently to the d and q axes of the current
error. Every shipped element kind is odd, vanishes at zero, and satisfies
the sector condition x * r(x) > 0 for x != 0 when its parameters are
positive, so each element adds pointwise dissipation to the closed loop.

Element kinds (parameters must be positive):

=============  ==========  ==========================================
kind           parameters  map (per axis)
=============  ==========  ==========================================
linear         k           k * x
cubic          k           k * x**3
sinh           a, b        a * sinh(b * x)
tanh           a, b        a * tanh(b * x)        (bounded)
saturation     k, x_sat    k * clip(x, -x_sat, x_sat)   (bounded)
=============  ==========  ==========================================

Closed-form primitives (integral of the map from 0 to x) back the composite
Lyapunov function; all five kinds have primitives that diverge as |x| grows
even when the map itself is bounded.
"""

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

_LN2 = 0.6931471805599453

_KIND_CODES = {
    "linear": _kernels.LINEAR,
    "cubic": _kernels.CUBIC,
    "sinh": _kernels.SINH,
    "tanh": _kernels.TANH,
    "saturation": _kernels.SATURATION,
}

_PARAM_NAMES = {
    "linear": ("k",),
    "cubic": ("k",),
    "sinh": ("a", "b"),
    "tanh": ("a", "b"),
    "saturation": ("k", "x_sat"),
}

# Kinds whose map is radially unbounded; all kinds have divergent primitives.
_UNBOUNDED_MAP = {"linear", "cubic", "sinh"}

KINDS = tuple(sorted(_KIND_CODES))


class SectorViolation(ValueError):
    """A sampled sector check failed: names the branch, axis, and sample."""

    def __init__(self, branch, axis, sample, value):
        self.branch = branch
        self.axis = axis
        self.sample = sample
        self.value = value
        super().__init__(
            f"sector violation in branch {branch}, axis {axis}: "
            f"x={sample!r} maps to {value!r} with x*r(x) <= 0"
        )


@dataclass(frozen=True)
class VrElement:
    """One static virtual-resistance element (volts out for amperes in)."""

    kind: str
    p1: float
    p2: float = 0.0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown element kind {self.kind!r}; expected one of {KINDS}")
        names = _PARAM_NAMES[self.kind]
        if not (math.isfinite(self.p1) and self.p1 > 0.0):
            raise ValueError(f"{self.kind} element: parameter {names[0]!r} must be finite and > 0, got {self.p1!r}")
        if len(names) == 2:
            if not (math.isfinite(self.p2) and self.p2 > 0.0):
                raise ValueError(f"{self.kind} element: parameter {names[1]!r} must be finite and > 0, got {self.p2!r}")
        elif self.p2 != 0.0:
            raise ValueError(f"{self.kind} element takes a single parameter {names[0]!r}")

    @classmethod
    def _unchecked(cls, kind, p1, p2=0.0):
        # Bypasses validation; only for negative-control test harnesses.
        self = object.__new__(cls)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "p1", float(p1))
        object.__setattr__(self, "p2", float(p2))
        return self

    @property
    def code(self):
        return _KIND_CODES[self.kind]

    @property
    def map_unbounded(self):
        return self.kind in _UNBOUNDED_MAP

    def to_config(self):
        names = _PARAM_NAMES[self.kind]
        record = {"kind": self.kind, names[0]: self.p1}
        if len(names) == 2:
            record[names[1]] = self.p2
        return record

    @classmethod
    def from_config(cls, record):
        kind = record.get("kind")
        if kind not in _KIND_CODES:
            raise ValueError(f"unknown element kind {kind!r}; expected one of {KINDS}")
        names = _PARAM_NAMES[kind]
        extra = set(record) - {"kind", *names}
        if extra:
            raise ValueError(f"{kind} element: unknown parameter(s) {sorted(extra)}")
        missing = [n for n in names if n not in record]
        if missing:
            raise ValueError(f"{kind} element: missing parameter(s) {missing}")
        p2 = float(record[names[1]]) if len(names) == 2 else 0.0
        return cls(kind, float(record[names[0]]), p2)


def linear(k):
    return VrElement("linear", k)


def cubic(k):
    return VrElement("cubic", k)


def sinh_element(a, b):
    return VrElement("sinh", a, b)


def tanh_element(a, b):
    return VrElement("tanh", a, b)


def saturation(k, x_sat):
    return VrElement("saturation", k, x_sat)


def eval_element(e, x):
    """Value of one element at scalar x (exactly 0 at x = 0)."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"element input must be finite, got {x!r}")
    return _kernels.element_value(e.code, e.p1, e.p2, x)


def element_values(e, xs):
    """Vectorized element map over an array of inputs."""
    xs = np.asarray(xs, dtype=float)
    if e.kind == "linear":
        return e.p1 * xs
    if e.kind == "cubic":
        return e.p1 * xs ** 3
    if e.kind == "sinh":
        return e.p1 * np.sinh(e.p2 * xs)
    if e.kind == "tanh":
        return e.p1 * np.tanh(e.p2 * xs)
    return e.p1 * np.clip(xs, -e.p2, e.p2)


def element_primitive(e, x):
    """Closed-form primitive of one element, normalized to 0 at x = 0."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"element input must be finite, got {x!r}")
    return _kernels.element_primitive(e.code, e.p1, e.p2, x)


def _ln_cosh(y):
    a = np.abs(y)
    return a + np.log1p(np.exp(-2.0 * a)) - _LN2


def element_primitives(e, xs):
    """Vectorized closed-form primitives."""
    xs = np.asarray(xs, dtype=float)
    if e.kind == "linear":
        return 0.5 * e.p1 * xs ** 2
    if e.kind == "cubic":
        return 0.25 * e.p1 * xs ** 4
    if e.kind == "sinh":
        return (e.p1 / e.p2) * (np.cosh(e.p2 * xs) - 1.0)
    if e.kind == "tanh":
        return (e.p1 / e.p2) * _ln_cosh(e.p2 * xs)
    a = np.abs(xs)
    inside = 0.5 * e.p1 * xs ** 2
    outside = e.p1 * e.p2 * a - 0.5 * e.p1 * e.p2 ** 2
    return np.where(a <= e.p2, inside, outside)


@dataclass(frozen=True)
class VrBranch:
    """Series sum of elements, applied per axis (d and q may differ)."""

    elements_d: tuple
    elements_q: tuple

    def __post_init__(self):
        if not self.elements_d or not self.elements_q:
            raise ValueError("branch needs at least one element on each axis")

    @classmethod
    def of(cls, elements, q_elements=None):
        d = tuple(elements)
        q = d if q_elements is None else tuple(q_elements)
        return cls(d, q)

    @property
    def same_both_axes(self):
        return self.elements_d == self.elements_q

    def to_config(self):
        if self.same_both_axes:
            return [e.to_config() for e in self.elements_d]
        return {
            "d": [e.to_config() for e in self.elements_d],
            "q": [e.to_config() for e in self.elements_q],
        }

    @classmethod
    def from_config(cls, record):
        if isinstance(record, dict):
            extra = set(record) - {"d", "q"}
            if extra:
                raise ValueError(f"branch record: unknown key(s) {sorted(extra)}")
            if "d" not in record or "q" not in record:
                raise ValueError("per-axis branch record needs both 'd' and 'q'")
            return cls(
                tuple(VrElement.from_config(r) for r in record["d"]),
                tuple(VrElement.from_config(r) for r in record["q"]),
            )
        return cls.of(tuple(VrElement.from_config(r) for r in record))


@dataclass(frozen=True)
class VrBank:
    """Parallel sum of branches; an empty bank is the plain feedforward loop."""

    branches: tuple = ()

    @property
    def branch_count(self):
        return len(self.branches)

    @property
    def series_counts(self):
        return tuple(len(b.elements_d) for b in self.branches)

    def to_config(self):
        return [b.to_config() for b in self.branches]

    @classmethod
    def from_config(cls, records):
        return cls(tuple(VrBranch.from_config(r) for r in records))


def eval_branch(branch, x_dq):
    """Branch map at one dq point: series sum per axis."""
    xd = float(x_dq[0])
    xq = float(x_dq[1])
    d = 0.0
    q = 0.0
    for e in branch.elements_d:
        d += eval_element(e, xd)
    for e in branch.elements_q:
        q += eval_element(e, xq)
    return np.array([d, q])


def eval_bank(bank, x_dq):
    """Total bank map at one dq point: sum of branch maps."""
    out = np.zeros(2)
    for branch in bank.branches:
        out += eval_branch(branch, x_dq)
    return out


def branch_values(branch, pts):
    """Vectorized branch map over an (N, 2) array of dq points."""
    pts = np.asarray(pts, dtype=float)
    out = np.zeros_like(pts)
    for e in branch.elements_d:
        out[..., 0] += element_values(e, pts[..., 0])
    for e in branch.elements_q:
        out[..., 1] += element_values(e, pts[..., 1])
    return out


def bank_values(bank, pts):
    """Vectorized total bank map over an (N, 2) array of dq points."""
    pts = np.asarray(pts, dtype=float)
    out = np.zeros_like(pts)
    for branch in bank.branches:
        out += branch_values(branch, pts)
    return out


def branch_primitives(branch, x_dq):
    """Per-axis sums of element primitives for one branch at one dq point."""
    d = 0.0
    q = 0.0
    for e in branch.elements_d:
        d += element_primitive(e, x_dq[0])
    for e in branch.elements_q:
        q += element_primitive(e, x_dq[1])
    return np.array([d, q])


def branch_primitive_values(branch, pts):
    """Vectorized per-axis primitive sums over an (N, 2) array."""
    pts = np.asarray(pts, dtype=float)
    out = np.zeros_like(pts)
    for e in branch.elements_d:
        out[..., 0] += element_primitives(e, pts[..., 0])
    for e in branch.elements_q:
        out[..., 1] += element_primitives(e, pts[..., 1])
    return out


@dataclass(frozen=True)
class BankClassification:
    """Sector/unboundedness summary used to size and order the stability LMIs.

    ``p_index`` counts branches whose map is radially unbounded on both
    axes; ``mu_index`` counts branches whose primitive integrals diverge
    (all shipped kinds do). ``permutation`` reorders branches so the
    unbounded-map ones come first; 0 <= p_index <= mu_index <= branch count.
    """

    p_index: int
    mu_index: int
    all_sector_valid: bool
    permutation: tuple

    def __post_init__(self):
        if not 0 <= self.p_index <= self.mu_index <= len(self.permutation):
            raise ValueError("classification indices must satisfy 0 <= p <= mu <= M")


def _axis_sector_check(elements, xs, branch_idx, axis):
    vals = np.zeros_like(xs)
    for e in elements:
        vals += element_values(e, xs)
    prod = xs * vals
    bad = np.nonzero(~(prod > 0.0))[0]
    if bad.size:
        i = int(bad[0])
        raise SectorViolation(branch_idx, axis, float(xs[i]), float(vals[i]))


def classify_bank(bank, probe_range=100.0, samples=256):
    """Classify a bank: sampled sector check plus analytic unboundedness.

    The sector condition is tested on a symmetric log-spaced grid (zero
    excluded) spanning nine decades below ``probe_range``; unboundedness is
    decided analytically from the element kinds, not by sampling. A sampled
    violation raises :class:`SectorViolation` naming branch, axis, sample.
    """
    if probe_range <= 0.0:
        raise ValueError("probe_range must be > 0")
    if samples < 100:
        raise ValueError("samples must be >= 100")

    half = samples // 2
    mags = np.geomspace(probe_range * 1e-9, probe_range, half)
    xs = np.concatenate([-mags[::-1], mags])

    for idx, branch in enumerate(bank.branches):
        _axis_sector_check(branch.elements_d, xs, idx, "d")
        _axis_sector_check(branch.elements_q, xs, idx, "q")

    unbounded = [
        all(any(e.map_unbounded for e in elems) for elems in (b.elements_d, b.elements_q))
        for b in bank.branches
    ]
    order = sorted(range(len(bank.branches)), key=lambda k: (not unbounded[k], k))
    return BankClassification(
        p_index=sum(unbounded),
        mu_index=len(bank.branches),
        all_sector_valid=True,
        permutation=tuple(order),
    )


def flatten_bank(bank):
    """Flatten all elements into kernel-ready arrays (codes, p1, p2) per axis.

    The closed-loop dynamics only need the total series+parallel sum, so
    branch boundaries are dropped here.
    """
    elems_d = [e for b in bank.branches for e in b.elements_d]
    elems_q = [e for b in bank.branches for e in b.elements_q]

    def pack(elems):
        codes = np.array([e.code for e in elems], dtype=np.int64)
        p1 = np.array([e.p1 for e in elems], dtype=float)
        p2 = np.array([e.p2 for e in elems], dtype=float)
        return codes, p1, p2

    return (*pack(elems_d), *pack(elems_q))


def bank_fingerprint(bank):
    """Stable sha256 of the canonical bank config (guards certificate reuse)."""
    payload = json.dumps(bank.to_config(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def default_banks():
    """Repo-default gain choices for the bundled comparison configs."""
    return {
        "linear": VrBank((VrBranch.of((linear(2.0),)),)),
        "cubic": VrBank((VrBranch.of((cubic(0.5),)),)),
        "hybrid": VrBank((VrBranch.of((linear(1.0), cubic(0.25))),)),
        "sinh": VrBank((VrBranch.of((sinh_element(1.0, 1.0),)),)),
        "multi_branch": VrBank((
            VrBranch.of((linear(1.0), cubic(0.25))),
            VrBranch.of((sinh_element(0.5, 0.5), tanh_element(5.0, 0.2))),
        )),
    }
