"""
Element matrices of the lumped-parameter network.

Every element contributes rows to the global residual

    r = E . ydot + F . y + c(y, ydot)

The local unknown orderings are

    BloodVessel          (P_in, Q_in, P_out, Q_out)
    BloodVesselJunction  (P_in, Q_in, P_out_1, Q_out_1, ..., P_out_n, Q_out_n)
    Windkessel           (P_in, Q_in)
    FlowInlet            (P, Q)

Forward contributions are evaluated for a single state. Parameter Jacobians
broadcast over any leading axes of the state arrays so that all observation
times of the inverse problem are handled in one call.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

# Stenosis term kinds: c[row] += coeff * |y[col]| * y[col]  or  coeff * |y[col]| * ydot[col]
KIND_QQ = 0
KIND_QQDOT = 1


@dataclass(frozen=True)
class ElementContribution:
    E: np.ndarray
    F: np.ndarray
    c: np.ndarray
    dc_dy: np.ndarray
    dc_dydot: np.ndarray
    unknowns: Optional[np.ndarray] = None
    rows: Optional[np.ndarray] = None

    def residual(self, y_local: np.ndarray, ydot_local: np.ndarray) -> np.ndarray:
        return self.E @ ydot_local + self.F @ y_local + self.c


@dataclass(frozen=True)
class ElementParamJacobian:
    J: np.ndarray
    params: Optional[np.ndarray] = None
    rows: Optional[np.ndarray] = None


@dataclass(frozen=True)
class StenosisTerm:
    row: int
    col: int
    kind: int
    coeff: float


# ---------------------------------------------------------------------------
# BloodVessel
# ---------------------------------------------------------------------------

def blood_vessel_contribution(R, L, C, S, y_local, ydot_local) -> ElementContribution:
    """Forward matrices of a BloodVessel element (R, stenosis, L in series, C to ground)"""
    y_local = np.asarray(y_local, dtype=float)
    ydot_local = np.asarray(ydot_local, dtype=float)
    Q_in = y_local[1]
    dQ_in = ydot_local[1]
    abs_q = abs(Q_in)
    sgn_q = np.sign(Q_in)

    E = np.array([[0.0, 0.0, 0.0, -L],
                  [-C, C * R, 0.0, 0.0]])
    F = np.array([[1.0, -R, -1.0, 0.0],
                  [0.0, 1.0, 0.0, -1.0]])
    c = S * abs_q * np.array([-Q_in, 2.0 * C * dQ_in])

    dc_dydot = np.zeros((2, 4))
    dc_dydot[1, 1] = S * abs_q * 2.0 * C

    dc_dy = np.zeros((2, 4))
    dc_dy[0, 1] = S * sgn_q * (-2.0 * Q_in)
    dc_dy[1, 1] = S * sgn_q * 2.0 * C * dQ_in

    return ElementContribution(E=E, F=F, c=c, dc_dy=dc_dy, dc_dydot=dc_dydot)


def blood_vessel_param_jacobian(R, C, S, y_local, ydot_local) -> ElementParamJacobian:
    """
    Derivative of the two BloodVessel rows with respect to (R, C, L, S).
    Leading axes of the state arrays are kept, e.g. (n_times, 4) -> (n_times, 2, 4).
    """
    y_local = np.asarray(y_local, dtype=float)
    ydot_local = np.asarray(ydot_local, dtype=float)
    Q_in = y_local[..., 1]
    dP_in = ydot_local[..., 0]
    dQ_in = ydot_local[..., 1]
    dQ_out = ydot_local[..., 3]
    abs_q = np.abs(Q_in)
    zero = np.zeros_like(Q_in)

    row0 = np.stack([-Q_in, zero, -dQ_out, -abs_q * Q_in], axis=-1)
    row1 = np.stack([C * dQ_in,
                     -dP_in + (R + 2.0 * S * abs_q) * dQ_in,
                     zero,
                     2.0 * C * abs_q * dQ_in], axis=-1)
    return ElementParamJacobian(J=np.stack([row0, row1], axis=-2))


# ---------------------------------------------------------------------------
# BloodVesselJunction
# ---------------------------------------------------------------------------

def junction_contribution(R, L, S, y_local, ydot_local) -> ElementContribution:
    """Forward matrices of a junction with one inlet and n = len(R) outlets"""
    R = np.atleast_1d(np.asarray(R, dtype=float))
    L = np.atleast_1d(np.asarray(L, dtype=float))
    S = np.atleast_1d(np.asarray(S, dtype=float))
    y_local = np.asarray(y_local, dtype=float)
    n = R.size
    size = 2 + 2 * n

    E = np.zeros((n + 1, size))
    F = np.zeros((n + 1, size))
    c = np.zeros(n + 1)
    dc_dy = np.zeros((n + 1, size))

    # mass conservation
    F[0, 1] = 1.0
    for i in range(n):
        p_col = 2 + 2 * i
        q_col = p_col + 1
        F[0, q_col] = -1.0

        row = i + 1
        q_out = y_local[q_col]
        F[row, 0] = 1.0
        F[row, p_col] = -1.0
        F[row, q_col] = -R[i]
        E[row, q_col] = -L[i]
        c[row] = -S[i] * abs(q_out) * q_out
        dc_dy[row, q_col] = -2.0 * S[i] * abs(q_out)

    return ElementContribution(E=E, F=F, c=c, dc_dy=dc_dy, dc_dydot=np.zeros((n + 1, size)))


def junction_param_jacobian(y_local, ydot_local) -> ElementParamJacobian:
    """
    Derivative of the junction rows with respect to (R_1..R_n, L_1..L_n, S_1..S_n).
    The mass-conservation row does not depend on any parameter.
    """
    y_local = np.asarray(y_local, dtype=float)
    ydot_local = np.asarray(ydot_local, dtype=float)
    n = (y_local.shape[-1] - 2) // 2
    lead = y_local.shape[:-1]

    q_out = y_local[..., 3::2]
    dq_out = ydot_local[..., 3::2]

    J = np.zeros(lead + (n + 1, 3 * n))
    for i in range(n):
        J[..., i + 1, i] = -q_out[..., i]
        J[..., i + 1, n + i] = -dq_out[..., i]
        J[..., i + 1, 2 * n + i] = -np.abs(q_out[..., i]) * q_out[..., i]
    return ElementParamJacobian(J=J)


# ---------------------------------------------------------------------------
# Windkessel
# ---------------------------------------------------------------------------

def windkessel_contribution(Rp, Rd, C, Pref, y_local, ydot_local) -> ElementContribution:
    """Three-element Windkessel outlet; the nonlinear term is the constant reference pressure"""
    E = np.array([[-Rd * C, Rp * Rd]])
    F = np.array([[-1.0, Rp + Rd]])
    c = np.array([Pref], dtype=float)
    return ElementContribution(E=E, F=F, c=c, dc_dy=np.zeros((1, 2)), dc_dydot=np.zeros((1, 2)))


def flow_inlet_contribution(q_prescribed: float) -> ElementContribution:
    """Inlet flow constraint Q - Q_in(t) = 0"""
    return ElementContribution(
        E=np.zeros((1, 2)),
        F=np.array([[0.0, 1.0]]),
        c=np.array([-q_prescribed], dtype=float),
        dc_dy=np.zeros((1, 2)),
        dc_dydot=np.zeros((1, 2)),
    )


# ---------------------------------------------------------------------------
# Elements bound to a network layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BloodVessel:
    name: str
    inlet: int
    outlet: int
    unknowns: np.ndarray
    rows: np.ndarray
    params: Dict[str, int]

    n_equations = 2
    is_boundary = False
    # pressure-like momentum row, flow-like capacitance row
    row_kinds: Tuple[str, ...] = ("pressure", "flow")

    def values(self, alpha: np.ndarray) -> Dict[str, float]:
        return {key: float(alpha[idx]) for key, idx in self.params.items()}

    def contribution(self, alpha, y, ydot, t=None, windkessels=None) -> ElementContribution:
        p = self.values(alpha)
        local = blood_vessel_contribution(p["R"], p["L"], p["C"], p["S"], y[self.unknowns], ydot[self.unknowns])
        return ElementContribution(local.E, local.F, local.c, local.dc_dy, local.dc_dydot,
                                   unknowns=self.unknowns, rows=self.rows)

    def param_jacobian(self, alpha, y, ydot) -> ElementParamJacobian:
        p = self.values(alpha)
        local = blood_vessel_param_jacobian(p["R"], p["C"], p["S"], y[..., self.unknowns], ydot[..., self.unknowns])
        order = np.array([self.params[k] for k in ("R", "C", "L", "S")])
        return ElementParamJacobian(J=local.J, params=order, rows=self.rows)

    def stenosis_terms(self, alpha) -> List[StenosisTerm]:
        p = self.values(alpha)
        if p["S"] == 0.0:
            return []
        q_in = int(self.unknowns[1])
        return [
            StenosisTerm(int(self.rows[0]), q_in, KIND_QQ, -p["S"]),
            StenosisTerm(int(self.rows[1]), q_in, KIND_QQDOT, 2.0 * p["C"] * p["S"]),
        ]


@dataclass(frozen=True)
class BloodVesselJunction:
    name: str
    inlet: int
    outlets: Tuple[int, ...]
    unknowns: np.ndarray
    rows: np.ndarray
    params: Dict[str, Tuple[int, ...]]

    is_boundary = False

    @property
    def n_equations(self) -> int:
        return len(self.outlets) + 1

    @property
    def row_kinds(self) -> Tuple[str, ...]:
        return ("flow",) + ("pressure",) * len(self.outlets)

    def values(self, alpha: np.ndarray) -> Dict[str, np.ndarray]:
        return {key: alpha[list(idx)] for key, idx in self.params.items()}

    def contribution(self, alpha, y, ydot, t=None, windkessels=None) -> ElementContribution:
        p = self.values(alpha)
        local = junction_contribution(p["R"], p["L"], p["S"], y[self.unknowns], ydot[self.unknowns])
        return ElementContribution(local.E, local.F, local.c, local.dc_dy, local.dc_dydot,
                                   unknowns=self.unknowns, rows=self.rows)

    def param_jacobian(self, alpha, y, ydot) -> ElementParamJacobian:
        local = junction_param_jacobian(y[..., self.unknowns], ydot[..., self.unknowns])
        order = np.array(list(self.params["R"]) + list(self.params["L"]) + list(self.params["S"]))
        return ElementParamJacobian(J=local.J, params=order, rows=self.rows)

    def stenosis_terms(self, alpha) -> List[StenosisTerm]:
        S = self.values(alpha)["S"]
        terms = []
        for i, s in enumerate(S):
            if s != 0.0:
                q_col = int(self.unknowns[3 + 2 * i])
                terms.append(StenosisTerm(int(self.rows[i + 1]), q_col, KIND_QQ, -float(s)))
        return terms


@dataclass(frozen=True)
class Windkessel:
    name: str
    node: int
    outlet_index: int
    unknowns: np.ndarray
    rows: np.ndarray
    Pref: float = 0.0

    n_equations = 1
    is_boundary = True
    row_kinds: Tuple[str, ...] = ("pressure",)

    def contribution(self, alpha, y, ydot, t=None, windkessels=None) -> ElementContribution:
        bc = windkessels[self.outlet_index]
        local = windkessel_contribution(bc.Rp, bc.Rd, bc.C, self.Pref, y[self.unknowns], ydot[self.unknowns])
        return ElementContribution(local.E, local.F, local.c, local.dc_dy, local.dc_dydot,
                                   unknowns=self.unknowns, rows=self.rows)

    def stenosis_terms(self, alpha) -> List[StenosisTerm]:
        return []


@dataclass(frozen=True)
class FlowInlet:
    name: str
    node: int
    unknowns: np.ndarray
    rows: np.ndarray
    inflow: object = field(repr=False, default=None)

    n_equations = 1
    is_boundary = True
    row_kinds: Tuple[str, ...] = ("flow",)

    def contribution(self, alpha, y, ydot, t=0.0, windkessels=None) -> ElementContribution:
        local = flow_inlet_contribution(float(self.inflow(t)))
        return ElementContribution(local.E, local.F, local.c, local.dc_dy, local.dc_dydot,
                                   unknowns=self.unknowns, rows=self.rows)

    def stenosis_terms(self, alpha) -> List[StenosisTerm]:
        return []


def scatter(contributions: Sequence[ElementContribution], n_unknowns: int):
    """Scatter dense local matrices into global (E, F, c, dc/dy, dc/dydot)"""
    E = np.zeros((n_unknowns, n_unknowns))
    F = np.zeros_like(E)
    dc_dy = np.zeros_like(E)
    dc_dydot = np.zeros_like(E)
    c = np.zeros(n_unknowns)
    for part in contributions:
        idx = np.ix_(part.rows, part.unknowns)
        E[idx] += part.E
        F[idx] += part.F
        dc_dy[idx] += part.dc_dy
        dc_dydot[idx] += part.dc_dydot
        c[part.rows] += part.c
    return E, F, c, dc_dy, dc_dydot
