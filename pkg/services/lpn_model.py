"""
Lumped-parameter network (LPN) data model.

An LPN file is validated by `LpnModelSpec` and compiled into an immutable
`LpnModel` that fixes the global unknown ordering (nodes in file order,
pressure before flow) and the equation row layout:

    inlet flow row | vessel rows (2 each) | junction rows (1 + n each) | Windkessel rows

All quantities are CGS (cm, g, s, dyn).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.interpolate import CubicSpline

from services import config
from services.elements import (
    BloodVessel,
    BloodVesselJunction,
    FlowInlet,
    Windkessel,
    scatter,
)
from services.errors import DimensionMismatch, ModelValidationError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# File schema
# ---------------------------------------------------------------------------

class FluidSpec(BaseModel):
    density: float = 1.06
    viscosity: float = 0.04
    stenosis_correction: float = 1.52

    @field_validator("density", "viscosity", "stenosis_correction")
    @classmethod
    def positive(cls, v):
        if v <= 0:
            raise ValueError("fluid properties must be positive")
        return v


class GeometrySpec(BaseModel):
    radius: float
    length: float
    youngs_modulus: Optional[float] = None  # omitted -> rigid wall
    wall_thickness: Optional[float] = None
    proximal_area: Optional[float] = None
    stenosed_area: Optional[float] = None


class VesselSpec(BaseModel):
    name: str
    inlet: str
    outlet: str
    geometry: Optional[GeometrySpec] = None
    R: Optional[float] = None
    L: Optional[float] = None
    C: Optional[float] = None
    S: Optional[float] = None


class JunctionSpec(BaseModel):
    name: str
    inlet: str
    outlets: List[str]
    R: Optional[List[float]] = None
    L: Optional[List[float]] = None
    S: Optional[List[float]] = None

    @model_validator(mode="after")
    def per_outlet_lengths(self):
        if not self.outlets:
            raise ValueError(f"junction {self.name} needs at least one outlet")
        for key in ("R", "L", "S"):
            values = getattr(self, key)
            if values is not None and len(values) != len(self.outlets):
                raise ValueError(f"junction {self.name}: {key} needs one value per outlet")
        return self


class InflowSpec(BaseModel):
    node: str
    t: List[float]
    Q: List[float]

    @model_validator(mode="after")
    def samples(self):
        if len(self.t) != len(self.Q) or not self.t:
            raise ValueError("inflow t and Q must be non-empty and of equal length")
        if any(b <= a for a, b in zip(self.t, self.t[1:])):
            raise ValueError("inflow times must be strictly increasing")
        return self


class WindkesselSpec(BaseModel):
    name: str
    node: str
    Rp: float = Field(ge=0.0)
    Rd: float = Field(gt=0.0)
    C: float = Field(gt=0.0)
    Pref: float = 0.0


class BoundaryConditionsSpec(BaseModel):
    inflow: InflowSpec
    windkessels: List[WindkesselSpec]


class LpnModelSpec(BaseModel):
    name: str = "lpn"
    period: float = Field(gt=0.0)
    fluid: FluidSpec = FluidSpec()
    nodes: List[str]
    vessels: List[VesselSpec] = []
    junctions: List[JunctionSpec] = []
    boundary_conditions: BoundaryConditionsSpec

    @model_validator(mode="after")
    def unique_names(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("node names must be unique")
        names = [v.name for v in self.vessels] + [j.name for j in self.junctions]
        names += [w.name for w in self.boundary_conditions.windkessels]
        if len(set(names)) != len(names):
            raise ValueError("element names must be unique")
        return self


# ---------------------------------------------------------------------------
# Geometry and boundary-condition parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VesselGeometry:
    r: float
    l: float
    E: Optional[float] = None
    h: Optional[float] = None
    S0: Optional[float] = None
    Ss: Optional[float] = None


@dataclass(frozen=True)
class FluidProperties:
    rho: float = 1.06
    mu: float = 0.04
    Kt: float = 1.52


def derive_geometric_params(geom: VesselGeometry, fluid: FluidProperties) -> Tuple[float, float, float, float]:
    """
    Branch (R, L, C, S) from vessel geometry.

    A missing Young's modulus means a rigid wall and gets the capacitance
    floor C_MIN. Missing areas mean no narrowing (S = 0).
    """
    if geom.r <= 0 or geom.l <= 0:
        raise ModelValidationError(f"radius and length must be positive (r={geom.r}, l={geom.l})")
    if fluid.rho <= 0 or fluid.mu <= 0 or fluid.Kt <= 0:
        raise ModelValidationError("fluid properties must be positive")

    r, l = geom.r, geom.l
    R = 8.0 * fluid.mu * l / (math.pi * r ** 4)
    L = fluid.rho * l / (math.pi * r ** 2)

    if geom.E is None:
        C = config.C_MIN
    else:
        if geom.E <= 0 or geom.h is None or geom.h <= 0:
            raise ModelValidationError(f"wall modulus and thickness must be positive (E={geom.E}, h={geom.h})")
        C = 3.0 * l * math.pi * r ** 3 / (2.0 * geom.E * geom.h)

    if geom.S0 is None and geom.Ss is None:
        S = 0.0
    else:
        S0 = geom.S0 if geom.S0 is not None else math.pi * r ** 2
        Ss = geom.Ss if geom.Ss is not None else S0
        if Ss <= 0 or S0 < Ss:
            raise ModelValidationError(f"areas must satisfy S0 >= Ss > 0 (S0={S0}, Ss={Ss})")
        S = fluid.Kt * fluid.rho / (2.0 * S0 ** 2) * (S0 / Ss - 1.0) ** 2

    return R, L, C, S


@dataclass(frozen=True)
class WindkesselBc:
    Rp: float
    Rd: float
    C: float
    Pref: float = 0.0

    def __post_init__(self):
        if self.Rp < 0 or self.Rd <= 0 or self.C <= 0:
            raise ModelValidationError(f"invalid Windkessel values Rp={self.Rp}, Rd={self.Rd}, C={self.C}")


def encode_windkessel(bc: WindkesselBc) -> Tuple[float, float, float]:
    """(Rp, Rd, C) -> (log total resistance, Rp/Rd, Rd*C)"""
    return math.log(bc.Rp + bc.Rd), bc.Rp / bc.Rd, bc.Rd * bc.C


def decode_windkessel(theta: float, ratio: float, tau: float, Pref: float = 0.0) -> WindkesselBc:
    if ratio < 0 or tau <= 0:
        raise ModelValidationError(f"decode needs ratio >= 0 and tau > 0 (ratio={ratio}, tau={tau})")
    R_total = math.exp(theta)
    Rd = R_total / (1.0 + ratio)
    return WindkesselBc(Rp=R_total - Rd, Rd=Rd, C=tau / Rd, Pref=Pref)


@dataclass(frozen=True)
class WindkesselParamVector:
    """Per-outlet log total resistance with the fixed ratio and time constant"""

    theta: np.ndarray
    ratio: np.ndarray
    tau: np.ndarray
    Pref: np.ndarray
    names: Tuple[str, ...] = ()

    @classmethod
    def from_model(cls, model: "LpnModel") -> "WindkesselParamVector":
        bcs = model.spec.boundary_conditions.windkessels
        encoded = [encode_windkessel(WindkesselBc(w.Rp, w.Rd, w.C, w.Pref)) for w in bcs]
        return cls(
            theta=np.array([e[0] for e in encoded]),
            ratio=np.array([e[1] for e in encoded]),
            tau=np.array([e[2] for e in encoded]),
            Pref=np.array([w.Pref for w in bcs], dtype=float),
            names=tuple(w.name for w in bcs),
        )

    def __len__(self):
        return len(self.theta)

    def with_theta(self, theta) -> "WindkesselParamVector":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise DimensionMismatch(f"theta has shape {theta.shape}, expected {self.theta.shape}")
        return WindkesselParamVector(theta, self.ratio, self.tau, self.Pref, self.names)

    def decode(self) -> List[WindkesselBc]:
        return [decode_windkessel(t, r, tau, p) for t, r, tau, p in zip(self.theta, self.ratio, self.tau, self.Pref)]

    def decode_batch(self, thetas: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised decode of a (B, n_out) theta array into (Rp, Rd, C) arrays"""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[-1] != len(self.theta):
            raise DimensionMismatch(f"theta batch has {thetas.shape[-1]} columns, expected {len(self.theta)}")
        R_total = np.exp(thetas)
        Rd = R_total / (1.0 + self.ratio)
        return R_total - Rd, Rd, self.tau / Rd


# ---------------------------------------------------------------------------
# Element parameters
# ---------------------------------------------------------------------------

VESSEL_FIELDS = ("R", "L", "C", "S")
JUNCTION_FIELDS = ("R", "L", "S")


@dataclass(frozen=True)
class ElementParams:
    """Flat element parameter vector with its (element, field[, outlet]) layout"""

    values: np.ndarray
    layout: Dict[Tuple, int] = field(repr=False)

    @classmethod
    def from_model(cls, model: "LpnModel") -> "ElementParams":
        return cls(values=model.alpha_geometric.copy(), layout=dict(model.param_layout))

    def __len__(self):
        return len(self.values)

    def with_values(self, values) -> "ElementParams":
        values = np.asarray(values, dtype=float)
        if values.shape != self.values.shape:
            raise DimensionMismatch(f"alpha has shape {values.shape}, expected {self.values.shape}")
        return ElementParams(values=values.copy(), layout=self.layout)

    def index_of(self, element: str, name: str, outlet: Optional[int] = None) -> int:
        key = (element, name) if outlet is None else (element, name, outlet)
        try:
            return self.layout[key]
        except KeyError:
            raise ModelValidationError(f"unknown parameter {key}")

    def names(self) -> List[str]:
        out = [""] * len(self.values)
        for key, idx in self.layout.items():
            out[idx] = f"{key[0]}.{key[1]}" if len(key) == 2 else f"{key[0]}.{key[1]}[{key[2]}]"
        return out

    def mask_for(self, fields: Sequence[str]) -> np.ndarray:
        """Boolean mask of every parameter whose field name is in `fields`"""
        mask = np.zeros(len(self.values), dtype=bool)
        for key, idx in self.layout.items():
            if key[1] in fields:
                mask[idx] = True
        return mask


# ---------------------------------------------------------------------------
# Inflow waveform
# ---------------------------------------------------------------------------

def close_cycle(values: np.ndarray, label: str) -> np.ndarray:
    """Copy of samples spanning a full cycle with the last sample set to the first"""
    values = np.array(values, dtype=float)
    # converged periodic output closes well within ten cycle-to-cycle tolerances of its amplitude
    scale = np.maximum(np.ptp(values, axis=0), np.finfo(float).tiny)
    gap = np.abs(values[-1] - values[0])
    if np.any(gap > 10.0 * config.PERIODICITY_TOL * scale):
        logger.warning(f"⚠️ {label}: last sample differs from the first by {np.max(gap):.6g}, using the first")
    values[-1] = values[0]
    return values


class InflowWaveform:
    """Periodic inflow Q_in(t) interpolated by a periodic cubic spline"""

    def __init__(self, t: Sequence[float], Q: Sequence[float], period: float):
        t = np.asarray(t, dtype=float)
        Q = np.asarray(Q, dtype=float)
        self.period = period
        self.t0 = float(t[0])
        self.constant = None
        self.spline = None

        if np.all(Q == Q[0]):
            self.constant = float(Q[0])
            return

        if t[-1] - t[0] < period * (1.0 - 1e-12):
            t = np.append(t, t[0] + period)
            Q = np.append(Q, Q[0])
        else:
            Q = close_cycle(Q, "inflow waveform")
        if t.size < 3:
            raise ModelValidationError("inflow waveform needs at least two distinct samples per period")
        self.spline = CubicSpline(t, Q, bc_type="periodic")

    def __call__(self, t):
        if self.constant is not None:
            return np.full_like(np.asarray(t, dtype=float), self.constant) if np.ndim(t) else self.constant
        tau = self.t0 + np.mod(np.asarray(t, dtype=float) - self.t0, self.period)
        out = self.spline(tau)
        return out if np.ndim(t) else float(out)

    def mean(self) -> float:
        if self.constant is not None:
            return self.constant
        return float(self.spline.integrate(self.t0, self.t0 + self.period)) / self.period


# ---------------------------------------------------------------------------
# Compiled network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LpnModel:
    spec: LpnModelSpec
    nodes: Tuple[str, ...]
    elements: Tuple
    inflow: InflowWaveform
    param_layout: Dict[Tuple, int]
    alpha_geometric: np.ndarray
    row_is_boundary: np.ndarray
    row_kind: np.ndarray
    row_ref_unknown: np.ndarray
    inlet_node: str
    outlet_nodes: Tuple[str, ...]

    @property
    def period(self) -> float:
        return self.spec.period

    @property
    def n_unknowns(self) -> int:
        return 2 * len(self.nodes)

    @property
    def n_params(self) -> int:
        return len(self.alpha_geometric)

    @property
    def vessels(self) -> List[BloodVessel]:
        return [e for e in self.elements if isinstance(e, BloodVessel)]

    @property
    def junctions(self) -> List[BloodVesselJunction]:
        return [e for e in self.elements if isinstance(e, BloodVesselJunction)]

    @property
    def windkessels(self) -> List[Windkessel]:
        return [e for e in self.elements if isinstance(e, Windkessel)]

    def unknown_index(self, node: str, quantity: str) -> int:
        try:
            base = 2 * self.nodes.index(node)
        except ValueError:
            raise ModelValidationError(f"unknown node {node}")
        return base if quantity == "P" else base + 1

    def unknown_names(self) -> List[str]:
        return [f"{n}:{q}" for n in self.nodes for q in ("P", "Q")]

    @classmethod
    def from_spec(cls, spec: LpnModelSpec) -> "LpnModel":
        nodes = tuple(spec.nodes)
        node_idx = {n: i for i, n in enumerate(nodes)}
        fluid = FluidProperties(spec.fluid.density, spec.fluid.viscosity, spec.fluid.stenosis_correction)
        bcs = spec.boundary_conditions

        def unknowns_of(*names):
            idx = []
            for n in names:
                if n not in node_idx:
                    raise ModelValidationError(f"element references unknown node '{n}'")
                idx += [2 * node_idx[n], 2 * node_idx[n] + 1]
            return np.array(idx)

        # each node has exactly one upstream and one downstream element
        upstream: Dict[str, str] = {}
        downstream: Dict[str, str] = {}

        def attach(table, node, element):
            if node in table:
                raise ModelValidationError(f"node '{node}' is attached to both {table[node]} and {element}")
            table[node] = element

        attach(upstream, bcs.inflow.node, "inflow")
        for v in spec.vessels:
            attach(downstream, v.inlet, v.name)
            attach(upstream, v.outlet, v.name)
        for j in spec.junctions:
            attach(downstream, j.inlet, j.name)
            for o in j.outlets:
                attach(upstream, o, j.name)
        for w in bcs.windkessels:
            attach(downstream, w.node, w.name)

        for n in nodes:
            if n not in upstream or n not in downstream:
                raise ModelValidationError(f"node '{n}' must have one upstream and one downstream element")

        layout: Dict[Tuple, int] = {}
        alpha: List[float] = []
        elements = []
        rows_used = 0

        inflow = InflowWaveform(bcs.inflow.t, bcs.inflow.Q, spec.period)
        inlet_unknowns = unknowns_of(bcs.inflow.node)
        elements.append(FlowInlet("inflow", node_idx[bcs.inflow.node], inlet_unknowns, np.array([0]), inflow))
        rows_used = 1

        for v in spec.vessels:
            values = dict(zip(VESSEL_FIELDS, (0.0, 0.0, 0.0, 0.0)))
            if v.geometry is not None:
                g = v.geometry
                geom = VesselGeometry(g.radius, g.length, g.youngs_modulus, g.wall_thickness,
                                      g.proximal_area, g.stenosed_area)
                values.update(zip(VESSEL_FIELDS, derive_geometric_params(geom, fluid)))
            for key in VESSEL_FIELDS:
                explicit = getattr(v, key)
                if explicit is not None:
                    values[key] = float(explicit)
            params = {}
            for key in VESSEL_FIELDS:
                params[key] = len(alpha)
                layout[(v.name, key)] = len(alpha)
                alpha.append(values[key])
            elements.append(BloodVessel(v.name, node_idx[v.inlet], node_idx[v.outlet],
                                        unknowns_of(v.inlet, v.outlet),
                                        np.arange(rows_used, rows_used + 2), params))
            rows_used += 2

        for j in spec.junctions:
            n = len(j.outlets)
            params = {}
            for key in JUNCTION_FIELDS:
                given = getattr(j, key) or [0.0] * n
                idx = []
                for i, value in enumerate(given):
                    layout[(j.name, key, i)] = len(alpha)
                    idx.append(len(alpha))
                    alpha.append(float(value))
                params[key] = tuple(idx)
            elements.append(BloodVesselJunction(j.name, node_idx[j.inlet], tuple(node_idx[o] for o in j.outlets),
                                                unknowns_of(j.inlet, *j.outlets),
                                                np.arange(rows_used, rows_used + n + 1), params))
            rows_used += n + 1

        for k, w in enumerate(bcs.windkessels):
            elements.append(Windkessel(w.name, node_idx[w.node], k, unknowns_of(w.node),
                                       np.array([rows_used]), w.Pref))
            rows_used += 1

        if rows_used != 2 * len(nodes):
            raise ModelValidationError(f"network has {rows_used} equations for {2 * len(nodes)} unknowns")

        # connectivity: every node reachable from the inlet
        children: Dict[str, List[str]] = {}
        for v in spec.vessels:
            children.setdefault(v.inlet, []).append(v.outlet)
        for j in spec.junctions:
            children.setdefault(j.inlet, []).extend(j.outlets)
        seen, stack = set(), [bcs.inflow.node]
        while stack:
            n = stack.pop()
            if n in seen:
                raise ModelValidationError(f"network contains a cycle through node '{n}'")
            seen.add(n)
            stack.extend(children.get(n, []))
        if seen != set(nodes):
            missing = sorted(set(nodes) - seen)
            raise ModelValidationError(f"nodes not reachable from the inlet: {missing}")

        row_is_boundary = np.zeros(rows_used, dtype=bool)
        row_kind = np.empty(rows_used, dtype=object)
        row_ref = np.zeros(rows_used, dtype=int)
        for e in elements:
            for row, kind in zip(e.rows, e.row_kinds):
                row_is_boundary[row] = e.is_boundary
                row_kind[row] = kind
                row_ref[row] = e.unknowns[0] if kind == "pressure" else e.unknowns[1]

        model = cls(
            spec=spec,
            nodes=nodes,
            elements=tuple(elements),
            inflow=inflow,
            param_layout=layout,
            alpha_geometric=np.array(alpha, dtype=float),
            row_is_boundary=row_is_boundary,
            row_kind=row_kind,
            row_ref_unknown=row_ref,
            inlet_node=bcs.inflow.node,
            outlet_nodes=tuple(w.node for w in bcs.windkessels),
        )
        logger.debug(f"📊 Compiled {spec.name}: {len(nodes)} nodes, {len(elements)} elements, {len(alpha)} parameters")
        return model


# ---------------------------------------------------------------------------
# Residual assembly
# ---------------------------------------------------------------------------

def alpha_values(model: LpnModel, alpha) -> np.ndarray:
    values = alpha.values if isinstance(alpha, ElementParams) else np.asarray(alpha, dtype=float)
    if values.shape != (model.n_params,):
        raise DimensionMismatch(f"alpha has shape {values.shape}, expected ({model.n_params},)")
    return values


def assemble_system(model: LpnModel, alpha, theta: WindkesselParamVector, y, ydot, t: float = 0.0):
    """Global (E, F, c, dc/dy, dc/dydot) at one state"""
    values = alpha_values(model, alpha)
    y = np.asarray(y, dtype=float)
    ydot = np.asarray(ydot, dtype=float)
    if y.shape != (model.n_unknowns,) or ydot.shape != (model.n_unknowns,):
        raise DimensionMismatch(f"state shapes {y.shape}/{ydot.shape}, expected ({model.n_unknowns},)")
    if len(theta) != len(model.windkessels):
        raise DimensionMismatch(f"theta has {len(theta)} entries for {len(model.windkessels)} outlets")
    bcs = theta.decode()
    parts = [e.contribution(values, y, ydot, t=t, windkessels=bcs) for e in model.elements]
    return scatter(parts, model.n_unknowns)


def assemble_residual(model: LpnModel, alpha, theta: WindkesselParamVector, y, ydot, t: float = 0.0) -> np.ndarray:
    E, F, c, _, _ = assemble_system(model, alpha, theta, y, ydot, t)
    return E @ np.asarray(ydot, dtype=float) + F @ np.asarray(y, dtype=float) + c


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    y: np.ndarray
    ydot: Optional[np.ndarray] = None
    columns: Tuple[str, ...] = ()

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2 or y.shape[0] != times.size:
            raise DimensionMismatch(f"trajectory y has shape {y.shape} for {times.size} times")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ModelValidationError("trajectory times must be strictly increasing")
        if self.ydot is not None and np.shape(self.ydot) != y.shape:
            raise DimensionMismatch(f"derivative shape {np.shape(self.ydot)} differs from {y.shape}")
        if self.columns and len(self.columns) != y.shape[1]:
            raise DimensionMismatch(f"{len(self.columns)} column names for {y.shape[1]} unknowns")

    def column(self, name: str) -> np.ndarray:
        return self.y[:, list(self.columns).index(name)]

    def with_columns(self, columns: Sequence[str]) -> "Trajectory":
        """Reorder to the given column names"""
        idx = [list(self.columns).index(c) for c in columns]
        ydot = None if self.ydot is None else self.ydot[:, idx]
        return Trajectory(self.times, self.y[:, idx], ydot, tuple(columns))


def write_trajectory(traj: Trajectory, path, deriv_path=None):
    frame = pd.DataFrame(traj.y, columns=list(traj.columns))
    frame.insert(0, "time", traj.times)
    frame.to_csv(path, index=False, float_format="%.12g")
    if deriv_path is not None and traj.ydot is not None:
        deriv = pd.DataFrame(traj.ydot, columns=list(traj.columns))
        deriv.insert(0, "time", traj.times)
        deriv.to_csv(deriv_path, index=False, float_format="%.12g")


def read_trajectory(path, deriv_path=None, model: Optional[LpnModel] = None) -> Trajectory:
    """Read a trajectory CSV; with a model, columns are reordered to its unknown layout"""
    frame = pd.read_csv(path)
    if "time" not in frame.columns:
        raise ModelValidationError(f"{path} has no 'time' column")
    columns = [c for c in frame.columns if c != "time"]
    ydot = None
    if deriv_path is not None:
        deriv = pd.read_csv(deriv_path)
        if list(deriv.columns) != list(frame.columns):
            raise DimensionMismatch(f"{deriv_path} header differs from {path}")
        ydot = deriv[columns].to_numpy(dtype=float)
    traj = Trajectory(frame["time"].to_numpy(dtype=float), frame[columns].to_numpy(dtype=float), ydot, tuple(columns))
    if model is not None:
        missing = set(model.unknown_names()) - set(columns)
        if missing:
            raise DimensionMismatch(f"trajectory lacks columns {sorted(missing)}")
        traj = traj.with_columns(model.unknown_names())
    return traj


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def load_model_spec(path) -> LpnModelSpec:
    with open(path) as f:
        data = json.load(f)
    try:
        return LpnModelSpec.model_validate(data)
    except ValueError as e:
        raise ModelValidationError(f"{path}: {e}")


def load_model(path) -> LpnModel:
    spec = load_model_spec(path)
    model = LpnModel.from_spec(spec)
    logger.info(f"✅ Loaded model '{spec.name}' from {path} ({len(model.nodes)} nodes)")
    return model


def save_model(spec: LpnModelSpec, path, extra: Optional[dict] = None):
    data = spec.model_dump(exclude_none=True)
    if extra:
        data.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2)


def spec_with_params(model: LpnModel, alpha) -> LpnModelSpec:
    """Copy of the model file with every element given explicit parameters"""
    values = alpha_values(model, alpha)
    spec = model.spec.model_copy(deep=True)
    for v in spec.vessels:
        for key in VESSEL_FIELDS:
            setattr(v, key, float(values[model.param_layout[(v.name, key)]]))
        v.geometry = None
    for j in spec.junctions:
        for key in JUNCTION_FIELDS:
            setattr(j, key, [float(values[model.param_layout[(j.name, key, i)]]) for i in range(len(j.outlets))])
    return spec


def spec_with_windkessels(spec: LpnModelSpec, bcs: Sequence[WindkesselBc]) -> LpnModelSpec:
    spec = spec.model_copy(deep=True)
    if len(bcs) != len(spec.boundary_conditions.windkessels):
        raise DimensionMismatch(f"{len(bcs)} Windkessel values for {len(spec.boundary_conditions.windkessels)} outlets")
    for w, bc in zip(spec.boundary_conditions.windkessels, bcs):
        w.Rp, w.Rd, w.C, w.Pref = bc.Rp, bc.Rd, bc.C, bc.Pref
    return spec


def perturb_boundary_conditions(spec: LpnModelSpec, low: float = 0.8, high: float = 1.2,
                                seed: Optional[int] = None) -> LpnModelSpec:
    """Scale inflow and every Windkessel Rp, Rd, C by independent U(low, high) factors"""
    rng = np.random.default_rng(seed)
    spec = spec.model_copy(deep=True)
    inflow = spec.boundary_conditions.inflow
    factor = rng.uniform(low, high)
    inflow.Q = [q * factor for q in inflow.Q]
    for w in spec.boundary_conditions.windkessels:
        w.Rp *= rng.uniform(low, high)
        w.Rd *= rng.uniform(low, high)
        w.C *= rng.uniform(low, high)
    return spec
