"""Economic receding-horizon OCP transcribed for IPOPT through casadi.

Units inside the NLP: temperatures in K above ambient, loop flows in L/s,
powers in kW. Dynamics rows are divided by the step length and expressed in
L/s*K so that all rows have comparable magnitude.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import casadi as ca
import numpy as np

from .model import DhnModel

log = logging.getLogger(__name__)

STATUS_MAP = {
    "Solve_Succeeded": "optimal",
    "Solved_To_Acceptable_Level": "acceptable",
    "Infeasible_Problem_Detected": "infeasible",
    "Maximum_Iterations_Exceeded": "iteration-limit",
    "Maximum_CpuTime_Exceeded": "time-limit",
    "Maximum_WallTime_Exceeded": "time-limit",
}
SUCCESS = ("optimal", "acceptable")
JUNCTION_HOLD = 1e-5   # L/s, keeps stagnant junction rows nonsingular
X_GUARD = 1e3          # K, loose state bounds; comfort and demand rows are softened instead


class OcpInputError(ValueError):
    pass


@dataclass
class OcpOptions:
    horizon: int = 32
    control_horizon: int | None = None
    block: int = 4
    tau: float = 900.0
    w_price: float = 1.0
    w_temp: float = 1e-4
    temp_power: int = 1
    w_diff: float = 1e-3
    w_sto: float = 1e-2
    w_slack: float = 1e4
    w_comp: float = 1e-3
    storage_target: float = 80.0          # degC
    storage_balance: bool = True
    balance_tol: float = 0.002            # fraction of tank volume at the day boundary
    steps_per_day: int = 96
    t_supply_min: float = 70.0            # consumer inlet, degC
    t_return_floor: float = 30.0          # consumer outlet, degC
    floor_margin: float = 5.0             # K kept above the floor against plant mismatch
    t_box: tuple | None = None            # soft bounds on all states, degC
    linear_solver: str = "mumps"
    max_iter: int = 1000
    max_wall: float = 300.0
    tol: float = 1e-6
    print_level: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        nc = self.n_c
        if not 1 <= nc <= self.horizon:
            raise ValueError("control horizon must lie in [1, horizon]")
        if self.block < 1:
            raise ValueError("block length must be >= 1")
        if self.temp_power not in (1, 2):
            raise ValueError("temperature power must be 1 or 2")
        for name in ("w_price", "w_temp", "w_diff", "w_sto", "w_slack", "w_comp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def n_c(self) -> int:
        return self.horizon if self.control_horizon is None else self.control_horizon


def apply_move_blocking(n: int, n_c: int | None = None, block: int = 4) -> np.ndarray:
    """Index of the free input that each step ``t < n`` uses."""
    if block < 1:
        raise ValueError("block length must be >= 1")
    n_c = n if n_c is None else n_c

    def blockmap(s):
        start = (s // block) * block
        return start if start < n - (block - 1) else s

    return np.array([blockmap(min(t, n_c)) for t in range(n)], dtype=int)


def free_indices(mapping) -> np.ndarray:
    return np.unique(mapping)


@dataclass(frozen=True)
class Producer:
    """Controllable injection on a layout column (kW bounds)."""

    name: str
    column: str
    p_max: float
    p_min: float = 0.0
    price_factor: float = 1.0


def eval_objective(power, states=None, price=None, opts: OcpOptions | None = None, slacks=None,
                   storage_states=None, comp=None, factors=None):
    """Objective of a trajectory; returns ``(total, breakdown)``.

    ``power`` is ``(N, n_p)`` kW, ``states`` ``(N, n)`` K for steps 1..N,
    ``storage_states`` the terminal storage temperatures in K.
    """
    opts = opts or OcpOptions()
    p = np.atleast_2d(np.asarray(power, dtype=float))
    if p.shape[0] == 1 and np.ndim(power) == 1:
        p = p.T
    n = p.shape[0]
    f = np.ones(p.shape[1]) if factors is None else np.asarray(factors, dtype=float)
    price = np.zeros(n) if price is None else np.asarray(price, dtype=float)
    terms = {"price": opts.w_price * float(price @ (p @ f))}
    if states is not None and len(states):
        x = np.asarray(states, dtype=float)
        terms["temperature"] = opts.w_temp * float(np.sum(np.mean(x ** opts.temp_power, axis=1)))
    else:
        terms["temperature"] = 0.0
    terms["diff"] = opts.w_diff * float(np.sum(np.diff(p, axis=0) ** 2))
    if storage_states is not None and len(storage_states):
        target = opts.storage_target - _ambient(opts)
        terms["storage"] = opts.w_sto * float(np.sum((np.asarray(storage_states) - target) ** 2))
    else:
        terms["storage"] = 0.0
    s = np.concatenate([np.ravel(v) for v in (slacks or {}).values()]) if slacks else np.zeros(0)
    terms["slack"] = opts.w_slack * float(s @ s)
    terms["complementarity"] = opts.w_comp * float(comp or 0.0)
    return sum(terms.values()), terms


def ipopt_solver(nlp: dict, opts: OcpOptions | None = None, name: str = "nlp"):
    """IPOPT behind casadi with the tolerances and limits of ``opts``."""
    o = opts or OcpOptions()
    ipopt = {"max_iter": o.max_iter, "max_wall_time": float(o.max_wall), "tol": o.tol,
             "print_level": o.print_level, "sb": "yes", "mu_strategy": "adaptive",
             "acceptable_tol": 1e-4, "acceptable_iter": 10, "linear_solver": o.linear_solver}
    return ca.nlpsol(name, "ipopt", nlp,
                     {"ipopt": ipopt, "print_time": False, "error_on_fail": False})


@dataclass
class NlpResult:
    z: np.ndarray
    lam_g: np.ndarray
    objective: float
    status: str
    iterations: int
    wall_time: float


def run_solver(solver, z0, p=None, lbz=-np.inf, ubz=np.inf, lbg=-np.inf, ubg=np.inf) -> NlpResult:
    t0 = time.perf_counter()
    args = dict(x0=z0, lbx=lbz, ubx=ubz, lbg=lbg, ubg=ubg)
    if p is not None:
        args["p"] = p
    res = solver(**args)
    stats = solver.stats()
    return NlpResult(np.asarray(res["x"]).ravel(), np.asarray(res["lam_g"]).ravel(),
                     float(res["f"]), STATUS_MAP.get(stats.get("return_status", ""), "infeasible"),
                     int(stats.get("iter_count", 0)), time.perf_counter() - t0)


def solve_nlp(nlp: dict, z0, p=None, lbz=-np.inf, ubz=np.inf, lbg=-np.inf, ubg=np.inf,
              opts: OcpOptions | None = None) -> NlpResult:
    """One-off solve of a casadi NLP dict ``{x, f, g[, p]}``."""
    return run_solver(ipopt_solver(nlp, opts), z0, p, lbz, ubz, lbg, ubg)


def _ambient(opts) -> float:
    return getattr(opts, "_ambient", 10.0)


@dataclass
class OcpSolution:
    status: str
    objective: float
    terms: dict
    states: np.ndarray          # (N+1, n) K, row 0 is x0
    loop_flows: np.ndarray      # (N, m_r) m^3/s
    power: np.ndarray           # (N, n_p) W
    slacks: dict
    iterations: int
    wall_time: float
    z: np.ndarray
    max_violation: float = 0.0
    storage_volume: np.ndarray | None = None
    mapping: np.ndarray | None = None

    @property
    def success(self) -> bool:
        return self.status in SUCCESS

    def first_input(self):
        return self.loop_flows[0], self.power[0]


@dataclass
class OcpData:
    """Per-solve parameters. Temperatures in degC, powers in kW."""

    x0: np.ndarray                  # K above ambient
    disturbance: np.ndarray         # (N, n_cols) kW on every layout column
    price: np.ndarray               # (N,) relative price
    t_supply_min: np.ndarray | None = None
    box: np.ndarray | None = None   # (N, 2) degC
    storage_volume0: float = 0.0    # m^3 net charged since the day began
    steps_to_day_end: int | None = None
    p_max: np.ndarray | None = None  # kW per producer, overrides options


class OcpProblem:
    """NLP for one model and controller configuration, reused every step."""

    def __init__(self, model: DhnModel, opts: OcpOptions, producers, pinned=None):
        self.model = model
        self.opts = opts
        opts._ambient = model.ambient
        self.producers = tuple(producers)
        if not self.producers:
            raise ValueError("at least one controllable producer is needed")
        tg = model.thermal
        self.n = tg.n_nodes
        self.N = opts.horizon
        self.m_r = model.m_r
        self.n_p = len(self.producers)
        self.cols = model.layout.names
        self.n_cols = len(self.cols)
        self.consumers = model.consumer_names
        self.n_cons = len(self.consumers)
        self.mapping = apply_move_blocking(self.N, opts.n_c, opts.block)
        self.free = free_indices(self.mapping)
        self.n_free = len(self.free)
        slot = {int(t): i for i, t in enumerate(self.free)}
        self.slot = np.array([slot[int(t)] for t in self.mapping])
        self.pinned = np.zeros(self.m_r, dtype=bool) if pinned is None else np.asarray(pinned)
        sto = model.storage_edges
        self.has_storage = bool(sto) and not self.loops_pinned_all(sto)
        self._build()

    def loops_pinned_all(self, edges) -> bool:
        through = self.model.loops_through(edges)
        return bool(np.all(self.pinned[through]))

    # layout of z
    def _sizes(self):
        n, N = self.n, self.N
        n_box = N * n if self.opts.t_box is not None else 0
        return [("x", N * n), ("u", self.n_free * (self.m_r + self.n_p)),
                ("qe", self.n_free * self.model.graph.n_edges),
                ("s_in", N * self.n_cons), ("s_floor", N * self.n_cons), ("s_box", n_box)]

    def _build(self):
        m, o = self.model, self.opts
        tg = m.thermal
        n, N, m_r, n_p = self.n, self.N, self.m_r, self.n_p
        self.offsets = {}
        pos = 0
        for name, size in self._sizes():
            self.offsets[name] = (pos, pos + size)
            pos += size
        self.n_z = pos
        z = ca.SX.sym("z", self.n_z)
        X = ca.reshape(z[slice(*self.offsets["x"])], n, N)          # column t -> x_{t+1}
        U = ca.reshape(z[slice(*self.offsets["u"])], m_r + n_p, self.n_free)
        n_e = m.graph.n_edges
        QE = ca.reshape(z[slice(*self.offsets["qe"])], n_e, self.n_free)
        S_in = ca.reshape(z[slice(*self.offsets["s_in"])], max(self.n_cons, 1), N) \
            if self.n_cons else ca.SX(0, N)
        S_fl = ca.reshape(z[slice(*self.offsets["s_floor"])], max(self.n_cons, 1), N) \
            if self.n_cons else ca.SX(0, N)
        S_box = ca.reshape(z[slice(*self.offsets["s_box"])], n, N) if o.t_box is not None \
            else None

        # parameters
        sizes = [("x0", n), ("dist", N * self.n_cols), ("price", N), ("tmin", N),
                 ("lo", N), ("hi", N), ("floor", 1), ("s0", 1)]
        self.p_offsets = {}
        pos = 0
        for name, size in sizes:
            self.p_offsets[name] = (pos, pos + size)
            pos += size
        self.n_par = pos
        p = ca.SX.sym("p", self.n_par)
        P = {k: p[slice(*v)] for k, v in self.p_offsets.items()}
        dist = ca.reshape(P["dist"], self.n_cols, N)

        fr = m.loops.reduced                      # m_r x |E+|
        rhocp = tg.rho * tg.cp
        inj_rows = [[] for _ in range(n)]         # node -> [(col, weight)]
        for j, (rows, wts) in enumerate(zip(m.layout.rows, m.layout.weights)):
            for r, w in zip(rows, wts):
                inj_rows[r].append((j, w))
        prod_col = [self.cols.index(pr.column) for pr in self.producers]
        factors = np.array([pr.price_factor for pr in self.producers])
        hold = np.zeros(n)
        hold[: tg.n_junctions] = JUNCTION_HOLD
        vol_rate = 1e3 * tg.volume / o.tau
        alpha = 1e3 * tg.alpha

        g, self.g_names = [], []
        lbg, ubg = [], []

        def add(expr, lo, hi, name):
            g.append(expr)
            k = expr.shape[0]
            lbg.extend(np.broadcast_to(lo, (k,)))
            ubg.extend(np.broadcast_to(hi, (k,)))
            self.g_names.append((name, k))

        # edge flows are lifted into their own variables (L/s); this keeps the
        # bilinear advection terms from coupling every loop flow to every cell
        qe = [QE[:, i] for i in range(self.n_free)]
        for i in range(self.n_free):
            add(qe[i] - ca.mtimes(ca.DM(fr.T), U[:m_r, i]), 0.0, 0.0, f"lift{i}")

        x_prev = P["x0"]
        for t in range(N):
            i = self.slot[t]
            q = qe[i]
            xt = X[:, t]
            w = dist[:, t]
            pw = [w[j] for j in range(self.n_cols)]
            for c, j in enumerate(prod_col):
                pw[j] = pw[j] + U[m_r + c, i]
            rows = [vol_rate[v] * (xt[v] - x_prev[v]) + alpha[v] * xt[v]
                    + hold[v] * (xt[v] - x_prev[v]) for v in range(n)]
            for k in range(len(tg.tails)):
                a, b = int(tg.tails[k]), int(tg.heads[k])
                flow = q[int(tg.flow_index[k])] * xt[a]
                rows[b] = rows[b] - flow
                rows[a] = rows[a] + flow
            for v in range(n):
                for j, wt in inj_rows[v]:
                    rows[v] = rows[v] - pw[j] * (1e6 * wt / rhocp)
            add(ca.vertcat(*rows), 0.0, 0.0, f"dyn{t}")
            x_prev = xt

        zmats = m.hydraulics.loop_matrices()      # SI units
        cap = m.hydraulics.loop_capacity()
        qmax = 1e3 * m.graph.flow_upper()
        scale = np.maximum(cap, 1.0)
        for i in range(self.n_free):
            # q_r' Z^i q_r written through the lifted edge flows
            loss = (1e-6 * m.hydraulics.r_mu) * qe[i] ** 2
            rows = [ca.dot(ca.DM(fr[li]), loss) / scale[li] for li in range(m_r)]
            add(ca.vertcat(*rows), -np.inf, cap / scale, f"loop{i}")

        inlet = [m.inlet_node(c) for c in self.consumers]
        hx = [m.hx_cell(c) for c in self.consumers]
        amb = m.ambient
        if self.n_cons:
            for t in range(N):
                xt = X[:, t]
                add(ca.vertcat(*[xt[v] for v in inlet]) + S_in[:, t] - P["tmin"][t], 0.0, np.inf,
                    f"inlet{t}")
                add(ca.vertcat(*[xt[v] for v in hx]) + S_fl[:, t] - P["floor"], 0.0, np.inf,
                    f"floor{t}")
        if o.t_box is not None:
            for t in range(N):
                xt = X[:, t]
                add(xt - P["lo"][t] + S_box[:, t], 0.0, np.inf, f"boxlo{t}")
                add(P["hi"][t] - xt + S_box[:, t], 0.0, np.inf, f"boxhi{t}")

        self.storage_rows = None
        sto = m.storage_edges
        if self.has_storage and o.storage_balance:
            fwd, rev = sto
            cum, rows = P["s0"], []
            for t in range(N):
                q = qe[self.slot[t]]
                cum = cum + (q[fwd] - q[rev]) * 1e-3 * o.tau
                rows.append(cum)
            start = sum(k for _, k in self.g_names)
            add(ca.vertcat(*rows), -np.inf, np.inf, "storage")
            self.storage_rows = (start, start + N)

        # objective
        price = P["price"]
        f_price = 0
        f_diff = 0
        for t in range(N):
            i = self.slot[t]
            f_price = f_price + price[t] * ca.dot(ca.DM(factors), U[m_r:, i])
            if t + 1 < N:
                d = U[m_r:, self.slot[t + 1]] - U[m_r:, i]
                f_diff = f_diff + ca.sumsqr(d)
        f_temp = 0
        for t in range(N):
            xt = X[:, t]
            f_temp = f_temp + ca.sum1(xt ** o.temp_power) / n
        sc = m.storage_cells
        target = o.storage_target - amb
        f_sto = ca.sumsqr(X[sc.tolist(), N - 1] - target) if (len(sc) and self.has_storage) else 0
        f_slack = ca.sumsqr(z[self.offsets["s_in"][0]:])
        f_comp = 0
        for a, b in m.bidirectional_pairs():
            for t in range(N):
                q = qe[self.slot[t]]
                f_comp = f_comp + q[a] * q[b]
        terms = [o.w_price * f_price, o.w_temp * f_temp, o.w_diff * f_diff, o.w_sto * f_sto,
                 o.w_slack * f_slack, o.w_comp * f_comp]
        self.term_names = ("price", "temperature", "diff", "storage", "slack", "complementarity")
        f = sum(terms)
        gv = ca.vertcat(*g)
        self.n_g = gv.shape[0]
        self.lbg0 = np.array(lbg, dtype=float)
        self.ubg0 = np.array(ubg, dtype=float)
        self.f_fun = ca.Function("f", [z, p], [f])
        self.g_fun = ca.Function("g", [z, p], [gv])
        self.terms_fun = ca.Function("terms", [z, p], [ca.vertcat(*[ca.SX(t) if not isinstance(
            t, ca.SX) else t for t in terms])])
        self.grad_fun = ca.Function("grad_f", [z, p], [ca.gradient(f, z)])
        self.jac_fun = ca.Function("jac_g", [z, p], [ca.jacobian(gv, z)])
        self.nlp = {"x": z, "p": p, "f": f, "g": gv}
        self.solver = ipopt_solver(self.nlp, o, "ocp")
        self.factors = factors
        self.inlet, self.hx = inlet, hx

        lbz = np.full(self.n_z, -np.inf)
        ubz = np.full(self.n_z, np.inf)
        a, b = self.offsets["x"]
        lbz[a:b], ubz[a:b] = -X_GUARD, X_GUARD
        uu = np.zeros((self.m_r + self.n_p, self.n_free))
        hi = np.zeros_like(uu)
        zdiag = np.array([zm[i, i] for i, zm in enumerate(zmats)])
        with np.errstate(divide="ignore"):
            qbar = np.where(zdiag > 0, 1e3 * np.sqrt(cap / np.where(zdiag > 0, zdiag, 1)), 0.0)
        path_cap = np.array([qmax[row > 0].min() for row in fr])
        qbar = np.minimum(qbar, path_cap)
        qbar[self.pinned] = 0.0
        hi[:m_r, :] = qbar[:, None]
        for c, pr in enumerate(self.producers):
            uu[m_r + c, :] = pr.p_min
            hi[m_r + c, :] = pr.p_max
        a, b = self.offsets["u"]
        lbz[a:b] = uu.ravel(order="F")
        ubz[a:b] = hi.ravel(order="F")
        a, b = self.offsets["qe"]
        lbz[a:b] = 0.0
        ubz[a:b] = np.tile(qmax, self.n_free)
        a = self.offsets["s_in"][0]
        lbz[a:] = 0.0
        self.lbz0, self.ubz0 = lbz, ubz
        self.q_upper = qbar

    # parameters and bounds
    def params(self, data: OcpData) -> np.ndarray:
        o, N, amb = self.opts, self.N, self.model.ambient
        p = np.zeros(self.n_par)

        def put(name, val):
            a, b = self.p_offsets[name]
            p[a:b] = np.ravel(val, order="F") if np.ndim(val) > 1 else val

        x0 = np.asarray(data.x0, dtype=float)
        if x0.shape != (self.n,):
            raise OcpInputError(f"x0 has shape {x0.shape}, expected ({self.n},)")
        dist = np.asarray(data.disturbance, dtype=float)
        if dist.ndim != 2 or dist.shape[0] < N or dist.shape[1] != self.n_cols:
            raise OcpInputError(f"disturbance forecast must be at least ({N}, {self.n_cols})")
        price = np.asarray(data.price, dtype=float)
        if price.shape[0] < N:
            raise OcpInputError("price forecast shorter than the horizon")
        tmin = np.full(N, o.t_supply_min) if data.t_supply_min is None else \
            np.asarray(data.t_supply_min, dtype=float)[:N]
        default_box = o.t_box if o.t_box is not None else (-np.inf, np.inf)
        box = np.tile(default_box, (N, 1)) if data.box is None else np.asarray(data.box, float)[:N]
        put("x0", x0)
        put("dist", dist[:N].T)
        put("price", price[:N])
        put("tmin", tmin - amb)
        put("lo", box[:, 0] - amb)
        put("hi", box[:, 1] - amb)
        put("floor", o.t_return_floor + o.floor_margin - amb)
        put("s0", data.storage_volume0)
        return p

    def bounds(self, data: OcpData):
        lbz, ubz = self.lbz0.copy(), self.ubz0.copy()
        if data.p_max is not None:
            pm = np.asarray(data.p_max, dtype=float)
            pm = np.broadcast_to(pm, (self.N, self.n_p)) if pm.ndim < 2 else pm[: self.N]
            a, _ = self.offsets["u"]
            width = self.m_r + self.n_p
            for i in range(self.n_free):
                # a blocked input must respect the tightest bound of its steps
                cap = pm[self.slot == i].min(axis=0)
                ubz[a + i * width + self.m_r: a + (i + 1) * width] = cap
        lbg, ubg = self.lbg0.copy(), self.ubg0.copy()
        if self.storage_rows is not None:
            a, b = self.storage_rows
            half = 0.5 * self.model.storage_volume
            lbg[a:b], ubg[a:b] = -half, half
            k = data.steps_to_day_end
            if k is not None and 1 <= k <= self.N:
                delta = self.opts.balance_tol * self.model.storage_volume
                lbg[a + k - 1], ubg[a + k - 1] = -delta, delta
        return lbz, ubz, lbg, ubg

    # initial guesses
    def cold_start(self, data: OcpData) -> np.ndarray:
        z = np.zeros(self.n_z)
        a, b = self.offsets["x"]
        z[a:b] = np.tile(np.asarray(data.x0, dtype=float), self.N)
        u = np.zeros((self.m_r + self.n_p, self.n_free))
        u[: self.m_r] = 0.5 * self.q_upper[:, None]
        # midpoint flows may violate the loop inequality; shrink to the feasible scale
        s = self.model.hydraulics.max_feasible_scale(1e-3 * u[: self.m_r, 0]) if np.any(
            u[: self.m_r, 0]) else 1.0
        u[: self.m_r] *= min(1.0, 0.9 * s)
        demand = -np.asarray(data.disturbance, dtype=float)[: self.N].sum(axis=1).mean()
        share = max(demand, 0.0) / self.n_p
        for c, pr in enumerate(self.producers):
            u[self.m_r + c] = np.clip(share, pr.p_min, pr.p_max)
        a, b = self.offsets["u"]
        z[a:b] = u.ravel(order="F")
        return self._fill_edges(z)

    def _fill_edges(self, z):
        a, b = self.offsets["u"]
        u = z[a:b].reshape(self.n_free, self.m_r + self.n_p)[:, : self.m_r]
        a, b = self.offsets["qe"]
        z[a:b] = (u @ self.model.loops.reduced).ravel()
        return z

    def warm_start(self, previous: OcpSolution | None, data: OcpData) -> np.ndarray:
        """Shift the previous optimum by one step and duplicate its last entry."""
        if previous is None or previous.z.shape != (self.n_z,):
            return self.cold_start(data)
        z = np.zeros(self.n_z)
        a, b = self.offsets["x"]
        x = previous.z[a:b].reshape(self.N, self.n)
        z[a:b] = np.vstack([x[1:], x[-1:]]).ravel()
        width = self.m_r + self.n_p
        a, b = self.offsets["u"]
        uf = previous.z[a:b].reshape(self.n_free, width)
        full = uf[self.slot]                       # (N, width) on the full grid
        shifted = np.vstack([full[1:], full[-1:]])
        z[a:b] = shifted[self.free].ravel()
        return self._fill_edges(z)

    # solve
    def solve(self, data: OcpData, guess=None) -> OcpSolution:
        p = self.params(data)
        lbz, ubz, lbg, ubg = self.bounds(data)
        t0 = time.perf_counter()
        if np.any(lbz > ubz) or np.any(lbg > ubg):
            return self._empty("infeasible", t0)
        z0 = self.cold_start(data) if guess is None else np.asarray(guess, dtype=float)
        z0 = np.clip(z0, lbz, ubz)
        res = run_solver(self.solver, z0, p, lbz, ubz, lbg, ubg)
        wall = time.perf_counter() - t0
        sol = self.unpack(res.z, p, res.status, wall, res.iterations, lbg, ubg)
        log.info("ocp solve: status=%s iter=%d wall=%.2fs obj=%.4g viol=%.2e terms=%s",
                 sol.status, sol.iterations, wall, sol.objective, sol.max_violation,
                 {k: round(v, 4) for k, v in sol.terms.items()})
        return sol

    def _empty(self, status, t0):
        N = self.N
        return OcpSolution(status, np.inf, {}, np.zeros((N + 1, self.n)),
                           np.zeros((N, self.m_r)), np.zeros((N, self.n_p)), {}, 0,
                           time.perf_counter() - t0, np.zeros(self.n_z), np.inf)

    def unpack(self, zs, p, status="optimal", wall=0.0, iterations=0, lbg=None, ubg=None):
        N, n = self.N, self.n
        a, b = self.offsets["x"]
        x = zs[a:b].reshape(N, n)
        x0 = p[slice(*self.p_offsets["x0"])]
        width = self.m_r + self.n_p
        # IPOPT may step a hair past a bound; report inputs inside them
        zs = np.array(zs, dtype=float)
        a, b = self.offsets["u"]
        blocks = zs[a:b].reshape(self.n_free, width)
        p_min = np.array([pr.p_min for pr in self.producers])
        blocks[:, self.m_r:] = np.maximum(blocks[:, self.m_r:], p_min)
        zs[a:b] = blocks.ravel()
        u = blocks[self.slot]
        q_r = np.maximum(u[:, : self.m_r], 0.0) * 1e-3
        power = u[:, self.m_r:] * 1e3
        zs = self.polish_slacks(zs, p)
        sl = {}
        for name in ("s_in", "s_floor"):
            a, b = self.offsets[name]
            sl[name] = zs[a:b].reshape(N, self.n_cons) if self.n_cons else np.zeros((N, 0))
        a, b = self.offsets["s_box"]
        sl["s_box"] = zs[a:b].reshape(N, -1) if b > a else np.zeros((N, 0))
        terms = np.asarray(self.terms_fun(zs, p)).ravel()
        g = np.asarray(self.g_fun(zs, p)).ravel()
        if lbg is None:
            lbg, ubg = self.lbg0, self.ubg0
        viol = float(max(np.max(lbg - g, initial=0.0), np.max(g - ubg, initial=0.0)))
        vol = None
        if self.storage_rows is not None:
            vol = g[slice(*self.storage_rows)]
        return OcpSolution(status, float(terms.sum()), dict(zip(self.term_names, terms.tolist())),
                           np.vstack([x0, x]), q_r, power, sl, iterations, wall, zs, viol, vol,
                           self.mapping)

    def polish_slacks(self, zs, p) -> np.ndarray:
        """Set each slack to the violation it has to cover at the given states.

        For fixed states this is the exact minimizer over the slacks; it
        removes the barrier residue an interior-point solve leaves behind.
        """
        zs = np.array(zs, dtype=float)
        N, n = self.N, self.n
        a, b = self.offsets["x"]
        x = zs[a:b].reshape(N, n)
        par = {k: p[slice(*v)] for k, v in self.p_offsets.items()}
        if self.n_cons:
            a, b = self.offsets["s_in"]
            need = par["tmin"][:, None] - x[:, self.inlet]
            zs[a:b] = np.maximum(need, 0.0).ravel()
            a, b = self.offsets["s_floor"]
            zs[a:b] = np.maximum(par["floor"][0] - x[:, self.hx], 0.0).ravel()
        if self.opts.t_box is not None:
            a, b = self.offsets["s_box"]
            over = np.maximum(x - par["hi"][:, None], par["lo"][:, None] - x)
            zs[a:b] = np.maximum(over, 0.0).ravel()
        return zs

    # derivative evaluators
    def objective(self, z, p) -> float:
        return float(self.f_fun(z, p))

    def constraints(self, z, p) -> np.ndarray:
        return np.asarray(self.g_fun(z, p)).ravel()

    def gradient(self, z, p) -> np.ndarray:
        return np.asarray(self.grad_fun(z, p)).ravel()

    def jacobian(self, z, p) -> np.ndarray:
        return np.asarray(ca.DM(self.jac_fun(z, p)).full())

    def jacobian_sparsity(self):
        return self.jac_fun.sparsity_out(0)

    def consistent_states(self, z, p) -> np.ndarray:
        """Replace the state block of ``z`` so the dynamics rows vanish."""
        a, b = self.offsets["x"]
        rows = self.constraint_rows("dyn")
        zz = np.array(z, dtype=float)
        zz[a:b] = 0.0
        g0 = self.constraints(zz, p)[rows]
        jac = self.jacobian(zz, p)[np.ix_(rows, np.arange(a, b))]
        zz[a:b] = np.linalg.solve(jac, -g0)
        return zz

    def constraint_rows(self, prefix: str) -> np.ndarray:
        """Indices of the constraint blocks whose name starts with ``prefix``."""
        out, pos = [], 0
        for name, k in self.g_names:
            if name.startswith(prefix):
                out.extend(range(pos, pos + k))
            pos += k
        return np.array(out, dtype=int)


@dataclass
class DerivativeReport:
    gradient_error: float
    jacobian_error: float
    points: int
    errors: list = field(default_factory=list)


def derivative_check(problem: OcpProblem, data: OcpData, points: int = 100, seed: int = 0,
                     h: float = 1e-5) -> DerivativeReport:
    """Compare AD derivatives with central differences at random feasible points.

    Points draw inputs and slacks inside their bounds, then solve the dynamics
    rows for the states, so every point satisfies the model equations.
    """
    rng = np.random.default_rng(seed)
    p = problem.params(data)
    lbz, ubz, _, _ = problem.bounds(data)
    worst_g, worst_j, errors = 0.0, 0.0, []
    for _ in range(points):
        lo = np.where(np.isfinite(lbz), lbz, 0.0)
        hi = np.where(np.isfinite(ubz), ubz, lo + 1.0)
        z = problem.consistent_states(rng.uniform(lo, hi), p)
        grad = problem.gradient(z, p)
        jac = problem.jacobian(z, p)
        fd_g = np.zeros_like(grad)
        fd_j = np.zeros_like(jac)
        for i in range(problem.n_z):
            step = h * max(1.0, abs(z[i]))
            zp, zm = z.copy(), z.copy()
            zp[i] += step
            zm[i] -= step
            fd_g[i] = (problem.objective(zp, p) - problem.objective(zm, p)) / (2 * step)
            fd_j[:, i] = (problem.constraints(zp, p) - problem.constraints(zm, p)) / (2 * step)
        eg = np.linalg.norm(grad - fd_g) / max(np.linalg.norm(grad), 1e-12)
        ej = np.linalg.norm(jac - fd_j) / max(np.linalg.norm(jac), 1e-12)
        errors.append((eg, ej))
        worst_g, worst_j = max(worst_g, eg), max(worst_j, ej)
    return DerivativeReport(worst_g, worst_j, points, errors)
