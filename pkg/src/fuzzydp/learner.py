"""Learnable fuzzy densities trained on a Choquet-target regression loss.

Densities come from ``clamp(softmax(z))`` where ``z`` is either a row of a
logit table (one row per state) or the output of a small tanh network on
state features.  Clamping keeps every density in ``[1e-4, 1 - 1e-4]`` and
is not followed by renormalization.

Gradients treat ``lam`` as a constant (it is re-solved on every forward
pass but not differentiated) and freeze the sort permutation of the level
values.  Under those conventions the aggregate is the sum

    C(f; g) = sum_i (f_(i) - f_(i+1)) * H_i(g),   H_i = (prod_{j<=i} (1 + lam g_(j)) - 1) / lam

which is smooth in ``g``; :func:`surrogate_loss` evaluates exactly this
function, so finite differences of it check :func:`loss_and_gradient`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteGradient, ParseError
from .measure import LAMBDA_ZERO, MeasureField, solve_lambda
from .uncertainty import level_value_table, stream

CLAMP_LO = 1e-4
CLAMP_HI = 1.0 - 1e-4
HIDDEN = 32
MAX_HALVINGS = 30


# -- model ------------------------------------------------------------------


@dataclass
class DensityModel:
    """Tabular logits or a two-hidden-layer tanh network producing K densities.

    Parameters are held in ``params``: ``{"logits": (S, K)}`` for the
    tabular mode, ``{"W1", "b1", "W2", "b2", "W3", "b3"}`` for the network.
    """

    mode: str
    K: int
    params: dict
    lr: float = 0.1

    def __post_init__(self):
        if self.mode not in ("tabular", "network"):
            raise ValueError(f"mode must be 'tabular' or 'network', got {self.mode!r}")
        self.params = {k: np.array(v, dtype=float) for k, v in self.params.items()}
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteGradient(f"parameter {name} is not finite")

    @classmethod
    def tabular(cls, n_states: int, K: int, lr: float = 0.1, logits=None) -> "DensityModel":
        logits = np.zeros((n_states, K)) if logits is None else np.asarray(logits, dtype=float)
        if logits.shape != (n_states, K):
            raise ValueError(f"logits must have shape {(n_states, K)}, got {logits.shape}")
        return cls("tabular", K, {"logits": logits}, lr)

    @classmethod
    def network(cls, n_features: int, K: int, lr: float = 0.01, seed: int = 0,
                hidden: int = HIDDEN) -> "DensityModel":
        rng = stream(seed, 0xD0)
        sizes = [(hidden, n_features), (hidden, hidden), (K, hidden)]
        params = {}
        for i, (n_out, n_in) in enumerate(sizes, start=1):
            params[f"W{i}"] = rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)
            params[f"b{i}"] = np.zeros(n_out)
        params["W3"] *= 0.1
        return cls("network", K, params, lr)

    def copy(self, params=None) -> "DensityModel":
        params = {k: v.copy() for k, v in (params or self.params).items()}
        return DensityModel(self.mode, self.K, params, self.lr)


def _network_pass(params, X):
    h1 = np.tanh(X @ params["W1"].T + params["b1"])
    h2 = np.tanh(h1 @ params["W2"].T + params["b2"])
    return h1, h2, h2 @ params["W3"].T + params["b3"]


def raw_output(model: DensityModel, s) -> np.ndarray:
    """Pre-softmax outputs; ``s`` is state indices (tabular) or features (network)."""
    if model.mode == "tabular":
        return model.params["logits"][np.asarray(s, dtype=np.int64)]
    X = np.asarray(s, dtype=float)
    return _network_pass(model.params, X)[2]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: DensityModel, s) -> np.ndarray:
    """Clamped softmax densities for state(s) ``s``; shape ``(..., K)``."""
    return np.clip(_softmax(raw_output(model, s)), CLAMP_LO, CLAMP_HI)


def measure_field(model: DensityModel, inputs) -> MeasureField:
    """Per-state lambda-measures for every row of ``inputs``."""
    return MeasureField.from_densities(forward(model, inputs))


# -- batches and loss -------------------------------------------------------


@dataclass
class TransitionBatch:
    """Transitions with level values of the successor and Monte Carlo targets.

    ``inputs`` feed the density model (state indices or feature rows);
    ``Lr`` and ``Lc`` are the (N, K) level values of ``V_r`` and ``V_c``
    after each transition; ``R`` and ``C`` are the observed returns.
    """

    inputs: np.ndarray
    r: np.ndarray
    c: np.ndarray
    Lr: np.ndarray
    Lc: np.ndarray
    R: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        for name in ("r", "c", "R", "C"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        self.Lr = np.atleast_2d(np.asarray(self.Lr, dtype=float))
        self.Lc = np.atleast_2d(np.asarray(self.Lc, dtype=float))
        self.inputs = np.asarray(self.inputs)
        n = len(self.r)
        if n == 0:
            raise ValueError("batch is empty")
        if not all(len(x) == n for x in (self.c, self.R, self.C, self.Lr, self.Lc, self.inputs)):
            raise ValueError("batch fields have different lengths")
        if not (np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.C))):
            raise ValueError("returns must be finite")

    def __len__(self):
        return len(self.r)


def _lambdas(G: np.ndarray) -> np.ndarray:
    if G.shape[-1] == 1:
        return np.zeros(len(G))
    rows, inverse = np.unique(G, axis=0, return_inverse=True)
    return np.array([solve_lambda(row) for row in rows])[inverse.ravel()]


def _prefix_products(Gs, lam):
    """Running products of ``1 + lam g`` and prefix capacities (raw lambda rule)."""
    lam = lam[:, None]
    P = np.cumprod(1.0 + lam * Gs, axis=-1)
    small = np.abs(lam) < LAMBDA_ZERO
    H = np.where(small, np.cumsum(Gs, axis=-1), (P - 1.0) / np.where(small, 1.0, lam))
    return P, H


def _aggregate_and_grad(F, G, lam, dual: bool):
    """Detached-lambda aggregate of each row of ``F`` and its gradient in ``G``.

    Returns ``(values (N,), dvalues/dG (N, K))``.
    """
    N, K = F.shape
    if K == 1:
        return F[:, 0].copy(), np.zeros_like(G)
    order = np.argsort(-F, axis=-1, kind="stable")
    Fs = np.take_along_axis(F, order, axis=-1)
    Gs = np.take_along_axis(G, order, axis=-1)
    denom = 1.0 + lam[:, None] * Gs
    if not dual:
        P, H = _prefix_products(Gs, lam)
        diffs = Fs - np.concatenate([Fs[:, 1:], np.zeros((N, 1))], axis=-1)
        value = np.sum(diffs * H, axis=-1)
        # dC/dg_(j) = sum_{i >= j} diffs_i P_i / (1 + lam g_(j))
        tail = np.cumsum((diffs * P)[:, ::-1], axis=-1)[:, ::-1]
        grad_sorted = tail / denom
    else:
        # M'_i = 1 - T_i with T_i the capacity of sorted positions i+1..K (i = 0..K)
        Q, T = _prefix_products(Gs[:, ::-1], lam)
        Q = np.concatenate([Q[:, ::-1], np.ones((N, 1))], axis=-1)
        T = np.concatenate([T[:, ::-1], np.zeros((N, 1))], axis=-1)
        Mp = 1.0 - T
        value = np.sum(Fs * np.diff(Mp, axis=-1), axis=-1)
        coef = np.concatenate([-Fs[:, :1], Fs[:, :-1] - Fs[:, 1:]], axis=-1)
        # dM'_i/dg_(j) = -[j > i] Q_i / (1 + lam g_(j)) with i = 0..K-1
        head = np.cumsum(coef * Q[:, :K], axis=-1)
        grad_sorted = -head / denom
    grad = np.empty_like(grad_sorted)
    np.put_along_axis(grad, order, grad_sorted, axis=-1)
    # constant rows aggregate to themselves whatever the densities
    flat = np.all(F == F[:, :1], axis=-1)
    value = np.where(flat, F[:, 0], value)
    grad[flat] = 0.0
    return value, grad


def _loss_and_dG(batch: TransitionBatch, G, lam, gamma):
    agg_r, dr = _aggregate_and_grad(batch.Lr, G, lam, dual=False)
    agg_c, dc = _aggregate_and_grad(batch.Lc, G, lam, dual=True)
    e_r = batch.r + gamma * agg_r - batch.R
    e_c = batch.c + gamma * agg_c - batch.C
    n = len(batch)
    loss = float(np.sum(e_r ** 2 + e_c ** 2) / n)
    dG = (2.0 * gamma / n) * (e_r[:, None] * dr + e_c[:, None] * dc)
    return loss, dG


def fuzzy_loss(model: DensityModel, batch: TransitionBatch, gamma: float) -> float:
    """Mean of ``(r + gamma Vt_r - R)^2 + (c + gamma Vt_c - C)^2`` over the batch.

    ``Vt_r`` is the Choquet aggregate of the reward level values and
    ``Vt_c`` the dual aggregate of the cost level values, both under the
    model's densities for the transition's state.
    """
    G = forward(model, batch.inputs)
    return _loss_and_dG(batch, G, _lambdas(G), gamma)[0]


def surrogate_loss(model: DensityModel, batch: TransitionBatch, gamma: float, lam) -> float:
    """:func:`fuzzy_loss` with ``lam`` held at the given per-row values."""
    G = forward(model, batch.inputs)
    return _loss_and_dG(batch, G, np.broadcast_to(np.asarray(lam, dtype=float), (len(batch),)), gamma)[0]


def _backprop(model: DensityModel, inputs, dG) -> dict:
    z = raw_output(model, inputs)
    u = _softmax(z)
    dU = np.where((u > CLAMP_LO) & (u < CLAMP_HI), dG, 0.0)
    dZ = u * (dU - np.sum(dU * u, axis=-1, keepdims=True))
    if model.mode == "tabular":
        grad = np.zeros_like(model.params["logits"])
        np.add.at(grad, np.asarray(inputs, dtype=np.int64), dZ)
        return {"logits": grad}
    p = model.params
    X = np.asarray(inputs, dtype=float)
    h1, h2, _ = _network_pass(p, X)
    grads = {"W3": dZ.T @ h2, "b3": dZ.sum(axis=0)}
    d2 = (dZ @ p["W3"]) * (1.0 - h2 ** 2)
    grads.update(W2=d2.T @ h1, b2=d2.sum(axis=0))
    d1 = (d2 @ p["W2"]) * (1.0 - h1 ** 2)
    grads.update(W1=d1.T @ X, b1=d1.sum(axis=0))
    return grads


def loss_and_gradient(model: DensityModel, batch: TransitionBatch, gamma: float, lam=None):
    """Loss and its parameter gradients with ``lam`` detached.

    ``lam`` defaults to the values solved from the current densities.
    """
    G = forward(model, batch.inputs)
    lam = _lambdas(G) if lam is None else np.broadcast_to(np.asarray(lam, dtype=float), (len(batch),))
    loss, dG = _loss_and_dG(batch, G, lam, gamma)
    grads = _backprop(model, batch.inputs, dG)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient of {name} is not finite")
    return loss, grads


@dataclass
class GradientReport:
    loss_before: float
    loss_after: float
    grad_norm: float
    step: float
    halvings: int
    accepted: bool


def gradient_step(model: DensityModel, batch: TransitionBatch, gamma: float, lr: float | None = None):
    """One gradient-descent step, halving the step while the loss would rise.

    Returns ``(new_model, report)``; the input model is left unchanged.
    When no halving lowers the loss the returned model equals the input.
    """
    loss, grads = loss_and_gradient(model, batch, gamma)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    step = model.lr if lr is None else float(lr)
    for halvings in range(MAX_HALVINGS + 1):
        trial = model.copy({k: model.params[k] - step * grads[k] for k in model.params})
        new_loss = fuzzy_loss(trial, batch, gamma)
        if new_loss <= loss + 1e-12:
            return trial, GradientReport(loss, new_loss, norm, step, halvings, True)
        step *= 0.5
    return model.copy(), GradientReport(loss, loss, norm, 0.0, MAX_HALVINGS, False)


# -- checkpoints ------------------------------------------------------------


def dumps_model(model: DensityModel) -> str:
    lines = [f"mode {model.mode}", f"K {model.K}", f"lr {model.lr!r}"]
    for name in sorted(model.params):
        arr = np.atleast_1d(model.params[name])
        lines.append(f"param {name} " + " ".join(str(d) for d in arr.shape))
        lines.append(" ".join(repr(float(x)) for x in arr.ravel()))
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> DensityModel:
    lines = [ln.strip() for ln in text.splitlines()]
    header, params = {}, {}
    i = 0
    while i < len(lines):
        ln = lines[i]
        i += 1
        if not ln or ln.startswith("#"):
            continue
        key, _, rest = ln.partition(" ")
        if key in ("mode", "K", "lr"):
            header[key] = rest.strip()
        elif key == "param":
            parts = rest.split()
            if not parts:
                raise ParseError("param line needs a name", i)
            try:
                shape = tuple(int(x) for x in parts[1:])
                values = [float(x) for x in lines[i].split()] if i < len(lines) else []
            except ValueError as exc:
                raise ParseError(str(exc), i + 1) from None
            if len(values) != int(np.prod(shape)):
                raise ParseError(f"{parts[0]}: expected {int(np.prod(shape))} values, got {len(values)}", i + 1)
            params[parts[0]] = np.array(values).reshape(shape)
            i += 1
        else:
            raise ParseError(f"unknown key {key!r}", i)
    for key in ("mode", "K", "lr"):
        if key not in header:
            raise ParseError(f"missing {key!r}")
    return DensityModel(header["mode"], int(header["K"]), params, float(header["lr"]))


def save_model(model: DensityModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> DensityModel:
    return loads_model(Path(path).read_text())


# -- training loop ----------------------------------------------------------


def model_inputs(model: DensityModel, cmdp, states=None) -> np.ndarray:
    """Inputs for ``states``: indices for tabular models, scaled grid centers otherwise."""
    states = np.arange(cmdp.n_states) if states is None else np.asarray(states, dtype=np.int64)
    if model.mode == "tabular":
        return states
    centers = cmdp.geometry.centers()
    scale = np.max(np.abs(centers), axis=0)
    return centers[states] / np.where(scale > 0, scale, 1.0)


def sample_successors(p0, rows, u) -> np.ndarray:
    """Inverse-CDF draws of next states for CSR rows ``rows`` given uniforms ``u``."""
    cum = np.cumsum(p0.data)
    lo = p0.indptr[rows]
    hi = p0.indptr[rows + 1]
    base = np.where(lo > 0, cum[np.maximum(lo - 1, 0)], 0.0)
    target = base + u * (cum[hi - 1] - base)
    pos = np.clip(np.searchsorted(cum, target, side="right"), lo, hi - 1)
    return p0.indices[pos]


def rollout_transitions(cmdp, policy, episodes: int, horizon: int, seed: int, stream_id: int):
    """Simulate the nominal kernel; returns arrays (s, a, r, c, s2, R, C) in
    episode-major order.

    ``R`` and ``C`` are discounted returns from each step to the horizon.
    """
    rng = stream(seed, stream_id)
    policy = np.asarray(policy, dtype=np.int64)
    s = rng.choice(cmdp.n_states, size=episodes, p=cmdp.d0)
    u = rng.random((horizon, episodes))
    S = np.empty((horizon, episodes), dtype=np.int64)
    S2 = np.empty_like(S)
    for t in range(horizon):
        S[t] = s
        s = sample_successors(cmdp.p0, s * cmdp.n_actions + policy[s], u[t])
        S2[t] = s
    A = policy[S]
    r = cmdp.r[S, A]
    c = cmdp.c[S, A]
    R = np.zeros_like(r)
    C = np.zeros_like(c)
    accr = np.zeros(episodes)
    accc = np.zeros(episodes)
    for t in range(horizon - 1, -1, -1):
        accr = r[t] + cmdp.gamma * accr
        accc = c[t] + cmdp.gamma * accc
        R[t], C[t] = accr, accc
    out = dict(s=S, a=A, r=r, c=c, s2=S2, R=R, C=C)
    return {k: v.T.ravel() for k, v in out.items()}


@dataclass
class TrainConfig:
    alpha: float = 0.05
    iters: int = 30
    sweeps_per_iter: int = 50
    fuzzy_every: int = 5
    episodes: int = 20
    horizon: int = 50
    seed: int = 0
    settle_iters: int | None = None


@dataclass
class TrainResult:
    model: DensityModel
    policy: np.ndarray
    multiplier: float
    history: list = field(default_factory=list)
    stop_reason: str = ""


def train(cmdp, levels, model: DensityModel, config: TrainConfig = TrainConfig(), threads: int = 1,
          callback=None) -> TrainResult:
    """Primal-dual loop with learnable densities.

    Each outer iteration runs ``sweeps_per_iter`` policy-evaluation sweeps
    of the fuzzy (reward) and dual-fuzzy (cost) operators under the
    current densities, taking one density gradient step after every
    ``fuzzy_every`` sweeps on transitions simulated from the current
    policy.  It then records ``(iter, J_r, J_c, multiplier, fuzzy_loss)``,
    updates the multiplier and re-derives the greedy policy.  Stopping
    follows :func:`fuzzydp.lagrangian.primal_dual_solve`.
    """
    from .bellman import Operator, greedy_actions
    from .lagrangian import STATIONARY_TOL, multiplier_update

    cfg = config
    if cfg.iters < 1 or cfg.sweeps_per_iter < 1 or cfg.fuzzy_every < 1:
        raise ValueError("iters, sweeps_per_iter and fuzzy_every must be >= 1")
    settle = cfg.iters if cfg.settle_iters is None else cfg.settle_iters
    inputs = model_inputs(model, cmdp)
    base = Operator("fuzzy", levels, measure_field(model, inputs), threads=threads)
    indices = base.indices(cmdp)
    S = cmdp.n_states
    V_r = np.zeros(S)
    V_c = np.zeros(S)
    mult = 0.0
    history = []
    policy = np.zeros(S, dtype=np.int64)
    loss = math.nan
    k = 0
    while True:
        field_ = measure_field(model, inputs)
        rop = base.with_(measure=field_)
        cop = base.with_(kind="dual-fuzzy", signal="cost", greedy="min", measure=field_)
        policy = greedy_actions(rop.q_values(cmdp, V_r) - mult * cop.q_values(cmdp, V_c))
        for sweep in range(1, cfg.sweeps_per_iter + 1):
            V_r = rop.backup(cmdp, V_r, policy)
            V_c = cop.backup(cmdp, V_c, policy)
            if not (np.all(np.isfinite(V_r)) and np.all(np.isfinite(V_c))):
                raise NonFiniteGradient(f"value estimates diverged at iteration {k}")
            if sweep % cfg.fuzzy_every == 0:
                tr = rollout_transitions(cmdp, policy, cfg.episodes, cfg.horizon, cfg.seed,
                                         (k << 20) + sweep)
                batch = TransitionBatch(
                    model_inputs(model, cmdp, tr["s"]), tr["r"], tr["c"],
                    level_value_table(V_r, indices)[tr["s2"]],
                    level_value_table(V_c, indices)[tr["s2"]], tr["R"], tr["C"])
                model, report = gradient_step(model, batch, cmdp.gamma)
                loss = report.loss_after
                field_ = measure_field(model, inputs)
                rop = rop.with_(measure=field_)
                cop = cop.with_(measure=field_)
        J_r = float(cmdp.d0 @ V_r)
        J_c = float(cmdp.d0 @ V_c)
        history.append((k, J_r, J_c, mult, loss))
        if callback is not None:
            callback(k, J_r, J_c, mult, loss)
        feasible = J_c <= cmdp.budget
        new = multiplier_update(mult, cfg.alpha, J_c, cmdp.budget)
        k += 1
        if feasible and abs(new - mult) < STATIONARY_TOL:
            reason = "feasible-stationary"
            break
        if k >= cfg.iters and (feasible or k >= cfg.iters + settle):
            reason = "budget-feasible" if feasible else "budget-infeasible"
            break
        mult = new
    return TrainResult(model, policy, mult, history, reason)
