"""Numerical checks of threshold structure on solved truncated MDPs.

Each checker scans every qualifying (state, paired state) combination and
returns a :class:`ViolationReport` with the number of pairs examined, so an
empty witness list can be audited against coverage.

Ties: a policy records every action within the value slack of the best one.
A pair that fails with the chosen actions but passes with some tied optimal
action, or whose premise state is itself a tie, is counted in
``tie_excluded`` instead of being reported as a violation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelModel
from .errors import ValidationError
from .mdp import Policy, StateSpace

MAX_WITNESSES = 1000


@dataclass(frozen=True)
class Witness:
    state: tuple
    paired: tuple
    detail: str


@dataclass
class ViolationReport:
    kind: str
    checked_pairs: int = 0
    tie_excluded: int = 0
    skipped: int = 0
    n_violations: int = 0
    asymptotic: bool = False
    witnesses: list = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return self.n_violations == 0

    def add(self, witness: Witness) -> None:
        self.n_violations += 1
        if len(self.witnesses) < MAX_WITNESSES:
            self.witnesses.append(witness)

    def summary(self) -> str:
        status = "PASS" if self.holds else "FAIL"
        tag = " (asymptotic)" if self.asymptotic else ""
        s = (f"{self.kind}{tag}: {status}, {self.n_violations} violations over "
             f"{self.checked_pairs} pairs, {self.tie_excluded} tie-excluded")
        if self.skipped:
            s += f", {self.skipped} skipped"
        return s

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "state", "paired_state", "detail"])
            for wit in self.witnesses:
                w.writerow([self.kind, " ".join(map(str, wit.state)),
                            " ".join(map(str, wit.paired)), wit.detail])


def _key(space: StateSpace, s: int) -> tuple:
    st = space.decode(int(s))
    return tuple(st.tau.tolist()) + tuple(st.H.ravel().tolist())


def _strides(space: StateSpace):
    tau_stride = space.tau_max ** np.arange(space.N - 1, -1, -1) * space.n_H
    h_stride = space.levels ** np.arange(space.N * space.M - 1, -1, -1)
    return tau_stride.astype(np.int64), h_stride.astype(np.int64)


def _coords(space: StateSpace):
    """Per-state AoI vectors ``(S, N)`` and channel matrices ``(S, N, M)``."""
    tau = np.repeat(space.tau_grid, space.n_H, axis=0)
    H = np.tile(space.H_grid, (space.n_tau, 1, 1))
    return tau, H


def check_channel_threshold(policy: Policy, space: StateSpace,
                            model: ChannelModel | None = None) -> ViolationReport:
    """If sensor ``n`` holds channel ``m`` at ``s``, it still does when only ``h[n, m]`` improves."""
    rep = ViolationReport("channel_threshold")
    _, h_stride = _strides(space)
    _, H = _coords(space)
    vecs = policy.vectors
    alist = policy.action_list
    idx = np.arange(space.size)
    for n in range(space.N):
        for m in range(1, space.M + 1):
            k = n * space.M + (m - 1)
            for d in range(1, space.levels):
                mask = (vecs[:, n] == m) & (H[:, n, m - 1] + d <= space.levels)
                src = idx[mask]
                dst = src + d * h_stride[k]
                rep.checked_pairs += len(src)
                bad = vecs[dst, n] != m
                for s, s2 in zip(src[bad], dst[bad]):
                    if np.any(policy.optimal[s2] & (alist[:, n] == m)) or policy.tied[s]:
                        rep.tie_excluded += 1
                        continue
                    rep.add(Witness(_key(space, s), _key(space, s2),
                                    f"sensor {n + 1} loses channel {m} when its level rises by {d}; "
                                    f"actions {vecs[s].tolist()} -> {vecs[s2].tolist()}"))
    return rep


def check_aoi_threshold(policy: Policy, space: StateSpace, model: ChannelModel | None = None,
                        large_tau_floor: int | None = None) -> ViolationReport:
    """If sensor ``n`` is scheduled on ``m`` at ``s``, raising only ``tau_n`` keeps it on
    ``m`` or on a channel with a strictly higher level.

    For ``N > 2`` the scan is restricted to ``tau'_n >= large_tau_floor``
    (default ``tau_max - 4``) and the report is marked asymptotic.  An explicit
    ``large_tau_floor`` applies the restriction for any ``N``.
    """
    T = space.tau_max
    if large_tau_floor is None and space.N > 2:
        large_tau_floor = max(1, T - 4)
    rep = ViolationReport("aoi_threshold", asymptotic=large_tau_floor is not None)
    floor = large_tau_floor or 1
    tau_stride, _ = _strides(space)
    tau, H = _coords(space)
    vecs = policy.vectors
    alist = policy.action_list
    idx = np.arange(space.size)
    rows = np.arange(space.size)
    for n in range(space.N):
        sched = vecs[:, n] > 0
        h_ref = np.where(sched, H[rows, n, np.maximum(vecs[:, n], 1) - 1], 0)
        for d in range(1, T):
            mask = sched & (tau[:, n] + d <= T) & (tau[:, n] + d >= floor)
            src = idx[mask]
            dst = src + d * tau_stride[n]
            rep.checked_pairs += len(src)
            a_old = vecs[src, n]
            a_new = vecs[dst, n]
            h_new = np.where(a_new > 0, H[dst, n, np.maximum(a_new, 1) - 1], 0)
            ok = (a_new == a_old) | ((a_new > 0) & (h_new > h_ref[src]))
            for s, s2 in zip(src[~ok], dst[~ok]):
                m = vecs[s, n]
                cand = alist[policy.optimal[s2], n]
                hn = H[s2, n]
                if any(c == m or (c > 0 and hn[c - 1] > hn[m - 1]) for c in cand) or policy.tied[s]:
                    rep.tie_excluded += 1
                    continue
                rep.add(Witness(_key(space, s), _key(space, s2),
                                f"sensor {n + 1} on channel {m} at AoI {tau[s, n]} but action "
                                f"{vecs[s2].tolist()} at AoI {tau[s2, n]}"))
    return rep


def check_monotonicity(V, space: StateSpace, slack: float = 0.0) -> ViolationReport:
    """The value never increases when a single AoI component increases."""
    rep = ViolationReport("monotonicity")
    v = np.asarray(getattr(V, "v", V))
    tau_stride, _ = _strides(space)
    tau, _ = _coords(space)
    idx = np.arange(space.size)
    for n in range(space.N):
        src = idx[tau[:, n] < space.tau_max]
        dst = src + tau_stride[n]
        rep.checked_pairs += len(src)
        bad = v[dst] > v[src] + slack
        for s, s2 in zip(src[bad], dst[bad]):
            rep.add(Witness(_key(space, s), _key(space, s2),
                            f"V rises from {v[s]:.9g} to {v[s2]:.9g}"))
    return rep


def _pair_views(v: np.ndarray, space: StateSpace, i: int, j: int):
    """Value array with AoI axes ``i, j`` first: shape ``(T, T, rest, n_H)``."""
    T, N = space.tau_max, space.N
    X = v.reshape((T,) * N + (space.n_H,))
    X = np.moveaxis(X, (i, j), (0, 1))
    return X.reshape(T, T, -1, space.n_H)


def _pair_scan(V, space: StateSpace, model: ChannelModel | None, slack: float,
               asymptotic_gap: int | None, kind: str) -> ViolationReport:
    if space.M != 1:
        raise ValidationError(f"{kind} check is defined for single-channel systems only (M=1)")
    v = np.asarray(getattr(V, "v", V))
    T, N = space.tau_max, space.N
    if asymptotic_gap is None and N > 2:
        asymptotic_gap = max(1, T // 2)
    rep = ViolationReport(kind, asymptotic=asymptotic_gap is not None)
    gap = asymptotic_gap or 0
    if kind == "prob_supermodularity":
        if model is None:
            raise ValidationError("channel model required for the success probabilities")
        p = model.success[space.H_grid[:, :, 0] - 1]  # (n_H, N)
    tj, tj2 = np.triu_indices(T)  # tj <= tj2
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            X = _pair_views(v, space, i, j)
            for ti in range(T):
                for ti2 in range(ti + 1):
                    if ti - ti2 < gap:
                        continue
                    Vs = X[ti, tj]        # (P, rest, n_H)
                    Vmeet = X[ti2, tj]
                    Vjoin = X[ti, tj2]
                    Vo = X[ti2, tj2]
                    if kind == "prob_supermodularity":
                        pi, pj = p[:, i], p[:, j]
                        # shortfall > 0 means the inequality fails
                        shortfall = (pj * Vs + (pj - pi) * Vo) - (pj * Vmeet + (pj - pi) * Vjoin)
                    else:
                        shortfall = (Vjoin + Vmeet) - (Vs + Vo)
                    bad = shortfall > slack
                    rep.checked_pairs += bad.size
                    if not bad.any():
                        continue
                    for q, r, h in zip(*np.nonzero(bad)):
                        tau_s = _rest_tau(space, i, j, ti, tj[q], r)
                        tau_o = _rest_tau(space, i, j, ti2, tj2[q], r)
                        H = space.H_grid[h]
                        rep.add(Witness(tuple(tau_s) + tuple(H.ravel()),
                                        tuple(tau_o) + tuple(H.ravel()),
                                        f"pair (i={i + 1}, j={j + 1}) fails by "
                                        f"{shortfall[q, r, h]:.3e}"))
    return rep


def _rest_tau(space: StateSpace, i: int, j: int, ti: int, tj: int, r: int) -> list:
    others = [n for n in range(space.N) if n not in (i, j)]
    tau = [0] * space.N
    tau[i], tau[j] = ti + 1, int(tj) + 1
    if others:
        sub = np.unravel_index(int(r), (space.tau_max,) * len(others))
        for n, t in zip(others, sub):
            tau[n] = int(t) + 1
    return tau


def check_prob_supermodularity(V, space: StateSpace, model: ChannelModel, slack: float = 0.0,
                               asymptotic_gap: int | None = None) -> ViolationReport:
    """Probability-weighted meet/join inequality on the value function (single channel).

    For ``s = (tau, H)`` and ``s° = (tau°, H)`` with ``tau°_i <= tau_i``,
    ``tau°_j >= tau_j`` and all other components equal, checks
    ``p_j V(s ^ s°) + (p_j - p_i) V(s v s°) >= p_j V(s) + (p_j - p_i) V(s°)``
    where ``p_n`` is the success rate of sensor ``n`` at its current level.
    For ``N > 2`` only pairs with ``tau_i - tau°_i >= asymptotic_gap``
    (default ``tau_max // 2``) are scanned.
    """
    return _pair_scan(V, space, model, slack, asymptotic_gap, "prob_supermodularity")


def check_submodularity(V, space: StateSpace, slack: float = 0.0,
                        asymptotic_gap: int | None = None) -> ViolationReport:
    """Diagnostic: ``V(s v s°) + V(s ^ s°) <= V(s) + V(s°)`` over the same pairs."""
    return _pair_scan(V, space, None, slack, asymptotic_gap, "submodularity")


def check_proposition1(policy: Policy, space: StateSpace,
                       model: ChannelModel | None = None) -> ViolationReport:
    """Channel ``m`` of sensor ``i`` is not handed to a worse-channel idle sensor ``j``
    when only ``tau_i`` grows and every other channel keeps its sensor.

    Pairs ``(s, s')`` whose other assignments change are skipped and counted.
    """
    rep = ViolationReport("proposition1")
    T = space.tau_max
    tau_stride, _ = _strides(space)
    tau, H = _coords(space)
    vecs = policy.vectors
    alist = policy.action_list
    idx = np.arange(space.size)
    for i in range(space.N):
        others = [n for n in range(space.N) if n != i]
        for d in range(1, T):
            mask = (vecs[:, i] > 0) & (tau[:, i] + d <= T)
            src = idx[mask]
            dst = src + d * tau_stride[i]
            a, a2 = vecs[src], vecs[dst]
            busy = a[:, others] != 0
            same = np.all(~busy | (a2[:, others] == a[:, others]), axis=1)
            rep.skipped += int((~same).sum())
            for j in others:
                m = a[:, i]
                hi = H[src, i, m - 1]
                hj = H[src, j, m - 1]
                pre = same & (a[:, j] == 0) & (hj <= hi)
                rep.checked_pairs += int(pre.sum())
                bad = pre & (a2[:, j] == m)
                for k in np.nonzero(bad)[0]:
                    s, s2, mk = src[k], dst[k], m[k]
                    opt = alist[policy.optimal[s2]]
                    keep = np.all((a[k, others] == 0) | (opt[:, others] == a[k, others]), axis=1)
                    if np.any(keep & (opt[:, j] != mk)) or policy.tied[s]:
                        rep.tie_excluded += 1
                        continue
                    rep.add(Witness(_key(space, s), _key(space, s2),
                                    f"channel {mk} moves from sensor {i + 1} to sensor {j + 1} "
                                    f"(h_i={hi[k]}, h_j={hj[k]})"))
    return rep


def run_all_checks(value, policy: Policy, space: StateSpace, model: ChannelModel) -> list:
    """Every check applicable to the instance's dimensions."""
    slack = getattr(value, "slack", 0.0)
    reports = [check_monotonicity(value, space, slack),
               check_channel_threshold(policy, space, model)]
    if space.M == 1:
        reports.append(check_aoi_threshold(policy, space, model))
        if space.N >= 2:
            reports.append(check_prob_supermodularity(value, space, model, slack))
    else:
        reports.append(check_proposition1(policy, space, model))
    return reports
