"""Vectorized log-likelihood with analytic gradients.

A :class:`CompiledLikelihood` turns a cohort into flat tables once:

* *pieces* -- maximal runs of days within a subject's integration window on
  which the grid interval, the variant proportions and the covariates are all
  constant. Cumulative hazards are sums over pieces.
* *points* -- single days where a hazard value itself enters the likelihood
  (event days, interval-censoring days for known variants, trapezoid
  endpoints).
* *segments* -- distinct covariate rows; the linear predictor is evaluated
  once per segment and variant.

Per evaluation only ``exp`` of the (sites, K) log-baseline and the
(segments, V) linear predictor is needed; the kernels in
:mod:`ctsurv.kernels` do the rest.
"""

from __future__ import annotations

import numpy as np

from .kernels import DEFAULT, get_backend
from .data_model import EVENT, INTERVAL_CENSORED, RIGHT_CENSORED, StudyData, ValidationError
from .hazard import HazardModel, ModelParameters

_INT = np.int64


class _KernelUser:
    """Pickles the kernel module by name so tables can cross process boundaries."""

    def __getstate__(self):
        state = self.__dict__.copy()
        state["K"] = self.K.NAME
        return state

    def __setstate__(self, state):
        state["K"] = get_backend(state["K"])
        self.__dict__.update(state)


def _eval_path(path, days: np.ndarray) -> np.ndarray:
    if path.is_constant:
        return np.full(len(days), path.values[0])
    j = np.searchsorted(path.boundaries, days, side="left")
    return path.values[np.maximum(j, 1) - 1]


def _group_logsumexp(x: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """logsumexp over contiguous groups beginning at ``starts``."""
    if len(x) == 0:
        return np.zeros(0)
    m = np.maximum.reduceat(x, starts)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    lengths = np.diff(np.append(starts, len(x)))
    s = np.add.reduceat(np.exp(x - np.repeat(m_safe, lengths)), starts)
    with np.errstate(divide="ignore"):
        return np.log(s) + m_safe


def _log1m_exp(a: np.ndarray) -> np.ndarray:
    """log(1 - exp(-a)) elementwise, -inf where a <= 0."""
    a = np.asarray(a, dtype=float)
    out = np.full(a.shape, -np.inf)
    small = (a > 0) & (a < 0.693)
    big = a >= 0.693
    out[small] = np.log(-np.expm1(-a[small]))
    out[big] = np.log1p(-np.exp(-a[big]))
    return out


def _log_phi(b: np.ndarray) -> np.ndarray:
    """log((1 - exp(-b)) / b), the mean survival over a unit piece."""
    return np.log(-np.expm1(-b)) - np.log(b)


def _dlog_phi(b: np.ndarray) -> np.ndarray:
    small = b < 1e-4
    out = np.empty_like(b)
    bs = b[small]
    out[small] = -0.5 + bs / 12.0
    bb = b[~small]
    out[~small] = 1.0 / np.expm1(bb) - 1.0 / bb
    return out


class _Tables:
    """Collects pieces, points and covariate segments for a set of subjects."""

    def __init__(self, hm: HazardModel, data: StudyData):
        self.hm = hm
        self.data = data
        grid = hm.grid
        self.start = grid.start_day
        self.day_k = grid.day_intervals() - 1
        props = hm.mix.props
        change = np.any(props[:, 1:] != props[:, :-1], axis=2)
        self.pi_run = np.concatenate([np.zeros((props.shape[0], 1), dtype=_INT),
                                      np.cumsum(change, axis=1)], axis=1)
        self.props = props
        self.V = props.shape[2]
        self.p = data.n_covariates
        self._seg_index: dict[tuple, int] = {}
        self.seg_rows: list[tuple] = []
        self.pieces: list[tuple[np.ndarray, ...]] = []
        self.points: list[tuple[int, int, int, int]] = []  # site, day, seg, subject
        self.n_acc = 0

    def _check_window(self, a: int, b: int) -> None:
        g = self.hm.grid
        if not (g.contains(a) and g.contains(b)):
            raise ValidationError(f"window ({a}, {b}] outside grid")

    def _segments(self, i: int, days: np.ndarray) -> np.ndarray:
        s = self.data.subjects[i]
        cols = [_eval_path(s.x_path, days)] + [_eval_path(z, days) for z in s.z_paths]
        rows = np.column_stack(cols)
        if len(rows) and (rows == rows[0]).all():
            return np.full(len(days), self._segment(tuple(rows[0])), dtype=_INT)
        return np.array([self._segment(tuple(r)) for r in rows], dtype=_INT)

    def _segment(self, row: tuple) -> int:
        g = self._seg_index.get(row)
        if g is None:
            g = len(self.seg_rows)
            self._seg_index[row] = g
            self.seg_rows.append(row)
        return g

    def add_window(self, i: int, a: int, b: int) -> int:
        """Register (a, b] for subject ``i``; returns the accumulator id."""
        acc = self.n_acc
        self.n_acc += 1
        if b == a:
            return acc
        self._check_window(a, b)
        site = self.data.subjects[i].site
        days = np.arange(a + 1, b + 1)
        idx = days - self.start
        k = self.day_k[idx]
        run = self.pi_run[site, idx]
        seg = self._segments(i, days)
        brk = np.ones(len(days), dtype=bool)
        brk[1:] = (k[1:] != k[:-1]) | (run[1:] != run[:-1]) | (seg[1:] != seg[:-1])
        first = np.flatnonzero(brk)
        length = np.diff(np.append(first, len(days))).astype(float)
        self.pieces.append((np.full(len(first), site, dtype=_INT), k[first], seg[first],
                            length, self.props[site, idx[first]],
                            np.full(len(first), acc, dtype=_INT)))
        return acc

    def add_point(self, i: int, day: int) -> int:
        if not self.hm.grid.contains(day):
            raise ValidationError(f"day {day} outside grid")
        seg = int(self._segments(i, np.array([day]))[0])
        self.points.append((self.data.subjects[i].site, day, seg, i))
        return len(self.points) - 1

    def finalize(self) -> None:
        V = self.V
        if self.pieces:
            cols = list(zip(*self.pieces))
            self.pc_site = np.concatenate(cols[0])
            self.pc_k = np.ascontiguousarray(np.concatenate(cols[1]), dtype=_INT)
            self.pc_seg = np.concatenate(cols[2])
            self.pc_len = np.concatenate(cols[3])
            self.pc_pi = np.ascontiguousarray(np.concatenate(cols[4]))
            self.pc_acc = np.concatenate(cols[5])
        else:
            self.pc_site = self.pc_k = self.pc_seg = self.pc_acc = np.zeros(0, dtype=_INT)
            self.pc_len = np.zeros(0)
            self.pc_pi = np.zeros((0, V))
        pts = np.array(self.points, dtype=_INT).reshape(-1, 4)
        self.pt_site = np.ascontiguousarray(pts[:, 0])
        days = pts[:, 1]
        self.pt_k = np.ascontiguousarray(self.day_k[days - self.start], dtype=_INT)
        self.pt_seg = np.ascontiguousarray(pts[:, 2])
        self.pt_pi = np.ascontiguousarray(self.props[pts[:, 0], days - self.start].reshape(-1, V))
        rows = np.array(self.seg_rows, dtype=float).reshape(-1, 1 + self.p)
        self.seg_x = rows[:, 0].copy()
        self.seg_z = np.ascontiguousarray(rows[:, 1:])


class CompiledLikelihood(_KernelUser):
    """Log-likelihood of a cohort under a :class:`HazardModel`.

    ``kernels`` selects the kernel module (defaults to the import-time
    backend); both backends give identical results to rounding.
    """

    def __init__(self, hm: HazardModel, data: StudyData, kernels=None):
        self.hm = hm
        self.data = data
        self.K = kernels or DEFAULT
        self.trapezoid = hm.scheme == "daily_trapezoid"
        known = hm.variant_knowledge == "known"
        if data.n_variants != hm.n_variants:
            raise ValidationError("data and variant mix disagree on the number of variants")
        t = _Tables(hm, data)
        n = len(data)
        self.n = n
        acc_a = np.empty(n, dtype=_INT)
        acc_b = np.full(n, -1, dtype=_INT)
        evt_q = np.full(n, -1, dtype=_INT)
        acc_pa, acc_pb = [], []  # trapezoid endpoint points per accumulator
        status = np.empty(n, dtype=_INT)
        variant = np.full(n, -1, dtype=_INT)
        ick_subject, ick_q, ick_w = [], [], []

        def window(i, a, b):
            acc = t.add_window(i, a, b)
            if self.trapezoid:
                acc_pa.append(t.add_point(i, a))
                acc_pb.append(t.add_point(i, b))
            return acc

        for i, s in enumerate(data.subjects):
            t0 = s.enroll_day
            if s.status in (EVENT, INTERVAL_CENSORED) and known and s.variant is None:
                raise ValidationError(f"subject {s.id}: known-variant mode needs a variant")
            if s.variant is not None:
                variant[i] = s.variant
            if s.status == RIGHT_CENSORED:
                status[i] = 0
                acc_a[i] = window(i, t0, s.time_lower)
            elif s.status == EVENT:
                status[i] = 1
                acc_a[i] = window(i, t0, s.time_lower)
                evt_q[i] = t.add_point(i, s.time_lower)
            else:
                L, R = s.time_lower, s.time_upper
                acc_a[i] = window(i, t0, L)
                if known:
                    status[i] = 3
                    lo = L if self.trapezoid else L + 1
                    for d in range(lo, R + 1):
                        ick_subject.append(i)
                        ick_q.append(t.add_point(i, d))
                        ick_w.append(0.5 if self.trapezoid and d in (L, R) else 1.0)
                else:
                    status[i] = 2
                    acc_b[i] = window(i, L, R)
        t.finalize()
        self.t = t
        self.acc_a, self.acc_b, self.evt_q = acc_a, acc_b, evt_q
        self.acc_pa = np.array(acc_pa, dtype=_INT)
        self.acc_pb = np.array(acc_pb, dtype=_INT)
        self.status, self.variant = status, variant
        self.ek = np.flatnonzero((status == 1) & known)
        self.eu = np.flatnonzero((status == 1) & (not known))
        self.icu = np.flatnonzero(status == 2)
        self.ick = np.flatnonzero(status == 3)
        self.ick_subject = np.array(ick_subject, dtype=_INT)
        self.ick_q = np.array(ick_q, dtype=_INT)
        self.ick_w = np.array(ick_w)
        if len(self.ick_subject):
            self.ick_starts = np.flatnonzero(np.r_[True, self.ick_subject[1:] != self.ick_subject[:-1]])
        else:
            self.ick_starts = np.zeros(0, dtype=_INT)
        self.ick_v = variant[self.ick_subject] if len(self.ick_subject) else np.zeros(0, dtype=_INT)

    # -- parameter maps ------------------------------------------------------

    @property
    def n_segments(self) -> int:
        return len(self.t.seg_x)

    @property
    def seg_x(self) -> np.ndarray:
        return self.t.seg_x

    @property
    def seg_z(self) -> np.ndarray:
        return self.t.seg_z

    def indicator(self, tau: float) -> np.ndarray:
        return self.t.seg_x > tau

    def log_baseline(self, params: ModelParameters) -> np.ndarray:
        return params.log_h_ref[:, None] + params.log_r

    def linear_predictor(self, params: ModelParameters) -> np.ndarray:
        t = self.t
        eta = np.broadcast_to(params.alpha, (len(t.seg_x), self.hm.n_variants)).copy()
        if self.hm.threshold.mode == "none":
            eta += t.seg_x[:, None] * params.gamma
        else:
            ind = self.indicator(self.hm.tau(params))
            eta += ind[:, None] * (t.seg_x[:, None] * params.gamma + params.gamma_T)
        if t.seg_z.shape[1]:
            eta += (t.seg_z @ params.beta)[:, None]
        return eta

    # -- evaluation ------------------------------------------------------------

    def subject_terms(self, lh: np.ndarray, eta: np.ndarray, grad: bool = False):
        """Per-subject log-likelihood (id order); optionally d/d(lh, eta)."""
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            return self._subject_terms(lh, eta, grad)

    def _subject_terms(self, lh, eta, grad):
        K, t = self.K, self.t
        elh = np.exp(lh)
        eeta = np.exp(eta)
        c, H = K.accumulate_pieces(elh, eeta, t.pc_site, t.pc_k, t.pc_seg, t.pc_len, t.pc_pi,
                                   t.pc_acc, t.n_acc)
        hv = K.point_hazards(elh, eeta, t.pt_site, t.pt_k, t.pt_seg, t.pt_pi)
        hsum = hv.sum(axis=1)
        H_exact = H
        if self.trapezoid:
            H = H + 0.5 * (hsum[self.acc_pa] - hsum[self.acc_pb])

        ll = -H[self.acc_a]
        gH = np.zeros(t.n_acc)
        wq = np.zeros_like(hv)  # d ll / d log hv
        gH[self.acc_a] -= 1.0

        if len(self.ek):
            q, v = self.evt_q[self.ek], self.variant[self.ek]
            ll[self.ek] += np.log(hv[q, v])
            wq[q, v] += 1.0
        if len(self.eu):
            q = self.evt_q[self.eu]
            ll[self.eu] += np.log(hsum[q])
            wq[q] += hv[q] / hsum[q, None]
        if len(self.icu):
            dH = H[self.acc_b[self.icu]]
            ll[self.icu] += _log1m_exp(dH)
            gH[self.acc_b[self.icu]] += 1.0 / np.expm1(dH)
        if len(self.ick):
            if self.trapezoid:
                ll[self.ick] += self._interval_known_trapezoid(hv, hsum, H_exact, H)
            else:
                ll[self.ick] += self._interval_known_exact(hv, hsum, wq if grad else None)
        if not grad:
            return ll
        if self.trapezoid:
            raise NotImplementedError("analytic gradients need the exact_piecewise scheme")
        g_lh = np.zeros_like(lh)
        g_eta = np.zeros_like(eta)
        K.backprop_pieces(c, t.pc_acc, gH, t.pc_site, t.pc_k, t.pc_seg, g_lh, g_eta)
        K.backprop_points(np.ascontiguousarray(wq), t.pt_site, t.pt_k, t.pt_seg, g_lh, g_eta)
        return ll, g_lh, g_eta

    def _interval_known_exact(self, hv, hsum, wq):
        q, v, starts = self.ick_q, self.ick_v, self.ick_starts
        a = hv[q, v]
        b = hsum[q]
        lengths = np.diff(np.append(starts, len(q)))
        incl = np.cumsum(b)
        offset = np.repeat(incl[starts] - b[starts], lengths)
        B = incl - b - offset  # exclusive within-subject cumulative hazard
        with np.errstate(divide="ignore"):
            logT = np.log(a) + _log_phi(b) - B
        logI = _group_logsumexp(logT, starts)
        if wq is not None:
            w = np.exp(logT - np.repeat(logI, lengths))
            w = np.where(np.isfinite(w), w, 0.0)
            cw = np.cumsum(w)
            after = np.repeat(cw[starts] - w[starts], lengths) + 1.0 - cw  # sum_{j>m} w_j
            db = -after + w * _dlog_phi(b)
            # d/dlog hv: through b for every variant, plus w on the infecting one
            wq[q] += db[:, None] * hv[q]
            wq[q, v] += w
        return logI

    def _interval_known_trapezoid(self, hv, hsum, H_exact, H_trap):
        q, v, starts, wts = self.ick_q, self.ick_v, self.ick_starts, self.ick_w
        subj = self.ick_subject
        lengths = np.diff(np.append(starts, len(q)))
        b = hsum[q]
        # cumulative over (L, d]; the first node is d = L itself
        first_mask = np.zeros(len(q), dtype=bool)
        first_mask[starts] = True
        inc = np.where(first_mask, 0.0, b)
        cs = np.cumsum(inc)
        cum = cs - np.repeat(cs[starts], lengths)
        acc = self.acc_a[subj]
        h0 = hsum[self.acc_pa[acc]]
        node_H = H_exact[acc] + cum + 0.5 * (h0 - b)
        with np.errstate(divide="ignore"):
            logs = np.log(wts * hv[q, v]) - node_H
        total = _group_logsumexp(logs, starts)
        # undo the generic -H_trap(t0, L) applied to every subject
        return total + H_trap[self.acc_a[subj[starts]]]

    def log_likelihood(self, params: ModelParameters) -> float:
        ll = self.subject_terms(self.log_baseline(params), self.linear_predictor(params))
        return float(np.sum(ll))

    def log_likelihood_grad(self, params: ModelParameters):
        """Return (value, d/d log-baseline (S, K), d/d linear predictor (G, V))."""
        ll, g_lh, g_eta = self.subject_terms(self.log_baseline(params),
                                             self.linear_predictor(params), grad=True)
        return float(np.sum(ll)), g_lh, g_eta


class SurvivorTable(_KernelUser):
    """Survivor probabilities S_i(t0_i + d) at fixed follow-up offsets."""

    def __init__(self, hm: HazardModel, data: StudyData, offsets, kernels=None):
        self.hm = hm
        self.K = kernels or DEFAULT
        self.offsets = [int(d) for d in offsets]
        t = _Tables(hm, data)
        self.trapezoid = hm.scheme == "daily_trapezoid"
        acc = np.empty((len(data), len(self.offsets)), dtype=_INT)
        pa, pb = [], []
        for i, s in enumerate(data.subjects):
            for j, d in enumerate(self.offsets):
                stop = s.enroll_day + d
                if not hm.grid.contains(stop):
                    raise ValidationError(
                        f"subject {s.id}: day {d} of follow-up falls outside the calendar grid")
                acc[i, j] = t.add_window(i, s.enroll_day, stop)
                if self.trapezoid:
                    pa.append(t.add_point(i, s.enroll_day))
                    pb.append(t.add_point(i, stop))
        t.finalize()
        self.t, self.acc = t, acc
        self.pa, self.pb = np.array(pa, dtype=_INT), np.array(pb, dtype=_INT)
        self._lik = CompiledLikelihood.__new__(CompiledLikelihood)
        self._lik.t, self._lik.hm = t, hm

    def survivor(self, params: ModelParameters) -> np.ndarray:
        """Array (subjects, offsets) of survivor probabilities."""
        lh = CompiledLikelihood.log_baseline(self._lik, params)
        eta = CompiledLikelihood.linear_predictor(self._lik, params)
        t = self.t
        elh, eeta = np.exp(lh), np.exp(eta)
        _, H = self.K.accumulate_pieces(elh, eeta, t.pc_site, t.pc_k, t.pc_seg, t.pc_len,
                                        t.pc_pi, t.pc_acc, t.n_acc)
        if self.trapezoid:
            hsum = self.K.point_hazards(elh, eeta, t.pt_site, t.pt_k, t.pt_seg, t.pt_pi).sum(1)
            H = H + 0.5 * (hsum[self.pa] - hsum[self.pb])
        return np.exp(-H[self.acc])

