"""Channel separation estimate (CSE), its cross-talk oracle, and per-item evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from rtsep.errors import DomainError, FixtureError, SizeError
from rtsep.objectives import (
    DB_CLAMP,
    LossConfig,
    ccmse,
    clamp_db,
    is_clamped,
    level_normalized_pair,
    neg_si_sdr,
    si_sdr,
    soft_threshold,
    upit_assign,
)

ORTHO_TOL = 1e-10
REPORT_VERSION = 1


def _neg_db(ratio: float) -> float:
    if ratio <= 0.0:
        return DB_CLAMP
    return clamp_db(-20.0 * np.log10(ratio))


def cse(est_a, est_b) -> float:
    """-20 log10(|a.b| / (|a|^2 + |b|^2)) in dB; +300 when the inner product is exactly 0.

    Not invariant to scaling one branch on its own, because the denominator adds
    squared norms; see :func:`cse_normalized` for the scale-free diagnostic.
    """
    a = np.asarray(est_a, dtype=np.float64)
    b = np.asarray(est_b, dtype=np.float64)
    if a.shape != b.shape:
        raise SizeError(f"estimate lengths differ: {a.shape} vs {b.shape}")
    energy = float(np.dot(a, a) + np.dot(b, b))
    if energy == 0.0:
        raise DomainError("CSE is undefined when both signals are zero")
    return _neg_db(abs(float(np.dot(a, b))) / energy)


def cse_normalized(est_a, est_b) -> float:
    """Diagnostic variant (not the published metric): normalized by |a| |b| instead."""
    a = np.asarray(est_a, dtype=np.float64)
    b = np.asarray(est_b, dtype=np.float64)
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        raise DomainError("normalized CSE is undefined when either signal is zero")
    return _neg_db(abs(float(np.dot(a, b))) / norm)


def orthogonalize(signals) -> np.ndarray:
    """Gram-Schmidt a stack of signals ``(M, L)`` while keeping each row's original norm."""
    x = np.asarray(signals, dtype=np.float64)
    q = x.copy()
    # two sweeps of modified Gram-Schmidt push the residual correlation to round-off level
    for _ in range(2):
        for i in range(len(q)):
            for j in range(i):
                q[i] -= np.dot(q[i], q[j]) / np.dot(q[j], q[j]) * q[j]
    q2 = q / np.linalg.norm(q, axis=1)[:, None]
    return q2 * np.linalg.norm(x, axis=1)[:, None]


@dataclass
class CrossTalkModel:
    """Estimates built as ``est_a = s_a + alpha_a s_b + beta_a noise`` (and symmetrically for b)."""

    source_a: np.ndarray
    source_b: np.ndarray
    alpha_a: float
    alpha_b: float
    noise: np.ndarray | None = None
    beta_a: float = 0.0
    beta_b: float = 0.0

    def __post_init__(self):
        self.source_a = np.asarray(self.source_a, dtype=np.float64)
        self.source_b = np.asarray(self.source_b, dtype=np.float64)
        if self.noise is None:
            self.noise = np.zeros_like(self.source_a)
        self.noise = np.asarray(self.noise, dtype=np.float64)
        if not (self.source_a.shape == self.source_b.shape == self.noise.shape):
            raise SizeError("sources and noise must have equal lengths")

    def check_orthogonal(self, tol: float = ORTHO_TOL):
        sigs = [("source_a", self.source_a), ("source_b", self.source_b), ("noise", self.noise)]
        for i in range(3):
            for j in range(i + 1, 3):
                (na, a), (nb, b) = sigs[i], sigs[j]
                scale = np.linalg.norm(a) * np.linalg.norm(b)
                if scale > 0 and abs(np.dot(a, b)) > tol * scale:
                    raise FixtureError(f"{na} and {nb} are not orthogonal "
                                       f"(relative inner product {abs(np.dot(a, b)) / scale:.3e} > {tol:g})")

    def estimates(self):
        a = self.source_a + self.alpha_a * self.source_b + self.beta_a * self.noise
        b = self.source_b + self.alpha_b * self.source_a + self.beta_b * self.noise
        return a, b


def cse_ratio_oracle(model: CrossTalkModel) -> float:
    """Closed-form normalized cross-correlation of the two estimates of ``model``.

    For orthogonal sources and noise:
    ``(alpha_b |s_a|^2 + alpha_a |s_b|^2 + beta_a beta_b |n|^2)
    / ((1 + alpha_b^2) |s_a|^2 + (1 + alpha_a^2) |s_b|^2 + (beta_a^2 + beta_b^2) |n|^2)``.
    Each estimate's leakage coefficient weights the *other* estimate's source power.
    """
    model.check_orthogonal()
    pa = float(np.dot(model.source_a, model.source_a))
    pb = float(np.dot(model.source_b, model.source_b))
    pn = float(np.dot(model.noise, model.noise))
    aa, ab, ba, bb = model.alpha_a, model.alpha_b, model.beta_a, model.beta_b
    num = ab * pa + aa * pb + ba * bb * pn
    den = (1 + ab**2) * pa + (1 + aa**2) * pb + (ba**2 + bb**2) * pn
    if den == 0.0:
        raise DomainError("both estimates are zero")
    return num / den


def cse_oracle(model: CrossTalkModel) -> float:
    return _neg_db(abs(cse_ratio_oracle(model)))


@dataclass
class EvalReport:
    permutation: tuple
    si_sdr: list
    ccmse: list
    ccmse_thresholded: list
    cse: float
    cse_normalized: float
    delay: int = 0
    warmup: int = 0
    si_sdr_clamped: list = field(default_factory=list)
    cse_clamped: bool = False
    external: dict = field(default_factory=dict)

    def to_record(self, item: str | None = None) -> dict:
        """Flat dict in the fixed key order used for JSON-lines output."""
        rec = {"version": REPORT_VERSION}
        if item is not None:
            rec["item"] = item
        rec.update({
            "permutation": list(self.permutation),
            "cse": self.cse,
            "cse_normalized": self.cse_normalized,
            "cse_clamped": self.cse_clamped,
            "si_sdr": list(self.si_sdr),
            "si_sdr_clamped": list(self.si_sdr_clamped),
            "ccmse": list(self.ccmse),
            "ccmse_thresholded": list(self.ccmse_thresholded),
            "delay": self.delay,
            "warmup": self.warmup,
            "external": dict(sorted(self.external.items())),
        })
        return rec

    def to_json(self, item: str | None = None) -> str:
        return json.dumps(self.to_record(item))


def align(targets, estimates, delay: int = 0):
    """Drop ``delay`` leading samples from the estimates and as many trailing samples from the targets."""
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    e = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    e = e[:, delay:]
    t = t[:, : t.shape[1] - delay]
    if t.shape != e.shape:
        raise SizeError(f"after delay compensation targets are {t.shape} but estimates are {e.shape}")
    return t, e


def evaluate_pair(targets, estimates, loss_config: LossConfig = LossConfig(), delay: int = 0, warmup: int = 0,
                  external: dict | None = None) -> EvalReport:
    """Score ``R`` estimates against ``R`` targets.

    Estimates are delay-compensated, the first ``warmup`` aligned samples are excluded,
    the branch assignment is chosen by uPIT on negative SI-SDR, and CSE is averaged over
    all estimate pairs (a single pair for R = 2).
    """
    t, e = align(targets, estimates, delay)
    if len(t) != len(e):
        raise SizeError(f"{len(t)} targets but {len(e)} estimates")
    t, e = t[:, warmup:], e[:, warmup:]
    perm, _ = upit_assign(list(t), list(e), neg_si_sdr)
    sdrs, losses, thresholded = [], [], []
    for r, p in enumerate(perm):
        sdrs.append(si_sdr(t[r], e[p]))
        s_spec, e_spec = level_normalized_pair(t[r], e[p])
        loss = ccmse(s_spec, e_spec, loss_config.compression, loss_config.phase_weight)
        losses.append(loss)
        thresholded.append(soft_threshold(loss, loss_config.threshold) if loss_config.threshold is not None
                           else soft_threshold(loss, 0.0))
    pairs = [(i, j) for i in range(len(e)) for j in range(i + 1, len(e))]
    cse_vals = [cse(e[i], e[j]) for i, j in pairs]
    norm_vals = [cse_normalized(e[i], e[j]) if np.any(e[i]) and np.any(e[j]) else DB_CLAMP for i, j in pairs]
    cse_val = float(np.mean(cse_vals))
    return EvalReport(
        permutation=tuple(int(p) for p in perm),
        si_sdr=sdrs,
        ccmse=losses,
        ccmse_thresholded=thresholded,
        cse=cse_val,
        cse_normalized=float(np.mean(norm_vals)),
        delay=delay,
        warmup=warmup,
        si_sdr_clamped=[is_clamped(v) for v in sdrs],
        cse_clamped=is_clamped(cse_val),
        external=dict(external or {}),
    )


def write_jsonl(records, fh):
    for rec in records:
        fh.write(json.dumps(rec) + "\n")
