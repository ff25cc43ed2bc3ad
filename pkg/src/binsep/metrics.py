"""Training objective and separation quality metrics (SDR / SIR).

The loss combines mask-domain L1 + alpha * L2 with a beta-weighted
time-domain L1; all norms are mean-reduced so the weights are scale-free
across presets. bss_eval projects each estimate onto spans of shifted
references to split it into target, interference, and artifact energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import DiffTensor


@dataclass
class LossBreakdown:
    freq_l1: float
    freq_l2: float
    time_l1: float
    total: float
    alpha: float
    beta: float
    total_tensor: DiffTensor | None = None


def _as_list(x):
    if x is None:
        return []
    if isinstance(x, (list, tuple)):
        return list(x)
    return [x]


def _wrap(x):
    return x if isinstance(x, DiffTensor) else DiffTensor(np.asarray(x, dtype=np.float64))


def binaural_loss(pred_masks, gt_masks, pred_wavs=None, gt_wavs=None, alpha=0.5, beta=0.25):
    """Mask-regression loss summed over objects and channels.

    Each entry of the mask/waveform lists is one (object, channel) pair;
    L1 and L2 norms are mean-reduced per entry and summed across entries.
    Accepts DiffTensors (training) or plain arrays (evaluation).
    """
    pred_masks, gt_masks = _as_list(pred_masks), _as_list(gt_masks)
    pred_wavs, gt_wavs = _as_list(pred_wavs), _as_list(gt_wavs)
    if len(pred_masks) != len(gt_masks) or len(pred_wavs) != len(gt_wavs):
        raise ValueError("prediction/target list lengths differ")
    freq_l1 = None
    freq_l2 = None
    for pred, gt in zip(pred_masks, gt_masks):
        pred, gt = _wrap(pred), _wrap(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
        diff = pred - gt
        l1 = ag.mean(ag.abs_(diff))
        l2 = ag.power(ag.mean(diff * diff) + 1e-12, 0.5)
        freq_l1 = l1 if freq_l1 is None else freq_l1 + l1
        freq_l2 = l2 if freq_l2 is None else freq_l2 + l2
    time_l1 = None
    for pred, gt in zip(pred_wavs, gt_wavs):
        pred, gt = _wrap(pred), _wrap(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"waveform shape mismatch: {pred.shape} vs {gt.shape}")
        l1 = ag.mean(ag.abs_(pred - gt))
        time_l1 = l1 if time_l1 is None else time_l1 + l1
    zero = DiffTensor(np.zeros(()))
    freq_l1 = freq_l1 if freq_l1 is not None else zero
    freq_l2 = freq_l2 if freq_l2 is not None else zero
    time_l1 = time_l1 if time_l1 is not None else zero
    total = freq_l1 + alpha * freq_l2 + beta * time_l1
    return LossBreakdown(
        freq_l1=freq_l1.item(),
        freq_l2=freq_l2.item(),
        time_l1=time_l1.item(),
        total=total.item(),
        alpha=alpha,
        beta=beta,
        total_tensor=total,
    )


# -- bss_eval -------------------------------------------------------------------


@dataclass
class SeparationScore:
    sdr_db: list = field(default_factory=list)
    sir_db: list = field(default_factory=list)

    @property
    def mean_sdr(self):
        return float(np.mean(self.sdr_db))

    @property
    def mean_sir(self):
        return float(np.mean(self.sir_db))


def _shift_matrix(refs, filter_len):
    """Columns are the references shifted by 0..filter_len-1, zero-padded."""
    nsrc, n = refs.shape
    total = n + filter_len - 1
    a = np.zeros((total, nsrc * filter_len))
    for j in range(nsrc):
        for b in range(filter_len):
            a[b : b + n, j * filter_len + b] = refs[j]
    return a


def _project(a, est_pad):
    gram = a.T @ a
    rhs = a.T @ est_pad
    try:
        coef = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        coef = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    return a @ coef


def _db_ratio(num, den, cap_db):
    if num <= 0:
        return -float(cap_db)
    floor = num * 10.0 ** (-cap_db / 10.0)
    return float(np.clip(10.0 * np.log10(num / max(den, floor)), -cap_db, cap_db))


def bss_eval(estimates, references, filter_len=512, cap_db=60.0):
    """SDR/SIR per estimate against its paired reference.

    filter_len is the length of the least-squares projection filters;
    filter_len=1 is the fast scale-invariant mode (not comparable to
    filter_len=512 figures).
    """
    ests = np.atleast_2d(np.asarray([np.asarray(e, dtype=np.float64) for e in estimates]))
    refs = np.atleast_2d(np.asarray([np.asarray(r, dtype=np.float64) for r in references]))
    if ests.shape != refs.shape:
        raise ValueError(f"estimate/reference shapes differ: {ests.shape} vs {refs.shape}")
    if ests.shape[0] < 1:
        raise ValueError("need at least one source")
    if filter_len < 1:
        raise ValueError("filter_len must be >= 1")
    for j, r in enumerate(refs):
        if not np.any(r):
            raise ValueError(f"reference {j} is silent")
    nsrc = refs.shape[0]
    a_all = _shift_matrix(refs, filter_len)
    score = SeparationScore()
    for i in range(nsrc):
        est_pad = np.concatenate([ests[i], np.zeros(filter_len - 1)])
        a_own = a_all[:, i * filter_len : (i + 1) * filter_len]
        s_filt = _project(a_own, est_pad)
        p_all = _project(a_all, est_pad) if nsrc > 1 else s_filt
        e_interf = p_all - s_filt
        e_artif = est_pad - p_all
        num = float(s_filt @ s_filt)
        score.sdr_db.append(_db_ratio(num, float((e_interf + e_artif) @ (e_interf + e_artif)), cap_db))
        score.sir_db.append(_db_ratio(num, float(e_interf @ e_interf), cap_db))
    return score
