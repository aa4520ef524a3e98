"""CTC objective, forced alignment, and frame-synchronous prefix beam search.

Label convention: blank is index 0, real labels are 1..V.  All arithmetic is
in the log domain with ``LOG_ZERO`` (-1e30) as the finite stand-in for
log(0); ``exp`` underflows it to exactly 0, which keeps gradients clean.
Frame indices are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import LOG_ZERO, Tensor

BLANK = 0


class InfeasibleAlignmentError(ValueError):
    """The label sequence does not fit into the given number of frames."""


@dataclass(frozen=True)
class CtcDistribution:
    """Per-frame label log-probabilities of shape (frames, vocab+1)."""

    logp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logp", np.asarray(self.logp, dtype=np.float64))
        if self.logp.ndim != 2:
            raise ValueError("log-probability matrix must be 2-D")

    @property
    def n_frames(self) -> int:
        return self.logp.shape[0]

    @property
    def n_classes(self) -> int:
        return self.logp.shape[1]

    def validate(self, tol: float = 1e-9) -> "CtcDistribution":
        if self.n_frames:
            lse = np.log(np.exp(self.logp - self.logp.max(axis=1, keepdims=True))
                         .sum(axis=1)) + self.logp.max(axis=1)
            if np.abs(lse).max() > tol:
                raise ValueError("rows do not normalize to probability 1")
        return self


@dataclass
class Alignment:
    """A maximum-probability valid path and per-label first-occurrence frames."""

    path: list[int]                # length n_frames, over labels + blank
    trigger_frames: list[int]     # 0-based frame of the first occurrence of each label
    log_prob: float


def collapse(path) -> list[int]:
    """Dedupe consecutive repeats, then strip blanks."""
    out = []
    prev = None
    for s in path:
        if s != prev and s != BLANK:
            out.append(int(s))
        prev = s
    return out


def _check_labels(labels, n_classes: int) -> list[int]:
    labels = [int(y) for y in labels]
    if not labels:
        raise ValueError("label sequence must be nonempty")
    for y in labels:
        if not 1 <= y < n_classes:
            raise ValueError(f"label {y} outside 1..{n_classes - 1}")
    return labels


def min_frames(labels) -> int:
    """Shortest path length: |Y| plus one separating blank per adjacent repeat."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_feasible(n_frames: int, labels) -> bool:
    return n_frames >= min_frames(labels)


def _augmented(labels) -> np.ndarray:
    aug = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    aug[1::2] = labels
    return aug


def ctc_log_likelihood(logp, labels) -> Tensor:
    """Forward-algorithm log p(labels | frames), differentiable in logp.

    Infeasible instances (too few frames) yield the LOG_ZERO sentinel as a
    constant, signalling probability zero without raising.
    """
    logp = nm.as_tensor(logp)
    n_frames, n_classes = logp.shape
    labels = _check_labels(labels, n_classes)
    if not ctc_feasible(n_frames, labels):
        return nm.as_tensor(LOG_ZERO)

    aug = _augmented(labels)
    s_len = len(aug)
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (aug[2:] != BLANK) & (aug[2:] != aug[:-2])
    neg1 = nm.as_tensor(np.full(1, LOG_ZERO))
    neg2 = nm.as_tensor(np.full(2, LOG_ZERO))

    emit0 = nm.take_pairs(logp, np.zeros(s_len, dtype=np.int64), aug)
    init_mask = np.arange(s_len) < 2
    alpha = nm.where(init_mask, emit0, nm.as_tensor(np.full(s_len, LOG_ZERO)))

    for t in range(1, n_frames):
        stay = alpha
        step = nm.concat([neg1, alpha[:-1]])
        skip = nm.where(skip_ok, nm.concat([neg2, alpha[:-2]]),
                        nm.as_tensor(np.full(s_len, LOG_ZERO)))
        emit = nm.take_pairs(logp, np.full(s_len, t, dtype=np.int64), aug)
        alpha = nm.add(nm.logaddexp(nm.logaddexp(stay, step), skip), emit)

    return nm.logaddexp(alpha[s_len - 1], alpha[s_len - 2])


def ctc_forced_align(dist, labels) -> Alignment:
    """Maximum-probability valid path with leftmost-emission tie-breaking.

    Ties prefer the path that advances through the label graph earliest, so
    trigger positions are deterministic.
    """
    logp = dist.logp if isinstance(dist, CtcDistribution) else np.asarray(dist, dtype=np.float64)
    n_frames, n_classes = logp.shape
    labels = _check_labels(labels, n_classes)
    if not ctc_feasible(n_frames, labels):
        raise InfeasibleAlignmentError(
            f"{len(labels)} labels need at least {min_frames(labels)} frames, got {n_frames}")

    aug = _augmented(labels)
    s_len = len(aug)
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (aug[2:] != BLANK) & (aug[2:] != aug[:-2])

    score = np.full(s_len, LOG_ZERO)
    score[0] = logp[0, aug[0]]
    score[1] = logp[0, aug[1]]
    back = np.zeros((n_frames, s_len), dtype=np.int64)
    back[0] = np.arange(s_len)

    for t in range(1, n_frames):
        prev = score
        score = np.full(s_len, LOG_ZERO)
        for s in range(s_len):
            # prefer the highest predecessor state on ties (earliest emission)
            cands = [(prev[s], s)]
            if s >= 1:
                cands.append((prev[s - 1], s - 1))
            if s >= 2 and skip_ok[s]:
                cands.append((prev[s - 2], s - 2))
            best_val, best_src = cands[0]
            for val, src in cands[1:]:
                if val > best_val or (val == best_val and src > best_src):
                    best_val, best_src = val, src
            score[s] = best_val + logp[t, aug[s]]
            back[t, s] = best_src

    final = s_len - 1
    if s_len >= 2 and (score[s_len - 2] > score[final]):
        final = s_len - 2
    states = [final]
    for t in range(n_frames - 1, 0, -1):
        states.append(int(back[t, states[-1]]))
    states.reverse()

    path = [int(aug[s]) for s in states]
    if collapse(path) != labels:
        raise InfeasibleAlignmentError("best path does not collapse to the labels")
    triggers = []
    seen_state = set()
    for t, s in enumerate(states):
        if aug[s] != BLANK and s not in seen_state:
            seen_state.add(s)
            triggers.append(t)
    log_prob = float(score[final] if final == s_len - 1 else score[s_len - 2])
    return Alignment(path=path, trigger_frames=triggers, log_prob=log_prob)


@dataclass
class PrefixHypothesis:
    """A beam-search prefix with split blank/non-blank probabilities."""

    labels: tuple[int, ...]
    logp_blank: float
    logp_label: float
    trigger_frames: tuple[int, ...]

    @property
    def score(self) -> float:
        return float(np.logaddexp(self.logp_blank, self.logp_label))


def ctc_prefix_beam_search(dist, beam_size: int, prune_size: int | None = None,
                           extension_bonus=None) -> list[PrefixHypothesis]:
    """Frame-synchronous prefix beam search; returns the n-best prefixes.

    ``extension_bonus(labels, new_label)`` may add a score inside the search
    (used for shallow LM fusion).  ``prune_size`` caps the candidate pool per
    frame before the beam cut.  Trigger frames record when each label first
    entered a surviving prefix.
    """
    if beam_size < 1:
        raise ValueError("beam size must be >= 1")
    logp = dist.logp if isinstance(dist, CtcDistribution) else np.asarray(dist, dtype=np.float64)
    n_frames, n_classes = logp.shape

    beam = {(): PrefixHypothesis((), 0.0, LOG_ZERO, ())}
    for t in range(n_frames):
        pool: dict[tuple[int, ...], PrefixHypothesis] = {}

        def merge(labels, blank, label, triggers):
            cur = pool.get(labels)
            if cur is None:
                pool[labels] = PrefixHypothesis(labels, blank, label, triggers)
            else:
                trig = min(cur.trigger_frames, triggers)
                pool[labels] = PrefixHypothesis(
                    labels,
                    float(np.logaddexp(cur.logp_blank, blank)),
                    float(np.logaddexp(cur.logp_label, label)),
                    trig)

        for hyp in beam.values():
            total = hyp.score
            # stay on the same prefix: emit blank, or repeat the last label
            merge(hyp.labels, total + logp[t, BLANK], LOG_ZERO, hyp.trigger_frames)
            if hyp.labels:
                merge(hyp.labels, LOG_ZERO,
                      hyp.logp_label + logp[t, hyp.labels[-1]], hyp.trigger_frames)
            for c in range(1, n_classes):
                base = hyp.logp_blank if hyp.labels and c == hyp.labels[-1] else total
                ext = base + logp[t, c]
                if extension_bonus is not None:
                    ext += extension_bonus(hyp.labels, c)
                merge(hyp.labels + (c,), LOG_ZERO, ext,
                      hyp.trigger_frames + (t,))

        ranked = sorted(pool.values(), key=lambda h: (-h.score, h.labels))
        if prune_size is not None:
            ranked = ranked[:prune_size]
        beam = {h.labels: h for h in ranked[:beam_size]}

    return sorted(beam.values(), key=lambda h: (-h.score, h.labels))
