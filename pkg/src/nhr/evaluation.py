"""Leave-one-out ranking metrics (HR@k, NDCG@k) over sampled candidate sets.

HR@k is the 0/1 hit indicator. The ``strict`` switch returns ``1/k`` on a
hit instead, for auditing the literal printed formula; it is off by default
because it caps HR at ``1/k``.

NDCG@k uses a base-2 log so the ideal DCG of one relevant item is exactly 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import SplitDataset
from .errors import ConfigError, ProtocolError
from .sampling import EvalCandidates

SCORE_CHUNK = 65536


def rank_candidates(model, user: int, candidates, features=None) -> np.ndarray:
    """Candidates sorted by descending score; equal scores by ascending item id."""
    candidates = np.asarray(candidates, dtype=np.int64)
    scores = np.asarray(model.score(np.full(len(candidates), user), candidates, features))
    return candidates[np.lexsort((candidates, -scores))]


def _position(ranked, test_item) -> int:
    hits = np.flatnonzero(np.asarray(ranked) == test_item)
    if hits.size == 0:
        raise ProtocolError(f"test item {test_item} is absent from the ranked list")
    return int(hits[0]) + 1


def hr_at_k(ranked, test_item, k: int, strict: bool = False) -> float:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if _position(ranked, test_item) <= k:
        return 1.0 / k if strict else 1.0
    return 0.0


def ndcg_at_k(ranked, test_item, k: int) -> float:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    pos = _position(ranked, test_item)
    return 1.0 / math.log2(pos + 1) if pos <= k else 0.0


def target_positions(scores: np.ndarray, items: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each row's target under the (score desc, item id asc) order.

    ``scores`` and ``items`` are ``(U, C)``; ``targets`` is ``(U,)``.
    """
    t_mask = items == targets[:, None]
    if not np.all(t_mask.sum(axis=1) == 1):
        raise ProtocolError("every candidate row must contain its target item exactly once")
    t_score = scores[t_mask][:, None]
    ahead = (scores > t_score) | ((scores == t_score) & (items < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def score_candidates(model, cands: EvalCandidates, features=None) -> np.ndarray:
    users = np.repeat(cands.users, cands.size)
    items = cands.items.reshape(-1)
    out = np.empty(len(items), dtype=np.float64)
    for start in range(0, len(items), SCORE_CHUNK):
        sl = slice(start, start + SCORE_CHUNK)
        out[sl] = model.score(users[sl], items[sl], features)
    return out.reshape(cands.items.shape)


@dataclass
class EvalReport:
    model: str
    k: int
    users: np.ndarray
    positions: np.ndarray
    hits: np.ndarray
    ndcgs: np.ndarray
    fingerprint: str
    strict: bool = False

    @property
    def hr(self) -> float:
        return float(np.mean(self.hits)) if len(self.hits) else 0.0

    @property
    def ndcg(self) -> float:
        return float(np.mean(self.ndcgs)) if len(self.ndcgs) else 0.0

    def to_dict(self, per_user: bool = False) -> dict:
        d = {
            "model": self.model,
            "k": self.k,
            "hr": round(self.hr, 12),
            "ndcg": round(self.ndcg, 12),
            "users": int(len(self.users)),
            "candidates_fingerprint": self.fingerprint,
        }
        if self.strict:
            d["strict_hr"] = True
        if per_user:
            d["per_user"] = [
                {"user": int(u), "rank": int(r), "hit": float(h), "ndcg": round(float(n), 12)}
                for u, r, h, n in zip(self.users, self.positions, self.hits, self.ndcgs)
            ]
        return d

    def to_json(self, per_user: bool = False) -> str:
        return json.dumps(self.to_dict(per_user), sort_keys=True)


def evaluate(model, split: SplitDataset | None, candidates: EvalCandidates, features=None,
             k: int = 10, strict: bool = False, tag: str | None = None) -> EvalReport:
    """Rank each user's candidates and average HR@k / NDCG@k over users.

    When ``split`` is given, every test user must have a candidate row.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if split is not None:
        missing = [u for u in split.test if u not in candidates]
        if missing:
            raise ProtocolError(f"user {missing[0]} (and {len(missing) - 1} more) lack candidates")
    scores = score_candidates(model, candidates, features)
    if not np.all(np.isfinite(scores)):
        raise ProtocolError(f"model {tag or model.kind} produced non-finite scores")
    pos = target_positions(scores, candidates.items, candidates.targets)
    inside = pos <= k
    hits = inside.astype(np.float64) * ((1.0 / k) if strict else 1.0)
    ndcgs = np.where(inside, 1.0 / np.log2(pos + 1.0), 0.0)
    return EvalReport(tag or getattr(model, "kind", "model"), k, candidates.users.copy(), pos,
                      hits, ndcgs, candidates.fingerprint(), strict)


@dataclass
class SummaryRow:
    """Means-only stand-in for an ``EvalReport`` (e.g. read back from evaluation.json)."""

    model: str
    k: int
    hr: float
    ndcg: float
    fingerprint: str


def is_nhr(name: str) -> bool:
    return name.lower().startswith("nhr")


def improvement(reports: list[EvalReport]) -> tuple[float, float, str] | None:
    """Relative gain of the best NHR model over the best non-NHR model, by HR.

    Returns ``(hr_gain, ndcg_gain, baseline_name)`` or ``None`` when either side is absent.
    """
    nhr = [r for r in reports if is_nhr(r.model)]
    rest = [r for r in reports if not is_nhr(r.model)]
    if not nhr or not rest:
        return None
    best_nhr = max(nhr, key=lambda r: (r.hr, r.ndcg))
    best = max(rest, key=lambda r: (r.hr, r.ndcg))
    hr_gain = (best_nhr.hr - best.hr) / best.hr if best.hr else float("nan")
    ndcg_gain = (best_nhr.ndcg - best.ndcg) / best.ndcg if best.ndcg else float("nan")
    return hr_gain, ndcg_gain, best.model


def format_table(reports: list[EvalReport], placeholders: tuple[str, ...] = ("ALS",)) -> str:
    """Plain-text comparison table: one row per model, HR@k and NDCG@k columns."""
    if not reports:
        return "(no reports)\n"
    k = reports[0].k
    width = max([len(r.model) for r in reports] + [len(p) for p in placeholders] + [8])
    lines = [f"{'model':<{width}}  {f'HR@{k}':>8}  {f'NDCG@{k}':>8}"]
    lines.append("-" * len(lines[0]))
    for r in reports:
        lines.append(f"{r.model:<{width}}  {r.hr:>8.4f}  {r.ndcg:>8.4f}")
    for p in placeholders:
        lines.append(f"{p:<{width}}  {'-':>8}  {'-':>8}  (not implemented)")
    gain = improvement(reports)
    if gain is not None:
        hr_gain, ndcg_gain, base = gain
        lines.append("-" * len(lines[0]))
        lines.append(f"{'Im.%':<{width}}  {hr_gain * 100:>7.2f}%  {ndcg_gain * 100:>7.2f}%  (vs {base})")
    prints = sorted({r.fingerprint for r in reports})
    if len(prints) > 1:
        lines.append(f"WARNING: reports use different candidate sets: {', '.join(prints)}")
    else:
        lines.append(f"candidates: {prints[0]}")
    return "\n".join(lines) + "\n"
