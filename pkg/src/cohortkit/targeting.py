"""Demand-driven cohort retrieval.

Zero-shot: canonicalize the demand sentence with a rule pipeline, embed it
with the description tower, rank every user by cosine similarity over the
exact flat index, and cut by top-k or a calibrated threshold. Few-shot: tune
a small matrix of prompt vectors (prepended to the demand tokens) with a
triplet loss over positive and hard-negative seed users; towers stay frozen.
"""

from __future__ import annotations

import importlib.resources
import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import nn, textenc
from .errors import (
    CalibrationError, ConfigError, DegenerateInputError, DimensionError, InputError,
    ParameterError, TrainingDiverged,
)
from .fusion import AlignedModel
from .nn import tensor as T
from .nn.tensor import Tensor
from .synthworld.templates import (
    is_canonical, render_browse, render_channel, render_click, render_purchase,
    render_search,
)

VERB_INTENTS = {"purchase": "purchase", "search": "search", "browse": "browse",
                "click": "click", "pay": "channel"}
PHRASE_STOPWORDS = {"the", "a", "an", "to", "for", "of", "who", "will", "that", "with",
                    "in", "on", "at", "by", "up", "their", "them", "users", "user",
                    "people", "customers", "mini", "program", "programs", "miniprogram",
                    "page", "pages", "successful", "successfully", "failed", "via",
                    "through"}
AMOUNT_MARKERS = {"over", "above", "exceeding", "more", "than", "amounting", "around",
                  "least", "under", "below", "worth"}
_AMOUNT_RE = re.compile(r"(?:\$\s*)?(\d[\d,]*(?:\.\d+)?)\s*(k|m|thousand|million)?\b")
_MULTIPLIERS = {"k": 1_000, "thousand": 1_000, "m": 1_000_000, "million": 1_000_000}


def default_synonyms() -> dict[str, str]:
    path = importlib.resources.files("cohortkit.data").joinpath("synonyms.json")
    return json.loads(path.read_text())


def _extract_amount(lowered: str) -> float | None:
    m = _AMOUNT_RE.search(lowered)
    if not m:
        return None
    value = float(m.group(1).replace(",", ""))
    if m.group(2):
        value *= _MULTIPLIERS[m.group(2)]
    return value


def canonicalize_query(text: str, synonyms: dict[str, str] | None = None) -> tuple[str, list[str]]:
    """Rewrite free-form demand text into the matching template sentence.

    Deterministic: lower-case, synonym substitution, verb-intent detection,
    item/amount phrase extraction, and re-rendering through the shared
    sentence builders. Unmatched text passes through lower-cased with a
    non-canonical flag; canonical input is returned unchanged.
    """
    if not text or not text.strip():
        raise InputError("demand text is empty")
    if is_canonical(text):
        return text, []
    synonyms = default_synonyms() if synonyms is None else synonyms
    lowered = text.lower()
    amount = _extract_amount(lowered)

    joined = " ".join(textenc.normalize_words(lowered))
    for phrase in sorted((k for k in synonyms if " " in k), key=len, reverse=True):
        joined = joined.replace(phrase, synonyms[phrase])
    tokens = [synonyms.get(t, t) for t in joined.split()]

    intent = None
    verb_at = None
    for i, tok in enumerate(tokens):
        if tok in VERB_INTENTS:
            intent, verb_at = VERB_INTENTS[tok], i
            break
    if intent is None:
        return lowered, ["non_canonical"]

    phrase_words = []
    for tok in tokens[verb_at + 1:]:
        if tok in AMOUNT_MARKERS or tok[0].isdigit():
            break
        if tok in PHRASE_STOPWORDS:
            continue
        phrase_words.append(tok)
    if not phrase_words:
        return lowered, ["non_canonical"]
    phrase = " ".join(phrase_words)
    failed = any(t in ("failed", "unsuccessful", "failing") for t in tokens)

    if intent == "purchase":
        canonical = render_purchase([phrase], amount=None, successful=not failed,
                                    threshold=None if amount is None else int(amount))
    elif intent == "search":
        canonical = render_search([phrase])
    elif intent == "browse":
        canonical = render_browse([phrase])
    elif intent == "click":
        canonical = render_click([phrase])
    else:
        canonical = render_channel([phrase])
    return canonical, ["rewritten"]


@dataclass
class Cohort:
    entries: list[tuple[int, float]]
    demand: str
    canonical: str
    mode: dict
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("cohort contains duplicate user ids")
        scores = [s for _, s in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ConfigError("cohort scores must be non-increasing")

    @property
    def user_ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    def to_json(self) -> dict:
        return {"demand": self.demand, "canonical_demand": self.canonical,
                "mode": self.mode, "flags": self.flags,
                "cohort": [{"user_id": i, "score": s} for i, s in self.entries]}


class UserIndex:
    """Exact cosine scan over unit-normalized user embeddings."""

    def __init__(self, matrix: np.ndarray, user_ids):
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise DimensionError("index matrix must be (N, d)")
        ids = np.asarray(list(user_ids), dtype=np.int64)
        if len(ids) != matrix.shape[0]:
            raise DimensionError("id count does not match matrix rows")
        if len(np.unique(ids)) != len(ids):
            raise ConfigError("user ids must be unique")
        norms = np.linalg.norm(matrix, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            matrix = matrix / np.maximum(norms[:, None], 1e-12)
        self.matrix = matrix
        self.user_ids = ids

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row_for(self, user_id: int) -> np.ndarray:
        pos = np.nonzero(self.user_ids == user_id)[0]
        if pos.size == 0:
            raise InputError(f"unknown user id {user_id}")
        return self.matrix[pos[0]]

    def scores(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float32).reshape(-1)
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise DegenerateInputError("query embedding has zero norm")
        return self.matrix @ (q / norm)

    def ranked(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        scores = self.scores(query)
        order = np.lexsort((self.user_ids, -scores))
        return order, scores


def _query_embedding(model: AlignedModel, canonical: str) -> np.ndarray:
    with T.no_grad():
        return model.encode_description(canonical).data.astype(np.float32)


def _build_cohort(index: UserIndex, query: np.ndarray, demand: str, canonical: str,
                  mode: str, k: int | None, tau: float | None,
                  flags: list[str]) -> Cohort:
    order, scores = index.ranked(query)
    flags = list(flags)
    if mode == "top_k":
        if k is None or k < 1:
            raise ParameterError("top_k mode needs k >= 1")
        if k > len(index):
            flags.append("k_clamped")
            k = len(index)
        chosen = order[:k]
        meta = {"kind": "top_k", "k": int(k)}
    elif mode == "threshold":
        if tau is None or not -1.0 <= tau <= 1.0:
            raise ParameterError(f"threshold must lie in [-1, 1], got {tau}")
        chosen = [i for i in order if scores[i] >= tau]
        meta = {"kind": "threshold", "tau": float(tau)}
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    entries = [(int(index.user_ids[i]), float(scores[i])) for i in chosen]
    return Cohort(entries=entries, demand=demand, canonical=canonical, mode=meta,
                  flags=flags)


def zero_shot_target(demand: str, index: UserIndex, model: AlignedModel,
                     mode: str = "top_k", k: int | None = 100,
                     tau: float | None = None,
                     synonyms: dict[str, str] | None = None) -> Cohort:
    canonical, flags = canonicalize_query(demand, synonyms)
    query = _query_embedding(model, canonical)
    return _build_cohort(index, query, demand, canonical, mode, k, tau, flags)


def max_f1_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximizing F1 over observed scores; ties resolve upward."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels length mismatch")
    if labels.min() == labels.max():
        raise CalibrationError("calibration split must contain both classes")
    best_tau, best_f1 = None, -1.0
    for tau in np.unique(scores)[::-1]:          # descending: ties pick higher tau
        pred = scores >= tau
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        fn = int(np.sum(~pred & (labels == 1)))
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        if f1 > best_f1:
            best_tau, best_f1 = float(tau), f1
    return best_tau, best_f1


def calibrate_threshold(demand: str, index: UserIndex, model: AlignedModel,
                        calib_ids, calib_labels,
                        synonyms: dict[str, str] | None = None) -> float:
    canonical, _ = canonicalize_query(demand, synonyms)
    query = _query_embedding(model, canonical)
    scores = index.scores(query)
    pos = {int(i): int(l) for i, l in zip(calib_ids, calib_labels)}
    mask = np.array([int(u) in pos for u in index.user_ids])
    labels = np.array([pos[int(u)] for u in index.user_ids[mask]])
    tau, _ = max_f1_threshold(scores[mask], labels)
    return tau


@dataclass
class PromptSession:
    session_id: str
    demand: str
    canonical: str
    prompt: Tensor                       # (p, d) learnable vectors
    positives: list[int] = field(default_factory=list)
    negatives: list[int] = field(default_factory=list)
    alpha: float = 0.2
    tuned: bool = False
    trace: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.prompt.ndim != 2 or self.prompt.shape[0] < 1:
            raise ConfigError("prompt must be a (p >= 1, d) matrix")
        if self.alpha <= 0:
            raise ConfigError("triplet margin must be positive")
        self.validate_seeds()

    def validate_seeds(self):
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise ConfigError(f"seed sets overlap: {sorted(overlap)}")

    def to_json(self) -> dict:
        return {"session_id": self.session_id, "demand": self.demand,
                "canonical": self.canonical, "prompt_shape": list(self.prompt.shape),
                "positives": list(self.positives), "negatives": list(self.negatives),
                "alpha": self.alpha, "tuned": self.tuned, "trace": self.trace}


def init_prompt(demand: str, model: AlignedModel, p: int = 4, alpha: float = 0.2,
                seed: int = 0, session_id: str = "session",
                synonyms: dict[str, str] | None = None) -> PromptSession:
    """Prompt vectors start at the embeddings of the first p demand tokens,
    topped up with small gaussian rows when the demand is shorter."""
    if p < 1:
        raise ConfigError("prompt length must be >= 1")
    canonical, _ = canonicalize_query(demand, synonyms)
    ids = textenc.tokenize(canonical, model.desc_config)[:p]
    rng = np.random.default_rng([seed, 0x9209])
    d = model.desc_config.dim
    rows = [model.desc_params.embed.data[i].copy() for i in ids]
    while len(rows) < p:
        rows.append((rng.standard_normal(d) * 0.02).astype(np.float32))
    prompt = Tensor(np.stack(rows).astype(np.float32), requires_grad=True)
    return PromptSession(session_id=session_id, demand=demand, canonical=canonical,
                         prompt=prompt, alpha=alpha)


def session_query_embedding(session: PromptSession, model: AlignedModel) -> np.ndarray:
    ids = textenc.tokenize(session.canonical, model.desc_config)
    with T.no_grad():
        e = textenc.encode_text(ids, model.desc_params, model.desc_config,
                                prefix=session.prompt)
    return e.data.astype(np.float32)


def triplet_loss(e_q: Tensor, positives: Tensor, negatives: Tensor, alpha: float) -> Tensor:
    """Sum over all (positive, negative) pairs of
    max(0, ||e_q - e_f+||^2 - ||e_q - e_f-||^2 + alpha)."""
    if positives.ndim != 2 or negatives.ndim != 2:
        raise DimensionError("seed embeddings must be (n, d) matrices")
    d_pos = T.tsum(T.square(T.sub(positives, e_q)), axis=1)       # (P,)
    d_neg = T.tsum(T.square(T.sub(negatives, e_q)), axis=1)       # (N,)
    p = d_pos.shape[0]
    n = d_neg.shape[0]
    diff = T.sub(T.reshape(d_pos, (p, 1)), T.reshape(d_neg, (1, n)))
    return T.tsum(T.relu(T.add(diff, alpha)))


def prompt_tune(session: PromptSession, index: UserIndex, model: AlignedModel,
                steps: int = 150, lr: float = 0.05) -> PromptSession:
    """Optimize only the session's prompt vectors against seed users.

    Distances are taken between L2-normalized embeddings so the margin has a
    fixed scale; all tower parameters stay frozen.
    """
    session.validate_seeds()
    if not session.positives or not session.negatives:
        raise ConfigError("prompt tuning needs at least one positive and one negative seed")
    ids = textenc.tokenize(session.canonical, model.desc_config)
    pos = Tensor(np.stack([index.row_for(i) for i in session.positives]))
    neg = Tensor(np.stack([index.row_for(i) for i in session.negatives]))
    opt = nn.AdamW([session.prompt], lr=lr)
    for step in range(steps):
        e_q = textenc.encode_text(ids, model.desc_params, model.desc_config,
                                  prefix=session.prompt)
        e_q = T.l2_normalize(e_q, axis=-1)
        loss = triplet_loss(e_q, pos, neg, session.alpha)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged("prompt tuning loss is not finite", step=step)
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
        session.trace.append({"step": step, "loss": value, "lr": lr})
    session.tuned = True
    return session


def few_shot_target(session: PromptSession, index: UserIndex, model: AlignedModel,
                    mode: str = "top_k", k: int | None = 100,
                    tau: float | None = None) -> Cohort:
    """Same ranking contract as zero-shot but with the tuned prompt embedding."""
    if not session.tuned:
        cohort = zero_shot_target(session.demand, index, model, mode=mode, k=k, tau=tau)
        cohort.flags.append("untuned_session_fallback")
        return cohort
    query = session_query_embedding(session, model)
    return _build_cohort(index, query, session.demand, session.canonical, mode, k, tau,
                         ["prompt_tuned"])
