"""Synthetic user world: archetype-driven event streams over weekly windows,
tabular rows, search text, future-window descriptions, and exact labels.

The window axis splits into a model-visible past (windows 1..context) and a
future segment (the remaining windows). Descriptions and labels derive only
from future events; the visible view, search text, and tabular row derive
only from the past. Generation is deterministic per (seed, user id) stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from . import presets
from .demands import DemandSpec, derive_label
from .presets import (
    AMOUNT_PARAMS, BACKGROUND_ITEMS, BACKGROUND_MERCHANTS, BACKGROUND_PAGES,
    BACKGROUND_PROGRAMS, CAR_QUERIES, CREDIT_PROGRAM, GENERIC_QUERIES,
    ITEM_CATEGORIES, LATENT_SLOPE, SEARCH_HISTORY_BIAS, Archetype, bucketize,
    solve_window_bias,
)
from .templates import render_description

MODALITIES = ("paybill", "spm", "miniprogram", "search")


@dataclass
class Event:
    window: int
    modality: str
    merchant: str = ""
    item: str = ""
    category: str = ""
    amount: float = 0.0
    channel: str = ""
    success: bool = True
    page: str = ""
    program: str = ""
    query: str = ""

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"event window {self.window} must be >= 1")
        if self.amount < 0:
            raise ConfigError("event amount must be >= 0")

    def tokens(self) -> list[str]:
        """Sequence tokens for the three behavioral modalities (search is text)."""
        if self.modality == "paybill":
            bucket = int(math.floor(math.log10(max(self.amount, 1.0))))
            return [f"m:{self.merchant}", f"i:{self.item}", f"c:{self.category}",
                    f"amt:{bucket}", f"ch:{self.channel}", f"ok:{int(self.success)}"]
        if self.modality == "spm":
            return [f"p:{self.page}"]
        if self.modality == "miniprogram":
            return [f"g:{self.program}"]
        return []

    def to_json(self) -> dict:
        d = {"w": self.window, "mod": self.modality}
        if self.modality == "paybill":
            d.update(merchant=self.merchant, item=self.item, category=self.category,
                     amount=self.amount, channel=self.channel, success=self.success)
        elif self.modality == "spm":
            d["page"] = self.page
        elif self.modality == "miniprogram":
            d["program"] = self.program
        elif self.modality == "search":
            d["query"] = self.query
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Event":
        return cls(window=d["w"], modality=d["mod"], merchant=d.get("merchant", ""),
                   item=d.get("item", ""), category=d.get("category", ""),
                   amount=d.get("amount", 0.0), channel=d.get("channel", ""),
                   success=d.get("success", True), page=d.get("page", ""),
                   program=d.get("program", ""), query=d.get("query", ""))


@dataclass
class TabularRow:
    cat: dict[str, int]
    cont: dict[str, float]


@dataclass
class UserRecord:
    user_id: int
    archetype: str                      # oracle-only; never fed to models
    latents: dict[str, float]           # oracle-only
    events: list[Event]
    tabular: TabularRow
    search_text: str
    description: str
    labels: dict[str, int]

    def events_in(self, lo: int, hi: int) -> list[Event]:
        return [e for e in self.events if lo <= e.window <= hi]

    def visible_events(self, context_windows: int) -> list[Event]:
        return [e for e in self.events if e.window <= context_windows]

    def future_events(self, context_windows: int) -> list[Event]:
        return [e for e in self.events if e.window > context_windows]

    def window_tokens(self, windows: int) -> list[list[str]]:
        """Modality-tagged sequence tokens per window (1-indexed windows)."""
        per_window: list[list[str]] = [[] for _ in range(windows)]
        for e in self.events:
            if e.window <= windows and e.modality in ("paybill", "spm", "miniprogram"):
                per_window[e.window - 1].extend(e.tokens())
        return per_window

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id, "archetype": self.archetype, "latents": self.latents,
            "events": [e.to_json() for e in self.events],
            "tabular": {"cat": self.tabular.cat, "cont": self.tabular.cont},
            "search_text": self.search_text, "description": self.description,
            "labels": self.labels,
        }

    @classmethod
    def from_json(cls, d: dict) -> "UserRecord":
        return cls(user_id=d["user_id"], archetype=d["archetype"], latents=d["latents"],
                   events=[Event.from_json(e) for e in d["events"]],
                   tabular=TabularRow(cat=d["tabular"]["cat"], cont=d["tabular"]["cont"]),
                   search_text=d["search_text"], description=d["description"],
                   labels=d["labels"])


@dataclass
class WorldConfig:
    users: int = 1000
    archetype_count: int = 8
    context_windows: int = 7
    future_windows: int = 2
    background_mix: float = 0.3
    scenarios: list[DemandSpec] = field(default_factory=presets.default_scenarios)
    categorical: list[tuple[str, int]] = field(
        default_factory=lambda: list(presets.DEFAULT_CATEGORICAL))
    continuous: list[str] = field(default_factory=lambda: list(presets.DEFAULT_CONTINUOUS))

    @property
    def total_windows(self) -> int:
        return self.context_windows + self.future_windows

    def to_json(self) -> dict:
        return {
            "users": self.users, "archetype_count": self.archetype_count,
            "windows": {"context": self.context_windows, "future": self.future_windows},
            "background_mix": self.background_mix,
            "schema": {"categorical": [{"name": n, "cardinality": c} for n, c in self.categorical],
                       "continuous": list(self.continuous)},
            "scenarios": [s.to_json() for s in self.scenarios],
        }

    @classmethod
    def from_json(cls, d: dict) -> "WorldConfig":
        return cls(
            users=d["users"], archetype_count=d["archetype_count"],
            context_windows=d["windows"]["context"], future_windows=d["windows"]["future"],
            background_mix=d.get("background_mix", 0.3),
            scenarios=[DemandSpec.from_json(s) for s in d["scenarios"]],
            categorical=[(c["name"], c["cardinality"]) for c in d["schema"]["categorical"]],
            continuous=list(d["schema"]["continuous"]),
        )


@dataclass
class World:
    config: WorldConfig
    users: list[UserRecord]
    seed: int

    @property
    def demands(self) -> list[DemandSpec]:
        return self.config.scenarios

    def demand(self, scenario_id: str) -> DemandSpec:
        for s in self.config.scenarios:
            if s.scenario_id == scenario_id:
                return s
        raise ConfigError(f"unknown scenario {scenario_id!r}")

    def labels_for(self, scenario_id: str) -> np.ndarray:
        return np.array([u.labels[scenario_id] for u in self.users], dtype=np.int64)

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg = self.config.to_json()
        cfg["seed"] = self.seed
        (out / "world_config.json").write_text(json.dumps(cfg, indent=2))
        with open(out / "users.jsonl", "w") as fh:
            for u in self.users:
                fh.write(json.dumps(u.to_json(), sort_keys=True) + "\n")
        with open(out / "demands.jsonl", "w") as fh:
            for s in self.config.scenarios:
                fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, in_dir) -> "World":
        src = Path(in_dir)
        cfg = json.loads((src / "world_config.json").read_text())
        config = WorldConfig.from_json(cfg)
        users = []
        with open(src / "users.jsonl") as fh:
            for line in fh:
                users.append(UserRecord.from_json(json.loads(line)))
        return cls(config=config, users=users, seed=cfg.get("seed", 0))


def _weighted_choice(rng: np.random.Generator, dist: dict[str, float]) -> str:
    keys = list(dist.keys())
    probs = np.array([dist[k] for k in keys])
    return keys[rng.choice(len(keys), p=probs / probs.sum())]


def _phase_dist(dists: list[dict[str, float]], phase: int) -> dict[str, float]:
    return dists[phase % len(dists)]


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def generate_world(config: WorldConfig, seed: int) -> World:
    """Deterministic world generation; validates realized scenario rates."""
    archetypes = presets.default_archetypes()
    if not 2 <= config.archetype_count <= len(archetypes):
        raise ConfigError(f"archetype count must be in [2, {len(archetypes)}]")
    archetypes = archetypes[: config.archetype_count]
    if config.users < 2 * len(archetypes):
        raise ConfigError(f"need at least {2 * len(archetypes)} users for {len(archetypes)} archetypes")
    if not config.scenarios:
        raise ConfigError("world needs at least one scenario")

    # Latent-driven scenario biases solved so expected rates hit the configured targets.
    credit_bias = solve_window_bias(_target(config, "browse"), config.future_windows) \
        if _has_kind(config, "browse") else None
    car_bias = solve_window_bias(_target(config, "search"), config.future_windows) \
        if _has_kind(config, "search") else None

    users = []
    for uid in range(config.users):
        users.append(_generate_user(uid, config, archetypes, seed, credit_bias, car_bias))

    _validate_rates(config, users)
    return World(config=config, users=users, seed=seed)


def _has_kind(config: WorldConfig, kind: str) -> bool:
    return any(s.predicate["kind"] == kind for s in config.scenarios)


def _target(config: WorldConfig, kind: str) -> float:
    for s in config.scenarios:
        if s.predicate["kind"] == kind:
            return s.base_rate
    raise ConfigError(f"no scenario with predicate kind {kind!r}")


def _generate_user(uid: int, config: WorldConfig, archetypes: list[Archetype], seed: int,
                   credit_bias: float | None, car_bias: float | None) -> UserRecord:
    rng = np.random.default_rng([seed, uid])
    arch = archetypes[int(rng.integers(len(archetypes)))]
    u_tab = float(rng.standard_normal())
    u_search = float(rng.standard_normal())
    u_aux = float(rng.standard_normal())
    spend_mult = float(np.exp(0.45 * rng.standard_normal()))

    credit_q = _sigmoid(LATENT_SLOPE * u_tab + credit_bias) if credit_bias is not None else 0.0
    car_q = _sigmoid(LATENT_SLOPE * u_search + car_bias) if car_bias is not None else 0.0
    car_hist_q = _sigmoid(LATENT_SLOPE * u_search + car_bias + SEARCH_HISTORY_BIAS) \
        if car_bias is not None else 0.0
    # Persistent personal search habits: the same few queries recur across
    # past and future windows, so search text is informative about identity.
    favorites = [GENERIC_QUERIES[i] for i in
                 rng.choice(len(GENERIC_QUERIES), size=2, replace=False)]

    events: list[Event] = []
    for w in range(1, config.total_windows + 1):
        arch_eff = arch
        if rng.random() < arch.drift_prob and len(archetypes) > 1:
            others = [a for a in archetypes if a.id != arch.id]
            arch_eff = others[int(rng.integers(len(others)))]
        phase = (w - 1) % arch_eff.cycle

        # Scenario-driven events first: their tokens lead the rendered lists.
        if credit_bias is not None and w > config.context_windows and rng.random() < credit_q:
            events.append(Event(window=w, modality="miniprogram", program=CREDIT_PROGRAM))
        if car_bias is not None:
            prob = car_hist_q if w <= config.context_windows else car_q
            if rng.random() < prob:
                q = CAR_QUERIES[int(rng.integers(len(CAR_QUERIES)))]
                events.append(Event(window=w, modality="search", query=q))

        n_pay = 1 + min(int(rng.poisson(1.0)), 3)
        for _ in range(n_pay):
            if rng.random() < config.background_mix:
                item = _weighted_choice(rng, BACKGROUND_ITEMS)
                merchant = _weighted_choice(rng, BACKGROUND_MERCHANTS)
            else:
                item = _weighted_choice(rng, _phase_dist(arch_eff.items, phase))
                merchant = _weighted_choice(rng, _phase_dist(arch_eff.merchants, phase))
            category = ITEM_CATEGORIES[item]
            mu, sigma = AMOUNT_PARAMS[category]
            amount = round(spend_mult * float(rng.lognormal(mu, sigma)), 2)
            channel = _weighted_choice(rng, arch.channels)
            success = bool(rng.random() < 0.93)
            events.append(Event(window=w, modality="paybill", merchant=merchant, item=item,
                                category=category, amount=amount, channel=channel,
                                success=success))

        n_page = 1 + min(int(rng.poisson(1.3)), 4)
        for _ in range(n_page):
            source = BACKGROUND_PAGES if rng.random() < config.background_mix \
                else _phase_dist(arch_eff.pages, phase)
            events.append(Event(window=w, modality="spm", page=_weighted_choice(rng, source)))

        n_prog = min(int(rng.poisson(1.1)), 3)
        for _ in range(n_prog):
            source = BACKGROUND_PROGRAMS if rng.random() < config.background_mix \
                else _phase_dist(arch_eff.programs, phase)
            events.append(Event(window=w, modality="miniprogram",
                                program=_weighted_choice(rng, source)))

        if rng.random() < 0.4:
            if rng.random() < 0.8:
                q = favorites[int(rng.integers(len(favorites)))]
            else:
                q = GENERIC_QUERIES[int(rng.integers(len(GENERIC_QUERIES)))]
            events.append(Event(window=w, modality="search", query=q))

    tabular = _tabular_row(config, u_tab, u_aux, rng)
    t1_queries = [e.query for e in events
                  if e.modality == "search" and e.window <= config.context_windows]
    search_text = " ".join(t1_queries)
    future = [e for e in events if e.window > config.context_windows]
    description = render_description(future)

    record = UserRecord(
        user_id=uid, archetype=arch.id,
        latents={"u_tab": u_tab, "u_search": u_search, "u_aux": u_aux,
                 "spend_mult": spend_mult},
        events=events, tabular=tabular, search_text=search_text,
        description=description, labels={},
    )
    record.labels = {s.scenario_id: derive_label(record, s, config.context_windows + 1)
                     for s in config.scenarios}
    return record


def _tabular_row(config: WorldConfig, u_tab: float, u_aux: float,
                 rng: np.random.Generator) -> TabularRow:
    noise = lambda: float(rng.standard_normal())
    raw = {
        "wealth_band": (u_tab + 0.5 * noise()) / math.sqrt(1.25),
        "activity_band": (u_tab + 0.7 * noise()) / math.sqrt(1.49),
        "device_tier": (u_tab + 0.9 * noise()) / math.sqrt(1.81),
        "age_band": (u_aux + 0.5 * noise()) / math.sqrt(1.25),
        "city_tier": (u_aux + 0.8 * noise()) / math.sqrt(1.64),
        "channel_pref": (u_aux + 1.0 * noise()) / math.sqrt(2.0),
    }
    cat = {}
    for name, card in config.categorical:
        if name not in raw:
            raise ConfigError(f"no generator rule for categorical column {name!r}")
        cat[name] = bucketize(raw[name], card)
    cont_raw = {
        "balance_score": 1.1 * u_tab + 0.45 * noise(),
        "txn_volume": 0.9 * u_tab + 0.5 * noise(),
        "tenure_years": u_aux + 0.45 * noise(),
        "session_rate": 0.8 * u_aux + 0.5 * noise(),
    }
    cont = {}
    for name in config.continuous:
        if name not in cont_raw:
            raise ConfigError(f"no generator rule for continuous column {name!r}")
        cont[name] = round(cont_raw[name], 6)
    return TabularRow(cat=cat, cont=cont)


def _validate_rates(config: WorldConfig, users: list[UserRecord]):
    n = len(users)
    for s in config.scenarios:
        positives = sum(u.labels[s.scenario_id] for u in users)
        if positives == 0:
            raise ConfigError(f"scenario {s.scenario_id!r} has zero positives under this config")
        # Below ~2000 users the binomial noise alone exceeds the 20% band at
        # the ~2 sigma level, so the guarantee is only enforced above it.
        if n >= 2000:
            realized = positives / n
            if abs(realized - s.base_rate) > 0.2 * s.base_rate:
                raise ConfigError(
                    f"scenario {s.scenario_id!r}: realized rate {realized:.4f} deviates more "
                    f"than 20% from configured {s.base_rate:.4f}")


def split_dataset(users: list[UserRecord], ratios, seed: int, scenario_id: str | None = None,
                  strict: bool = True) -> tuple[list[UserRecord], ...]:
    """Deterministic stratified split.

    Strata are label values for one scenario when `scenario_id` is given,
    otherwise joint label tuples across all scenarios. With `strict`, a
    stratum smaller than the number of parts is a config error; the pipeline
    passes strict=False to spread such remnants round-robin instead.
    """
    ratios = list(ratios)
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be positive and sum to 1, got {ratios}")
    parts: list[list[UserRecord]] = [[] for _ in ratios]

    def stratum_key(u: UserRecord):
        if scenario_id is not None:
            return (u.labels[scenario_id],)
        return tuple(u.labels[k] for k in sorted(u.labels))

    strata: dict[tuple, list[UserRecord]] = {}
    for u in sorted(users, key=lambda u: u.user_id):
        strata.setdefault(stratum_key(u), []).append(u)

    rng = np.random.default_rng([seed, 0x5B117])
    spill = 0
    for key in sorted(strata):
        members = strata[key]
        order = rng.permutation(len(members))
        members = [members[i] for i in order]
        if len(members) < len(ratios):
            if strict:
                raise ConfigError(
                    f"stratum {key} has {len(members)} members, fewer than {len(ratios)} parts")
            for u in members:
                parts[spill % len(ratios)].append(u)
                spill += 1
            continue
        # Largest-remainder allocation of this stratum across the parts.
        exact = [r * len(members) for r in ratios]
        counts = [int(math.floor(x)) for x in exact]
        remainders = sorted(range(len(ratios)), key=lambda i: (exact[i] - counts[i], i),
                            reverse=True)
        short = len(members) - sum(counts)
        for i in remainders[:short]:
            counts[i] += 1
        pos = 0
        for i, c in enumerate(counts):
            parts[i].extend(members[pos:pos + c])
            pos += c
    for p in parts:
        p.sort(key=lambda u: u.user_id)
    return tuple(parts)
