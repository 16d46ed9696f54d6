"""Sentence templates for behavior descriptions.

Five categories (purchase, browsing, search, click, payment channel) render
one sentence each from future-window events; the same builders render
canonicalized demand queries. Every rendered sentence parses back under
`parse_description`, recovering the placeholder values.
"""

from __future__ import annotations

import math
import re

NO_ACTIVITY_SENTENCE = "The user had no recorded activity."

_CATEGORY_ORDER = ("purchase", "browse", "search", "click", "channel")

_PATTERNS = {
    "purchase": re.compile(
        r"The user purchased (?P<items>.+?), etc\."
        r"(?:, amounting to more than \$(?P<num>[\d,]+))?"
        r" with (?P<status>successful|failed) payment\."),
    "browse": re.compile(r"The user browsed mini programs such as (?P<programs>.+?), etc\."),
    "search": re.compile(r"The user searched for (?P<terms>.+?), etc\."),
    "click": re.compile(r"The user clicked on pages such as (?P<pages>.+?), etc\."),
    "channel": re.compile(r"The user paid mainly through (?P<channels>.+?), etc\."),
}


def round_threshold(total: float) -> int:
    """Largest one-significant-figure number strictly below `total`."""
    if total <= 1:
        return 0
    magnitude = 10 ** math.floor(math.log10(total))
    lead = math.floor(total / magnitude)
    value = lead * magnitude
    if value >= total:
        value = 9 * (magnitude // 10) if lead == 1 and magnitude >= 10 else value - magnitude
    return int(value)


def _join(values: list[str], limit: int = 3) -> str:
    distinct: list[str] = []
    for v in values:
        if v and v not in distinct:
            distinct.append(v)
        if len(distinct) == limit:
            break
    return ", ".join(distinct)


def render_purchase(items: list[str], amount: float | None, successful: bool,
                    threshold: int | None = None) -> str:
    """Amount totals are rounded down to one significant figure; an explicit
    `threshold` (from a parsed demand) is used verbatim instead."""
    status = "successful" if successful else "failed"
    head = f"The user purchased {_join(items)}, etc."
    if threshold is None and amount is None:
        return f"{head} with {status} payment."
    bound = threshold if threshold is not None else round_threshold(amount)
    return f"{head}, amounting to more than ${bound:,} with {status} payment."


def render_browse(programs: list[str]) -> str:
    return f"The user browsed mini programs such as {_join(programs)}, etc."


def render_search(terms: list[str]) -> str:
    return f"The user searched for {_join(terms)}, etc."


def render_click(pages: list[str]) -> str:
    return f"The user clicked on pages such as {_join(pages)}, etc."


def render_channel(channels: list[str]) -> str:
    return f"The user paid mainly through {_join(channels)}, etc."


def render_description_parts(future_events) -> dict[str, str]:
    """Per-category sentences for the applicable categories, keyed by name."""
    events = list(future_events)
    parts: dict[str, str] = {}
    purchases = [e for e in events if e.modality == "paybill"]
    if purchases:
        total = sum(e.amount for e in purchases)
        ok = sum(1 for e in purchases if e.success) >= (len(purchases) + 1) // 2
        parts["purchase"] = render_purchase([e.item for e in purchases], total, ok)
    programs = [e.program for e in events if e.modality == "miniprogram"]
    if programs:
        parts["browse"] = render_browse(programs)
    queries = [e.query for e in events if e.modality == "search"]
    if queries:
        parts["search"] = render_search(queries)
    pages = [e.page for e in events if e.modality == "spm"]
    if pages:
        parts["click"] = render_click(pages)
    channels = [e.channel for e in events if e.modality == "paybill"]
    if channels:
        parts["channel"] = render_channel(channels)
    return parts


def render_description(future_events, templates=None) -> str:
    """One sentence per applicable category, in fixed category order.

    `future_events` must all come from future windows; an empty list renders
    the fixed no-activity sentence so alignment batches stay total.
    """
    parts = render_description_parts(future_events)
    if not parts:
        return NO_ACTIVITY_SENTENCE
    return " ".join(parts[name] for name in _CATEGORY_ORDER if name in parts)


def parse_description(text: str) -> dict:
    """Recover placeholder values from a rendered description.

    Returns {} for text that matches no template (including the no-activity
    sentence, which carries no placeholders).
    """
    out: dict[str, dict] = {}
    for name in _CATEGORY_ORDER:
        m = _PATTERNS[name].search(text)
        if not m:
            continue
        groups = {k: v for k, v in m.groupdict().items() if v is not None}
        if "num" in groups:
            groups["num"] = int(groups["num"].replace(",", ""))
        for key in ("items", "programs", "terms", "pages", "channels"):
            if key in groups:
                groups[key] = [s.strip() for s in groups[key].split(",")]
        out[name] = groups
    return out


def is_canonical(text: str) -> bool:
    return text == NO_ACTIVITY_SENTENCE or bool(parse_description(text))
