"""Shared domain records: events, histories, impression groups."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class EventType(Enum):
    CLICK = "click"
    ADD_TO_CART = "add_to_cart"
    ADD_TO_FAVORITES = "add_to_favorites"
    PURCHASE = "purchase"
    WEB_QUERY = "web_query"


EVENT_TYPE_IDS = {t: i for i, t in enumerate(EventType)}

# signal types that carry pairwise ranking losses, strongest last
SIGNALS = ("click", "cart", "fvrt", "prch")

_EVENT_SIGNAL = {
    EventType.CLICK: "click",
    EventType.ADD_TO_CART: "cart",
    EventType.ADD_TO_FAVORITES: "fvrt",
    EventType.PURCHASE: "prch",
}


def signal_of(event_type: EventType) -> str | None:
    """Ranking signal name for an event type; None for web queries."""
    return _EVENT_SIGNAL.get(event_type)


@dataclass(frozen=True)
class Event:
    """One timestamped user interaction."""

    day: int
    event_type: EventType
    text: str
    item_id: int | None = None
    surface_id: int | None = None

    def __post_init__(self):
        if self.event_type is EventType.WEB_QUERY:
            if self.item_id is not None:
                raise ValueError("web_query events carry no item_id")
        else:
            if self.item_id is None or not self.text:
                raise ValueError(f"{self.event_type.value} events need item_id and title")


@dataclass
class UserHistory:
    """Chronologically ascending events, truncated to the most recent."""

    user_id: int
    events: list[Event] = field(default_factory=list)

    def __post_init__(self):
        days = [e.day for e in self.events]
        if any(a > b for a, b in zip(days, days[1:])):
            raise ValueError("history events must be non-decreasing in time")

    def truncated(self, max_history: int) -> "UserHistory":
        return UserHistory(self.user_id, self.events[-max_history:])


@dataclass(frozen=True)
class ContextFeatures:
    surface_id: int
    device_id: int


@dataclass
class ImpressionGroup:
    """Co-impressed items on one surface with per-signal binary labels."""

    user_id: int
    day: int
    surface_id: int
    device_id: int
    item_ids: list[int]
    labels: dict[str, list[int]]  # signal -> 0/1 per item
    history: UserHistory | None = None

    def positives(self, signal: str) -> list[int]:
        return [i for i, y in enumerate(self.labels[signal]) if y]

    def has_positive(self) -> bool:
        return any(any(self.labels[s]) for s in SIGNALS)


@dataclass
class PretrainSample:
    """One positive interaction with the user's delayed history."""

    user_id: int
    day: int
    item_id: int
    signal: str
    history: UserHistory
