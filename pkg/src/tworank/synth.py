"""Ground-truth generative simulator of an e-commerce platform.

A world holds latent user/item vectors with category structure, a
context-bias table over (surface, device), and templated titles that make
bag-of-subwords content embeddings informative. Logs interleave organic
events, web queries, and impression groups with injected context bias;
the stored latents and bias table let evaluation remove the bias again.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .types import Event, EventType, ImpressionGroup

_ADJECTIVES = [
    "alpha", "bravo", "cobalt", "delta", "ember", "frost", "glint", "harbor",
    "ivory", "jade", "keen", "lunar", "mellow", "noble", "ochre", "prime",
    "quartz", "rustic", "slate", "tidal", "umber", "vivid", "willow", "zephyr",
]
_NOUNS = [
    "anchor", "beacon", "cedar", "drum", "engine", "fiber", "grove", "helix",
    "ingot", "jumper", "kettle", "lantern", "mantle", "needle", "orbit", "panel",
    "quiver", "ridge", "spool", "thicket", "urn", "vessel", "wicker", "yoke",
]
_COMMON = ["classic", "new", "pro", "mini", "set"]


@dataclass
class SynthConfig:
    n_items: int = 2000
    n_users: int = 500
    n_categories: int = 8
    latent_dim: int = 8
    n_surfaces: int = 4
    n_devices: int = 2
    days: int = 60
    bias_strength: float = 1.0
    relevance_scale: float = 7.0
    click_offset: float = -1.0
    organic_rate: float = 1.2       # expected organic funnels per user-day
    impressions_per_day: float = 1.0
    group_size: int = 6
    query_rate: float = 0.5         # web queries per user-day
    query_lead_days: int = 4        # queries anticipate interest this early
    seed: int = 0

    def validate(self):
        if self.latent_dim < 2 or self.n_categories < 2:
            raise ValueError("need latent_dim >= 2 and >= 2 categories")
        if self.n_surfaces < 2 or self.n_devices < 2:
            raise ValueError("need >= 2 surfaces and >= 2 devices")


@dataclass
class EventRecord:
    user_id: int
    event: Event


LogRecord = EventRecord | ImpressionGroup


@dataclass
class SynthWorld:
    config: SynthConfig
    item_latents: np.ndarray          # (n_items, m)
    item_categories: np.ndarray       # (n_items,) int
    titles: list[str]
    category_words: list[list[str]]
    user_base: np.ndarray             # (n_users, m) personal noise
    user_primary: np.ndarray          # (n_users,) first interest category
    user_secondary: np.ndarray        # (n_users,) post-switch category
    user_switch_day: np.ndarray       # (n_users,) int
    user_device: np.ndarray           # (n_users,) int
    category_centers: np.ndarray      # (n_categories, m)
    bias_table: np.ndarray            # (n_surfaces, n_devices)

    def user_latent(self, user: int, day: int) -> np.ndarray:
        cat = self.user_primary[user] if day < self.user_switch_day[user] else self.user_secondary[user]
        z = self.category_centers[cat] + self.user_base[user]
        return z / np.linalg.norm(z)

    def user_category(self, user: int, day: int) -> int:
        return int(self.user_primary[user] if day < self.user_switch_day[user]
                   else self.user_secondary[user])

    def oracle_relevance(self, user: int, item: int, day: int | None = None) -> float:
        """Context-free ground-truth affinity <z_u, z_i>."""
        if not (0 <= user < self.config.n_users):
            raise KeyError(f"unknown user id {user}")
        if not (0 <= item < self.config.n_items):
            raise KeyError(f"unknown item id {item}")
        if day is None:
            day = self.config.days - 1
        return float(self.user_latent(user, day) @ self.item_latents[item])

    def title_corpus(self) -> list[str]:
        lines = list(self.titles)
        for words in self.category_words:
            lines.append(" ".join(words))
        return lines


def generate_world(config: SynthConfig) -> SynthWorld:
    """Deterministic world construction from config.seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    m, C = config.latent_dim, config.n_categories

    centers = rng.normal(size=(C, m))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    item_categories = rng.integers(0, C, size=config.n_items)

    # category word templates: each category owns a small pool so items in
    # one category share title words
    pool = [f"{a} {n}".split() for a in _ADJECTIVES for n in _NOUNS]
    flat = sorted({w for pair in pool for w in pair})
    perm = rng.permutation(len(flat))
    per_cat = max(4, len(flat) // C)
    category_words = []
    for c in range(C):
        lo = (c * per_cat) % len(flat)
        idx = [perm[(lo + i) % len(flat)] for i in range(per_cat)]
        category_words.append([flat[i] for i in idx])

    # every category word carries its own latent direction near the
    # category center; an item's latent is the normalized mean of its
    # title words' vectors, so relevance is learnable from titles down to
    # the within-category level
    word_vectors: dict[str, np.ndarray] = {}
    for c in range(C):
        for w in category_words[c]:
            v = centers[c] + 1.0 * rng.normal(size=m)
            word_vectors[w] = v / np.linalg.norm(v)

    titles = []
    item_latents = np.empty((config.n_items, m))
    for i in range(config.n_items):
        words = category_words[item_categories[i]]
        picks = rng.choice(len(words), size=3, replace=False)
        title_words = [words[j] for j in picks]
        z = np.mean([word_vectors[w] for w in title_words], axis=0)
        item_latents[i] = z / np.linalg.norm(z)
        title = list(title_words)
        title.append(_COMMON[rng.integers(0, len(_COMMON))])
        title.append(f"sku{i % 97}")
        titles.append(" ".join(title))

    user_primary = rng.integers(0, C, size=config.n_users)
    shift = rng.integers(1, C, size=config.n_users)
    user_secondary = (user_primary + shift) % C
    lo, hi = int(config.days * 0.3), max(int(config.days * 0.95), int(config.days * 0.3) + 1)
    user_switch_day = rng.integers(lo, hi, size=config.n_users)
    user_base = 0.25 * rng.normal(size=(config.n_users, m))
    user_device = rng.integers(0, config.n_devices, size=config.n_users)

    # one surface gets a strong positive bias, one a negative one; the rest
    # scale down smoothly. Stored so the oracle can remove it.
    surface_pattern = np.zeros(config.n_surfaces)
    surface_pattern[0] = 1.8
    surface_pattern[1] = -0.6
    for s in range(2, config.n_surfaces):
        surface_pattern[s] = 0.3 * ((-1) ** s)
    device_pattern = np.linspace(-0.2, 0.2, config.n_devices)
    bias_table = config.bias_strength * (surface_pattern[:, None] + device_pattern[None, :])

    return SynthWorld(
        config=config,
        item_latents=item_latents,
        item_categories=item_categories,
        titles=titles,
        category_words=category_words,
        user_base=user_base,
        user_primary=user_primary,
        user_secondary=user_secondary,
        user_switch_day=user_switch_day,
        user_device=user_device,
        category_centers=centers,
        bias_table=bias_table,
    )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _query_text(world: SynthWorld, user: int, day: int, rng) -> str:
    cat = world.user_category(user, min(day + world.config.query_lead_days,
                                        world.config.days - 1))
    words = world.category_words[cat]
    k = 2 if rng.random() < 0.7 else 1
    picks = rng.choice(len(words), size=k, replace=False)
    return " ".join(words[j] for j in picks)


def _items_of_category(world: SynthWorld, cat: int) -> np.ndarray:
    return np.nonzero(world.item_categories == cat)[0]


def _funnel_events(user: int, day: int, item: int, title: str, surface, rng,
                   p_cart=0.3, p_prch=0.35, p_fvrt=0.12):
    """Click plus optional deeper funnel steps, in funnel order."""
    events = [Event(day, EventType.CLICK, title, int(item), surface)]
    signals = {"click": 1, "cart": 0, "fvrt": 0, "prch": 0}
    if rng.random() < p_fvrt:
        events.append(Event(day, EventType.ADD_TO_FAVORITES, title, int(item), surface))
        signals["fvrt"] = 1
    if rng.random() < p_cart:
        events.append(Event(day, EventType.ADD_TO_CART, title, int(item), surface))
        signals["cart"] = 1
        if rng.random() < p_prch:
            events.append(Event(day, EventType.PURCHASE, title, int(item), surface))
            signals["prch"] = 1
    return events, signals


def simulate_logs(world: SynthWorld, days: int | None = None,
                  bias_override: float | None = None) -> list[LogRecord]:
    """Day-ordered stream of organic events, web queries, and impressions.

    `bias_override` replaces the stored bias table scale (0.0 gives
    context-balanced logs, used for fair evaluation sets).
    """
    cfg = world.config
    if days is None:
        days = cfg.days
    if days < 2:
        raise ValueError("need days >= 2")
    rng = np.random.default_rng(cfg.seed + 1)
    if bias_override is None:
        bias = world.bias_table
    elif cfg.bias_strength == 0:
        bias = np.zeros_like(world.bias_table)
    else:
        bias = world.bias_table * (bias_override / cfg.bias_strength)
    records: list[LogRecord] = []
    for day in range(days):
        for user in range(cfg.n_users):
            z_u = world.user_latent(user, day)
            cat = world.user_category(user, day)
            device = int(world.user_device[user])

            # web queries anticipating (near-)future interest
            if rng.random() < cfg.query_rate:
                records.append(EventRecord(user, Event(
                    day, EventType.WEB_QUERY, _query_text(world, user, day, rng))))

            # organic engagement, mostly within the current category
            n_organic = rng.poisson(cfg.organic_rate)
            for _ in range(n_organic):
                if rng.random() < 0.8:
                    cand = _items_of_category(world, cat)
                    item = int(cand[rng.integers(0, len(cand))])
                else:
                    item = int(rng.integers(0, cfg.n_items))
                events, _ = _funnel_events(user, day, item, world.titles[item], None, rng)
                records.extend(EventRecord(user, e) for e in events)

            # impressions with context bias in the labels
            n_imp = rng.poisson(cfg.impressions_per_day)
            for _ in range(n_imp):
                # surfaces correlate with the interest category (category
                # hubs), so label bias is confounded with content unless a
                # model carries an explicit context term
                if rng.random() < 0.7:
                    surface = cat % cfg.n_surfaces
                else:
                    surface = int(rng.integers(0, cfg.n_surfaces))
                b_ctx = float(bias[surface, device])
                in_cat = _items_of_category(world, cat)
                k_rel = max(cfg.group_size - 2, 1)
                rel = rng.choice(in_cat, size=min(k_rel, len(in_cat)), replace=False)
                rest = rng.integers(0, cfg.n_items, size=cfg.group_size - len(rel))
                items = [int(i) for i in np.concatenate([rel, rest])]
                labels = {s: [0] * len(items) for s in ("click", "cart", "fvrt", "prch")}
                for pos, item in enumerate(items):
                    p_click = _sigmoid(cfg.relevance_scale * float(z_u @ world.item_latents[item])
                                       + b_ctx + cfg.click_offset)
                    if rng.random() < p_click:
                        events, signals = _funnel_events(
                            user, day, item, world.titles[item], surface, rng)
                        records.extend(EventRecord(user, e) for e in events)
                        for s, v in signals.items():
                            labels[s][pos] = v
                records.append(ImpressionGroup(
                    user_id=user, day=day, surface_id=surface, device_id=device,
                    item_ids=items, labels=labels))
    return records


def make_balanced_eval_groups(world: SynthWorld, start_day: int, end_day: int,
                              seed: int = 99, groups_per_user: int = 2) -> list[ImpressionGroup]:
    """Context-balanced impression groups for evaluation: labels are drawn
    with the stored bias removed, surfaces assigned round-robin."""
    cfg = world.config
    rng = np.random.default_rng(seed)
    out: list[ImpressionGroup] = []
    for user in range(cfg.n_users):
        switch = int(world.user_switch_day[user])
        for g in range(groups_per_user):
            if g == 0 and start_day <= switch < end_day:
                # evaluate switching users right at their interest change:
                # their new category is still undiscovered there
                day = switch
            else:
                day = int(rng.integers(start_day, end_day))
            z_u = world.user_latent(user, day)
            cat = world.user_category(user, day)
            surface = (user + g) % cfg.n_surfaces
            device = int(world.user_device[user])
            in_cat = _items_of_category(world, cat)
            k_rel = max(cfg.group_size - 2, 1)
            rel = rng.choice(in_cat, size=min(k_rel, len(in_cat)), replace=False)
            rest = rng.integers(0, cfg.n_items, size=cfg.group_size - len(rel))
            items = [int(i) for i in np.concatenate([rel, rest])]
            labels = {s: [0] * len(items) for s in ("click", "cart", "fvrt", "prch")}
            for pos, item in enumerate(items):
                p = _sigmoid(cfg.relevance_scale * float(z_u @ world.item_latents[item])
                             + cfg.click_offset)
                if rng.random() < p:
                    labels["click"][pos] = 1
                    if rng.random() < 0.3:
                        labels["cart"][pos] = 1
            grp = ImpressionGroup(user_id=user, day=day, surface_id=surface,
                                  device_id=device, item_ids=items, labels=labels)
            if grp.has_positive():
                out.append(grp)
    return out


# ---------------------------------------------------------------------------
# log (de)serialization: newline-delimited JSON
# ---------------------------------------------------------------------------


def write_logs(world: SynthWorld, records: list[LogRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item_id, title in enumerate(world.titles):
            fh.write(json.dumps({
                "type": "item", "id": item_id, "title": title,
                "category": int(world.item_categories[item_id]),
            }) + "\n")
        for rec in records:
            if isinstance(rec, EventRecord):
                e = rec.event
                fh.write(json.dumps({
                    "type": "event", "day": e.day, "user": rec.user_id,
                    "event": e.event_type.value, "text": e.text,
                    "item": e.item_id, "surface": e.surface_id,
                }) + "\n")
            else:
                fh.write(json.dumps({
                    "type": "impression", "day": rec.day, "user": rec.user_id,
                    "surface": rec.surface_id, "device": rec.device_id,
                    "items": rec.item_ids, "signals": rec.labels,
                }) + "\n")


def read_logs(path):
    """Returns (catalog: {item_id: (title, category)}, records)."""
    catalog: dict[int, tuple[str, int]] = {}
    records: list[LogRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            kind = obj["type"]
            if kind == "item":
                catalog[obj["id"]] = (obj["title"], obj["category"])
            elif kind == "event":
                records.append(EventRecord(obj["user"], Event(
                    obj["day"], EventType(obj["event"]), obj["text"],
                    obj["item"], obj["surface"])))
            elif kind == "impression":
                records.append(ImpressionGroup(
                    user_id=obj["user"], day=obj["day"], surface_id=obj["surface"],
                    device_id=obj["device"], item_ids=obj["items"], labels=obj["signals"]))
            else:
                raise ValueError(f"unknown log record type {kind!r}")
    return catalog, records
