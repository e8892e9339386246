"""Templated synthetic news corpus with planted entities.

Each article plants a two-word person entity that opens both the body
and the reference headline. Because the entity is derivable from the
article alone, generation quality has a mechanical oracle: does any
generated headline for a held-out article contain the planted entity?
Articles draw template parts from small closed sets, so a desk-scale
model can learn the corpus in minutes, while a fraction of untitled
and non-news records keeps the corpus filtering path honest.
"""

from __future__ import annotations

import random
from typing import Sequence

from .corpus import ArticleRecord

FIRST_NAMES = (
    "Aino", "Eero", "Helmi", "Ilkka", "Kaisa", "Lauri",
    "Mikko", "Noora", "Oskari", "Panu", "Sanni", "Veera",
)
SURNAMES = (
    "Korhonen", "Virtanen", "Mäkinen", "Nieminen", "Laine", "Heikkinen",
    "Koskinen", "Järvinen", "Lehtonen", "Salminen", "Tuominen", "Rantanen",
)
CITIES = (
    "Helsingissä", "Tampereella", "Turussa", "Oulussa",
    "Kuopiossa", "Lahdessa", "Porissa", "Vaasassa",
    "Joensuussa", "Espoossa", "Mikkelissä", "Rovaniemellä",
)
# (past tense for the body, present tense for the headline)
ACTIONS = (
    ("avasi uuden tehtaan", "avaa tehtaan"),
    ("julkisti suuren hankkeen", "julkistaa hankkeen"),
    ("voitti palkinnon", "voittaa palkinnon"),
    ("esitteli raportin", "esittelee raportin"),
    ("käynnisti kampanjan", "käynnistää kampanjan"),
    ("lopetti sopimuksen", "lopettaa sopimuksen"),
    ("rahoitti tutkimuksen", "rahoittaa tutkimuksen"),
    ("perusti säätiön", "perustaa säätiön"),
    ("myi yhtiönsä", "myy yhtiönsä"),
    ("osti kiinteistön", "ostaa kiinteistön"),
    ("palkkasi sata työntekijää", "palkkaa työntekijöitä"),
    ("uudisti palvelunsa", "uudistaa palvelunsa"),
)
WEEKDAYS = (
    "maanantaina", "tiistaina", "keskiviikkona", "torstaina",
    "perjantaina", "lauantaina", "sunnuntaina",
)
MONTHS = (
    "tammikuussa", "helmikuussa", "maaliskuussa",
    "huhtikuussa", "toukokuussa", "kesäkuussa",
)

NEWS_BRANDS = ("daily", "sport")
NON_NEWS_BRAND = "shop"
UNTITLED_FRACTION = 0.08
NON_NEWS_FRACTION = 0.08

# The entity is mentioned exactly once. Decoding penalizes a candidate
# token by its occurrence count in the prompt, so a body that repeated
# the name would suppress copying it into the headline.
BODY_TEMPLATE = (
    "{entity} {action_past} {city} {weekday}. "
    "Hanke etenee {month} ja jatkuu ensi vuonna. "
    "Paikalliset kiittivät päätöstä lämpimästi."
)
TITLE_TEMPLATE = "{entity} {action_now} {city}"


def generate(n_articles: int, seed: int = 0) -> list[ArticleRecord]:
    """Deterministic corpus of templated articles.

    Roughly 8% of records carry no title and 8% belong to a non-news
    brand; the rest are titled news articles suitable for fine-tuning.
    """
    if n_articles < 1:
        raise ValueError("n_articles must be >= 1")
    rng = random.Random(seed)
    records: list[ArticleRecord] = []
    for i in range(n_articles):
        entity = f"{rng.choice(FIRST_NAMES)} {rng.choice(SURNAMES)}"
        action_past, action_now = rng.choice(ACTIONS)
        city = rng.choice(CITIES)
        body = BODY_TEMPLATE.format(
            entity=entity, action_past=action_past, city=city,
            weekday=rng.choice(WEEKDAYS), month=rng.choice(MONTHS),
        )
        title: str | None = TITLE_TEMPLATE.format(
            entity=entity, action_now=action_now, city=city,
        )
        brand = rng.choice(NEWS_BRANDS)
        if rng.random() < NON_NEWS_FRACTION:
            brand = NON_NEWS_BRAND
        if rng.random() < UNTITLED_FRACTION:
            title = None
        records.append(ArticleRecord(
            id=f"art{i:05d}", body=body, title=title, brand=brand,
        ))
    return records


def planted_entity(record: ArticleRecord) -> str:
    """The two-word entity every template opens with."""
    parts = record.body.split()
    if len(parts) < 2:
        raise ValueError(f"{record.id}: body too short to carry an entity")
    return f"{parts[0]} {parts[1]}"


def entity_in_headlines(entity: str, headlines: Sequence[str]) -> bool:
    return any(entity in h for h in headlines)
