"""Template-generated single-intent utterances in the style of voice-assistant corpora.

Used to build toy training sets and builder sources. Everything is driven
by an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import numpy as np

from .grammar import Span, TargetSequence, Utterance

SLOT_VALUES = {
    "track": ["got the time", "yellow", "hey jude", "blue in green", "so what"],
    "artist": ["miles davis", "adele", "the beatles", "nina simone"],
    "genre": ["jazz", "blues", "pop", "latin pop"],
    "entity_name": ["my hands", "this song", "ramy ayach", "the new single"],
    "playlist": ["travelling", "evening commute", "latin pop rising", "tgif"],
    "object_type": ["book", "album", "movie", "song"],
    "object_name": ["the hobbit", "dune", "blue train", "kind of blue"],
    "rating_value": ["one", "three", "five"],
    "party_size": ["two", "four", "six people"],
    "restaurant_name": ["the pub", "chez marie", "blue bird"],
    "restaurant_type": ["bistro", "sushi bar", "steakhouse"],
    "city": ["boston", "aurora", "new york", "denver"],
    "time_range": ["tomorrow", "tonight", "next week"],
    "movie_name": ["alien", "jaws", "the matrix"],
    "location_name": ["the regal", "central cinema", "amc"],
}

TEMPLATES = {
    "PlayMusic": [
        "play {track} by {artist}",
        "please play {track}",
        "i want to hear some {genre}",
    ],
    "AddToPlaylist": [
        "add {entity_name} to {playlist} playlist",
        "put {entity_name} on my {playlist} list",
    ],
    "SearchCreativeWork": [
        "find the {object_type} called {object_name}",
        "search for {object_name}",
    ],
    "RateBook": [
        "rate {object_name} {rating_value} stars",
        "give {object_name} a rating of {rating_value}",
    ],
    "BookRestaurant": [
        "book a table for {party_size} at {restaurant_name}",
        "reserve a {restaurant_type} in {city} {time_range}",
    ],
    "GetWeather": [
        "what is the weather in {city}",
        "will it rain in {city} {time_range}",
    ],
    "SearchScreeningEvent": [
        "find movie times for {movie_name} at {location_name}",
        "when is {movie_name} showing {time_range}",
    ],
}

# Intent clusters used for biased affinity tables: related within, unrelated across.
CLUSTERS = [
    ("PlayMusic", "AddToPlaylist", "SearchCreativeWork", "RateBook"),
    ("BookRestaurant", "GetWeather", "SearchScreeningEvent"),
]


def render(intent: str, template: str, rng: np.random.Generator) -> Utterance:
    tokens, tags = [], []
    for piece in template.split():
        if piece.startswith("{") and piece.endswith("}"):
            slot = piece[1:-1]
            values = SLOT_VALUES[slot]
            words = values[rng.integers(len(values))].split()
            tokens.extend(words)
            tags.extend([f"B-{slot}"] + [f"I-{slot}"] * (len(words) - 1))
        else:
            tokens.append(piece)
            tags.append("O")
    return Utterance(tokens, tags, [intent])


def single_intent_corpus(n: int, rng: np.random.Generator, intents=None) -> list[Utterance]:
    """``n`` utterances cycling through ``intents`` so that classes stay balanced."""
    intents = list(intents or TEMPLATES)
    out = []
    for i in range(n):
        intent = intents[i % len(intents)]
        templates = TEMPLATES[intent]
        out.append(render(intent, templates[rng.integers(len(templates))], rng))
    order = rng.permutation(n)
    return [out[i] for i in order]


def clustered_affinity(high: float = 0.9, low: float = 0.1) -> dict[tuple[str, str], float]:
    table = {}
    names = list(TEMPLATES)
    cluster_of = {name: k for k, members in enumerate(CLUSTERS) for name in members}
    for a in names:
        for b in names:
            if a != b:
                table[(a, b)] = high if cluster_of[a] == cluster_of[b] else low
    return table


def random_target(n_tokens: int, vocab, rng: np.random.Generator, max_intents: int = 3,
                  max_slots: int = 4) -> TargetSequence:
    """Random valid annotation: distinct intents, sorted non-overlapping (possibly adjacent) spans."""
    k = int(rng.integers(1, min(max_intents, len(vocab.intents)) + 1))
    intents = tuple(vocab.intents[i] for i in rng.choice(len(vocab.intents), size=k, replace=False))
    n_slots = int(rng.integers(0, min(max_slots, n_tokens) + 1)) if vocab.slots else 0
    cuts = np.sort(rng.integers(0, n_tokens + 1, size=2 * n_slots))
    slots = []
    for s, e in zip(cuts[0::2], cuts[1::2]):
        if s < e:
            slots.append(Span(int(s), int(e), vocab.slots[int(rng.integers(len(vocab.slots)))]))
    return TargetSequence(intents, tuple(slots))
