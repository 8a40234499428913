"""Bundled vocabulary for synthetic pretraining pairs.

Common lowercase English words, split into a training set used to build the
contrastive corpus and a held-out set reserved for retrieval measurements.
The split is positional and fixed, so corpus membership is reproducible.
"""

from __future__ import annotations

import numpy as np

# fmt: off
WORDS = (
    "time", "year", "people", "way", "day", "man", "thing", "woman", "life",
    "child", "world", "school", "state", "family", "student", "group",
    "country", "problem", "hand", "part", "place", "case", "week", "company",
    "system", "program", "question", "work", "number", "night", "point",
    "home", "water", "room", "mother", "area", "money", "story", "fact",
    "month", "lot", "right", "study", "book", "eye", "job", "word", "issue",
    "side", "kind", "head", "house", "service", "friend", "father", "power",
    "hour", "game", "line", "end", "member", "law", "car", "city", "name",
    "team", "minute", "idea", "body", "back", "parent", "face", "others",
    "level", "office", "door", "health", "person", "art", "war", "history",
    "party", "result", "change", "morning", "reason", "girl", "guy",
    "moment", "air", "teacher", "force", "education", "foot", "boy", "age",
    "policy", "process", "music", "market", "sense", "nation", "plan",
    "college", "interest", "death", "course", "someone", "control",
    "knowledge", "voice", "wife", "whole", "police", "mind", "price",
    "report", "decision", "son", "view", "relation", "town", "road", "arm",
    "difference", "value", "building", "action", "model", "season",
    "society", "tax", "director", "position", "player", "record", "paper",
    "space", "ground", "form", "event", "official", "matter", "center",
    "couple", "site", "project", "activity", "star", "table", "need",
    "court", "american", "oil", "situation", "cost", "industry", "figure",
    "street", "image", "phone", "data", "picture", "practice", "piece",
    "land", "product", "doctor", "wall", "patient", "worker", "news",
    "test", "movie", "north", "love", "support", "technology", "step",
    "baby", "computer", "type", "attention", "film", "tree", "source",
    "kid", "leader", "light", "rate", "drug", "show", "risk",
    "maybe", "heart", "stage", "blood", "letter", "effort", "sport",
    "board", "glass", "answer", "east", "animal", "factor", "growth",
    "west", "food", "defense", "truth", "top", "card", "amount", "manager",
    "energy", "south", "section", "cell", "hair", "fire", "summer", "hotel",
    "wind", "bank", "future", "garden", "sister", "note",
    "trade", "science", "bridge", "field", "trip", "theory", "choice",
    "river", "effect", "box", "mouth", "dark", "chance", "unit", "song",
    "bird", "dream", "island", "travel", "goal", "dinner", "demand",
    "color", "stone", "desk", "horse", "winter", "peace", "shape", "gold",
    "stock", "wood", "text", "baseball", "camera", "forest", "skill",
    "window", "floor", "brother", "train", "fish", "cloud", "storm",
    "plant", "beach", "sound", "speech", "sleep", "advice", "design",
    "doubt", "engine", "mirror", "palace", "pencil", "planet", "pocket",
    "prince", "quiet", "radio", "rhythm", "saddle", "salad", "shadow",
    "shelf", "signal", "silver", "smile", "snake", "spring", "square",
    "string", "sugar", "sunset", "sweater", "temple", "throat", "tongue",
    "turtle", "valley", "velvet", "violin", "weather", "wheel", "whisper",
    "yellow", "zebra", "anchor", "basket", "bottle", "butter", "candle",
    "carpet", "castle", "circle", "copper", "corner", "cotton", "curtain",
    "dragon", "feather", "finger", "flower", "orange", "guitar", "hammer",
    "helmet", "honey", "jacket", "jungle", "kitchen", "ladder", "lantern",
    "lemon", "marble", "meadow", "needle",
)
# fmt: on

HELDOUT_COUNT = 64


def train_words() -> tuple:
    return WORDS[:-HELDOUT_COUNT]


def heldout_words() -> tuple:
    return WORDS[-HELDOUT_COUNT:]


def sample_phrase(rng: np.random.Generator, words=None,
                  min_words: int = 1, max_words: int = 3) -> str:
    """Draw a space-joined phrase of min..max words (inclusive) from `words`."""
    if words is None:
        words = train_words()
    count = int(rng.integers(min_words, max_words + 1))
    picks = [words[int(i)] for i in rng.integers(0, len(words), size=count)]
    return " ".join(picks)
