#!/usr/bin/env python3
"""Regenerates the bundled toy corpus and the sentiment TSV.

Usage: python3 scripts/make_toy_data.py  (run from the repository root)

The output is deterministic for a fixed SEED. The corpus mixes short topical
paragraphs (one topic per paragraph) with neutral everyday text so a small LM
learns topic coherence while rarely choosing any single topic on its own.
"""

import random

SEED = 20191204
TARGET_BYTES = 56_000

BOW_PREFIXES = [l.strip() for l in open("data/prefixes/bow.txt") if l.strip()]
DISCRIM_PREFIXES = [l.strip() for l in open("data/prefixes/discrim.txt") if l.strip()]
SKELETON = [l.strip() for l in open("data/prefixes/skeleton.txt") if l.strip()]

GENERAL_STARTERS = ["Yesterday", "Later", "In the end", "At first", "Sometimes", "Today", "Then"]

TOPICS = {
    "science": dict(
        n="experiment research theory energy molecule atom laboratory physics chemistry biology "
          "scientist microscope data hypothesis particle gravity temperature evolution cell telescope".split(),
        v="measured tested studied explained observed predicted changed confirmed".split(),
        a="careful precise new strange simple complex".split(),
    ),
    "space": dict(
        n="planet galaxy orbit spacecraft moon comet star astronaut asteroid satellite universe "
          "meteor spaceship earth".split(),
        v="circled reached crossed approached left orbited lit".split(),
        a="distant bright dark cold vast silent".split(),
    ),
    "military": dict(
        n="army soldier battle weapon enemy tank officer troops navy missile commander attack "
          "fleet war captain sergeant infantry combat".split(),
        v="defended attacked ordered captured crossed destroyed guarded".split(),
        a="brave heavy armed loyal tired fierce".split(),
    ),
    "politics": dict(
        n="government democracy state constitution tax republic liberty authority ideology "
          "legislature referendum diplomacy politics power".split(),
        v="debated approved rejected reformed challenged shaped".split(),
        a="federal public national modern divided strong".split(),
    ),
    "legal": dict(
        n="court judge jury lawyer trial verdict evidence attorney lawsuit witness prison contract "
          "statute defendant".split(),
        v="reviewed questioned heard rejected examined delayed signed".split(),
        a="legal long final formal guilty fair".split(),
    ),
    "computers": dict(
        n="computer software network server database algorithm program keyboard browser kernel "
          "laptop password router memory file programmer".split(),
        v="crashed loaded stored ran updated copied deleted".split(),
        a="fast slow digital old secure broken".split(),
    ),
    "religion": dict(
        n="God Church Faith Prayer Bible Heaven Spirit Temple Priest Soul Angel Scripture".split(),
        v="blessed guided comforted inspired welcomed".split(),
        a="holy sacred quiet ancient humble eternal".split(),
    ),
    "fantasy": dict(
        n="dragon demon ghost monster witch vampire troll unicorn giant fairy ogre zombie".split(),
        v="haunted chased cursed frightened guarded burned".split(),
        a="wicked ancient hungry enormous dark magic".split(),
    ),
}

NEUTRAL = {
    "kitchen": dict(
        n="bread soup pizza potato chicken kitchen table garden apple cheese dinner tea".split(),
        v="cooked served shared carried warmed cut".split(),
        a="fresh hot small green sweet plain".split(),
    ),
    "town": dict(
        n="road city market lake river horse house village bridge street shop park".split(),
        v="passed followed visited painted cleaned built".split(),
        a="old quiet busy narrow wide little".split(),
    ),
    "family": dict(
        n="mother father child friend neighbor teacher sister brother family dog".split(),
        v="called helped met watched visited thanked".split(),
        a="kind young old tired happy patient".split(),
    ),
    "weather": dict(
        n="rain wind sun morning evening winter summer snow cloud storm".split(),
        v="covered followed cooled warmed filled".split(),
        a="early late soft cold warm grey".split(),
    ),
}

REVIEW_OBJECTS = "book movie painting pizza potato chicken city country horse lake road story".split()
POSITIVE = "wonderful brilliant lovely joyful beautiful delightful excellent pleasant charming cheerful".split()
NEGATIVE = "awful terrible dreadful horrible miserable ugly gloomy bitter painful boring".split()
POS_VERBS = "loved enjoyed praised admired".split()
NEG_VERBS = "hated disliked regretted feared".split()


def sentence(rng, topic, starter):
    n, v, a = topic["n"], topic["v"], topic["a"]
    frame = rng.randrange(5)
    if frame == 0:
        body = f"the {rng.choice(a)} {rng.choice(n)} {rng.choice(v)} the {rng.choice(n)} ."
    elif frame == 1:
        body = f"the {rng.choice(n)} and the {rng.choice(n)} {rng.choice(v)} the {rng.choice(a)} {rng.choice(n)} ."
    elif frame == 2:
        body = f"the {rng.choice(n)} of the {rng.choice(n)} {rng.choice(v)} a {rng.choice(a)} {rng.choice(n)} ."
    elif frame == 3:
        body = f"every {rng.choice(n)} {rng.choice(v)} the {rng.choice(n)} near the {rng.choice(n)} ."
    else:
        body = f"a {rng.choice(a)} {rng.choice(n)} {rng.choice(v)} the {rng.choice(n)} and the {rng.choice(n)} ."
    return join(starter, body)


def join(starter, body):
    if starter is None:
        return body[0].upper() + body[1:]
    if starter.endswith((",", ".")) or starter == "Foundational to this is":
        return f"{starter} {body}"
    return f"{starter} , {body}"


def review(rng, sentiment, obj=None):
    obj = obj or rng.choice(REVIEW_OBJECTS)
    words = POSITIVE if sentiment == "positive" else NEGATIVE
    verbs = POS_VERBS if sentiment == "positive" else NEG_VERBS
    frame = rng.randrange(4)
    if frame == 0:
        return f"The {obj} was {rng.choice(words)} and the {rng.choice(REVIEW_OBJECTS)} was {rng.choice(words)} ."
    if frame == 1:
        return f"The {obj} felt {rng.choice(words)} , and everyone {rng.choice(verbs)} the {rng.choice(words)} {rng.choice(REVIEW_OBJECTS)} ."
    if frame == 2:
        return f"The {obj} is {rng.choice(words)} , {rng.choice(words)} and {rng.choice(words)} ."
    return f"The {obj} seemed {rng.choice(words)} , so we {rng.choice(verbs)} it ."


def starter(rng):
    r = rng.random()
    if r < 0.55:
        return rng.choice(BOW_PREFIXES)
    if r < 0.75:
        return rng.choice(GENERAL_STARTERS)
    if r < 0.85:
        return rng.choice(SKELETON)
    return None


def paragraph(rng):
    r = rng.random()
    if r < 0.45:
        topic = TOPICS[rng.choice(sorted(TOPICS))]
    elif r < 0.8:
        topic = NEUTRAL[rng.choice(sorted(NEUTRAL))]
    else:
        sentiment = rng.choice(["positive", "negative"])
        lines = []
        for _ in range(rng.randint(2, 4)):
            p = rng.choice(DISCRIM_PREFIXES)
            if p.startswith("The ") and p.split()[1] in REVIEW_OBJECTS and len(p.split()) == 2:
                lines.append(review(rng, sentiment, p.split()[1]))
            else:
                text = review(rng, sentiment)
                lines.append(f"{p} , " + text[0].lower() + text[1:])
        return " ".join(lines)
    return " ".join(sentence(rng, topic, starter(rng)) for _ in range(rng.randint(3, 5)))


def main():
    rng = random.Random(SEED)
    parts, size = [], 0
    while size < TARGET_BYTES:
        p = paragraph(rng)
        parts.append(p)
        size += len(p) + 2
    with open("data/corpus/toy_corpus.txt", "w") as f:
        f.write("\n\n".join(parts) + "\n")

    rows = []
    for label in ("positive", "negative"):
        for _ in range(150):
            rows.append(f"{label}\t{review(rng, label)}")
    rng.shuffle(rows)
    with open("data/discrim/sentiment_toy.tsv", "w") as f:
        f.write("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
