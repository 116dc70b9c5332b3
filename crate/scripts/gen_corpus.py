"""Generate the bundled English-like training corpus.

Sentences come from a small probabilistic grammar, so the text has real
word, phrase and punctuation structure while staying license-free and
reproducible. Usage: python3 scripts/gen_corpus.py [out] [bytes]
"""

import random
import sys

NOUNS = """river garden teacher window engine market village letter kitchen
student doctor forest harbor mountain bridge castle farmer painter sailor
station library machine question answer morning evening winter summer
journey story friend stranger captain merchant child mother father sister
brother king queen soldier bird horse dog cat apple bread candle lamp
road wall door table chair book paper clock bell ship island storm cloud
field stone fire water light shadow voice song dream city house""".split()

VERBS = [("see", "saw"), ("find", "found"), ("carry", "carried"), ("watch", "watched"),
         ("build", "built"), ("follow", "followed"), ("open", "opened"), ("remember", "remembered"),
         ("help", "helped"), ("paint", "painted"), ("visit", "visited"), ("leave", "left"),
         ("hear", "heard"), ("bring", "brought"), ("keep", "kept"), ("call", "called"),
         ("write", "wrote"), ("read", "read"), ("move", "moved"), ("love", "loved")]

INTRANS = [("wait", "waited"), ("sleep", "slept"), ("sing", "sang"), ("walk", "walked"),
           ("laugh", "laughed"), ("arrive", "arrived"), ("rest", "rested"), ("wander", "wandered")]

ADJS = """old young quiet bright dark small large gentle cold warm tired
careful strange famous golden silver broken empty heavy distant green
red simple ancient narrow""".split()

ADVS = "slowly quickly quietly often never always carefully suddenly again soon".split()
PREPS = "near behind under over beside across through toward past into".split()
NAMES = "Anna Peter Maria Thomas Clara Henry Lucy Martin Elena Oliver".split()
TIMES = ["in the morning", "at night", "before dawn", "after the rain", "every day",
         "in the winter", "on Sunday", "for a long time", "at last", "that evening"]
CONJ = ["and", "but", "so", "because", "while", "when"]


def np(r):
    if r.random() < 0.15:
        return r.choice(NAMES)
    det = r.choice(["the", "the", "a", "his", "her", "their", "every", "that"])
    n = r.choice(NOUNS)
    if det == "a" and n[0] in "aeiou":
        det = "an"
    words = [det]
    if r.random() < 0.45:
        adj = r.choice(ADJS)
        if det == "an" and adj[0] not in "aeiou":
            words[0] = "a"
        elif det == "a" and adj[0] in "aeiou":
            words[0] = "an"
        words.append(adj)
    words.append(n)
    if r.random() < 0.12:
        words += [r.choice(PREPS), np(r)]
    return " ".join(words)


def clause(r):
    subj = np(r)
    parts = [subj]
    if r.random() < 0.2:
        parts.append(r.choice(ADVS))
    if r.random() < 0.65:
        v = r.choice(VERBS)
        form = r.choice([v[1], v[1], "will " + v[0], "could " + v[0]])
        parts += [form, np(r)]
    else:
        v = r.choice(INTRANS)
        parts.append(r.choice([v[1], v[1], "would " + v[0]]))
        if r.random() < 0.5:
            parts += [r.choice(PREPS), np(r)]
    if r.random() < 0.3:
        parts.append(r.choice(TIMES))
    return " ".join(parts)


def sentence(r):
    s = clause(r)
    if r.random() < 0.35:
        s += ("," if r.random() < 0.5 else "") + " " + r.choice(CONJ) + " " + clause(r)
    if r.random() < 0.08:
        return '"' + s[0].upper() + s[1:] + '?" asked ' + r.choice(NAMES) + "."
    return s[0].upper() + s[1:] + "."


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/corpus.txt"
    target = int(sys.argv[2]) if len(sys.argv) > 2 else 1_000_000
    r = random.Random(20240611)
    chunks, size = [], 0
    while size < target:
        para = " ".join(sentence(r) for _ in range(r.randint(3, 8))) + "\n\n"
        chunks.append(para)
        size += len(para)
    text = "".join(chunks)[:target]
    with open(out, "w", encoding="ascii") as f:
        f.write(text)


if __name__ == "__main__":
    main()
