import math
import re
import sys

K1 = 1.2
B = 0.75


def tokenize(text):
    return [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t]


def rank(lines, query):
    docs = [tokenize(line) for line in lines]
    n = len(docs)
    avgdl = sum(len(d) for d in docs) / n
    scores = []
    for doc in docs:
        score = 0.0
        for term in tokenize(query):
            df = sum(1 for d in docs if term in d)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            tf = doc.count(term)
            score += idf * tf * (K1 + 1) / (tf + K1 * (1 - B + B * len(doc) / avgdl))
        scores.append(score)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return [(i + 1, scores[i]) for i in order]


def main():
    if len(sys.argv) != 3:
        print("usage: python3 bm25.py <file> <query>")
        return 1
    with open(sys.argv[1], encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f]
    for line_id, score in rank(lines, sys.argv[2]):
        print(f"{line_id}\t{score:.4f}\t{lines[line_id - 1]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
