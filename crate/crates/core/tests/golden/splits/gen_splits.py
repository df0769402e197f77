"""Regenerates the golden split files from a standalone SplitMix64.

Pool: ids item000..item099. Seed 42, 5 splits, 16 validation ids.
Writes kNN.tsv for k = 1..16: `index<TAB>train<TAB>val`, ids comma-joined.
"""
import pathlib

MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def below(self, bound):
        return (self.next() * bound) >> 64


def splits(pool, k, n, val, seed):
    lines = []
    for i in range(n):
        rng = SplitMix64(seed ^ (((i + 1) * 0xD1B54A32D192ED03) & MASK))
        ids = list(pool)
        need = k + val
        for j in range(need):
            r = j + rng.below(len(ids) - j)
            ids[j], ids[r] = ids[r], ids[j]
        lines.append(f"{i}\t{','.join(ids[:k])}\t{','.join(ids[k:need])}\n")
    return "".join(lines)


if __name__ == "__main__":
    here = pathlib.Path(__file__).parent
    pool = [f"item{i:03d}" for i in range(100)]
    for k in range(1, 17):
        (here / f"k{k:02d}.tsv").write_text(splits(pool, k, 5, 16, 42))
