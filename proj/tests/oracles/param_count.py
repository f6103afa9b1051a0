"""Independent parameter count for the network layout (regression constants)."""
import sys


def conv(i, o, k):
    return k * k * i * o + o


def cbr(i, o):
    return conv(i, o, 3) + 2 * o


def cblock(i, o):
    return cbr(i, o) + cbr(o, o)


def network(enc, bott, agg=16, inp=3, ddpp=True, sa=True):
    total = 0
    prev = inp
    for c in enc:
        total += cbr(prev, c)
        if ddpp:
            total += 3 * conv(c, c, 3)
        if sa:
            total += 2 * cblock(c, c)
        prev = c
    total += cblock(prev, bott)
    below = bott
    for c in reversed(enc):
        merged = below + c
        total += 2 * cblock(merged, c) if sa else cblock(merged, c)
        below = c
    total += sum(2 * conv(c, agg, 1) for c in enc)
    total += sum(conv(c, agg, 1) for c in enc)
    total += conv(agg, agg, 3) + conv(enc[0], agg, 1) + conv(agg, 1, 1)
    return total


if __name__ == "__main__":
    print("cblock(16,64)", cblock(16, 64))
    print("conv3x3 16->64", conv(16, 64, 3))
    for name, kw in [("full", {}), ("sa_only", {"ddpp": False}), ("ddpp_only", {"sa": False})]:
        print(name, network([16, 64, 128, 256], 512, **kw))
    print("reduced", network([4, 8, 16, 32], 64))
    print("tiny", network([2, 4, 8, 16], 32))
    sys.exit(0)
