"""Regenerates tests/fixtures/awgn_seed0.pgm without touching the C++ code.

Source image: 16x16 gray ramp, sample (y, x) = 16*y + x. Noise: sigma 25,
seed 0, splitmix64-seeded xorshift64*, Box-Muller with the sine variate
cached for the next draw, round half away from zero, clamp to [0, 255].
"""
import math
import sys

M64 = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


class Stream:
    def __init__(self, seed):
        self.s = splitmix64(seed) or 0x9E3779B97F4A7C15
        self.spare = None

    def u64(self):
        s = self.s
        s ^= s >> 12
        s ^= (s << 25) & M64
        s ^= s >> 27
        self.s = s
        return (s * 0x2545F4914F6CDD1D) & M64

    def uniform(self):
        return (self.u64() >> 11) * 2.0 ** -53

    def normal(self):
        if self.spare is not None:
            v, self.spare = self.spare, None
            return v
        u1 = self.uniform()
        while u1 == 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        t = 2.0 * math.pi * u2
        self.spare = r * math.sin(t)
        return r * math.cos(t)


def round_away(v):
    return math.copysign(math.floor(abs(v) + 0.5), v)


def main(path):
    rng = Stream(0)
    out = bytearray()
    for y in range(16):
        for x in range(16):
            v = round_away(16 * y + x + 25.0 * rng.normal())
            out.append(int(min(max(v, 0.0), 255.0)))
    with open(path, "wb") as f:
        f.write(b"P5\n16 16\n255\n" + bytes(out))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures/awgn_seed0.pgm")
