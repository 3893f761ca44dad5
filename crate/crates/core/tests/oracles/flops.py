# Sums H'*W'*Cin*Cout*k^2 over the reference layer table.
import math, sys

def table(w, h):
    w, h = math.ceil(w / 8) * 8, math.ceil(h / 8) * 8
    rows = []
    chans, counts, strides = [4, 8, 24, 64, 64, 128], [2, 2, 3, 3, 3, 3], [2, 2, 2, 2, 2, 1]
    cin, dims = 1, (h, w)
    taps = {}
    for b, (c, n, s) in enumerate(zip(chans, counts, strides)):
        for l in range(n):
            stride = s if l == 0 else 1
            dims = (math.ceil(dims[0] / stride), math.ceil(dims[1] / stride))
            rows.append((dims, cin, c, 3))
            cin = c
        taps[b] = (dims, c)
    for b in (2, 3, 5):
        rows.append((taps[b][0], taps[b][1], 64, 1))
    d8 = (h // 8, w // 8)
    rows += [(d8, 64, 64, 1)] * 3 + [(d8, 64, 1, 1)]
    rows += [(d8, 64, 64, 1)] * 3 + [(d8, 64, 65, 1)]
    return rows

for w, h in [(800, 600), (640, 480)]:
    rows = table(w, h)
    print(w, h, len(rows), sum(d[0] * d[1] * ci * co * k * k for d, ci, co, k in rows))
