"""Plain-text data formats.

Finite-alleles sample::

    <d> <theta>
    <type index> <count>      one line per observed type

Mutation model: either ``d`` lines of ``d`` row-stochastic entries, or the
single line ``sitewise-flip <L>``.

Infinite-sites sample::

    <h> <r>
    <n_i> <bitstring of length r>     h lines
    <location>                        r lines

Blank lines and ``#`` comments are ignored everywhere.
"""

import numpy as np

from .ism import IsmSample
from .model import MutationModel, SiteFlipModel, TypedSample


class DataFormatError(ValueError):
    def __init__(self, path, line, col, msg):
        super().__init__(f"{path}:{line}:{col}: {msg}")
        self.path, self.line, self.col = path, line, col


def _lines(path):
    with open(path) as f:
        for no, raw in enumerate(f, 1):
            text = raw.split("#", 1)[0].rstrip()
            if text.strip():
                yield no, text


def _fields(text):
    """Whitespace-separated fields with their 1-based columns."""
    out, i = [], 0
    while i < len(text):
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < len(text) and not text[j].isspace():
            j += 1
        out.append((i + 1, text[i:j]))
        i = j
    return out


def _parse(path, no, col, tok, kind, what):
    try:
        return kind(tok)
    except ValueError:
        raise DataFormatError(path, no, col, f"{what}: cannot read {tok!r} as {kind.__name__}")


def _expect(path, no, text, count, what):
    f = _fields(text)
    if len(f) != count:
        col = f[count][0] if len(f) > count else len(text) + 1
        raise DataFormatError(path, no, col, f"{what}: expected {count} fields, found {len(f)}")
    return f


def read_fa_sample(path):
    """Returns ``(sample, d, theta)``."""
    lines = list(_lines(path))
    if not lines:
        raise DataFormatError(path, 1, 1, "empty file")
    no, text = lines[0]
    (c1, a), (c2, b) = _expect(path, no, text, 2, "header")
    d = _parse(path, no, c1, a, int, "type count")
    theta = _parse(path, no, c2, b, float, "theta")
    if d < 1:
        raise DataFormatError(path, no, c1, "type count must be positive")
    if not theta > 0:
        raise DataFormatError(path, no, c2, "theta must be positive")
    counts = {}
    for no, text in lines[1:]:
        (c1, a), (c2, b) = _expect(path, no, text, 2, "type line")
        i = _parse(path, no, c1, a, int, "type")
        k = _parse(path, no, c2, b, int, "count")
        if not 0 <= i < d:
            raise DataFormatError(path, no, c1, f"type {i} outside [0, {d})")
        if i in counts:
            raise DataFormatError(path, no, c1, f"type {i} listed twice")
        if k < 1:
            raise DataFormatError(path, no, c2, "count must be positive")
        counts[i] = k
    if not counts:
        raise DataFormatError(path, no, 1, "no types listed")
    return TypedSample.from_mapping(counts), d, theta


def write_fa_sample(path, sample, d, theta):
    with open(path, "w") as f:
        f.write(f"{d} {theta!r}\n")
        for i, c in zip(sample.types, sample.counts):
            f.write(f"{i} {c}\n")


def read_model(path, theta):
    lines = list(_lines(path))
    if not lines:
        raise DataFormatError(path, 1, 1, "empty file")
    no, text = lines[0]
    f = _fields(text)
    if f[0][1] == "sitewise-flip":
        (_, _), (c, tok) = _expect(path, no, text, 2, "site-flip model")
        L = _parse(path, no, c, tok, int, "site count")
        if not 1 <= L <= 62:
            raise DataFormatError(path, no, c, "site count must lie in [1, 62]")
        if len(lines) > 1:
            raise DataFormatError(path, lines[1][0], 1, "unexpected content after model line")
        return SiteFlipModel(theta, L)
    d = len(f)
    rows = []
    for no, text in lines:
        fields = _expect(path, no, text, d, "matrix row")
        rows.append([_parse(path, no, c, tok, float, "entry") for c, tok in fields])
    if len(rows) != d:
        raise DataFormatError(path, lines[-1][0], 1, f"expected {d} rows, found {len(rows)}")
    try:
        return MutationModel(theta, np.array(rows))
    except ValueError as e:
        raise DataFormatError(path, lines[0][0], 1, str(e))


def write_model(path, m):
    with open(path, "w") as f:
        if isinstance(m, SiteFlipModel):
            f.write(f"sitewise-flip {m.n_sites}\n")
        else:
            for row in np.asarray(m.P):
                f.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_ism(path):
    lines = list(_lines(path))
    if not lines:
        raise DataFormatError(path, 1, 1, "empty file")
    no, text = lines[0]
    (c1, a), (c2, b) = _expect(path, no, text, 2, "header")
    h = _parse(path, no, c1, a, int, "haplotype count")
    r = _parse(path, no, c2, b, int, "mutation count")
    if h < 1 or r < 0:
        raise DataFormatError(path, no, c1, "need h >= 1 and r >= 0")
    if len(lines) != 1 + h + r:
        last = lines[-1][0]
        raise DataFormatError(path, last, 1, f"expected {h} haplotype and {r} location lines, "
                              f"found {len(lines) - 1} lines in total")
    S, n = [], []
    for no, text in lines[1 : 1 + h]:
        if r:
            (c1, a), (c2, bits) = _expect(path, no, text, 2, "haplotype line")
        else:
            ((c1, a),) = _expect(path, no, text, 1, "haplotype line")
            c2, bits = len(text) + 1, ""
        n.append(_parse(path, no, c1, a, int, "multiplicity"))
        if n[-1] < 1:
            raise DataFormatError(path, no, c1, "multiplicity must be positive")
        if len(bits) != r:
            raise DataFormatError(path, no, c2, f"bitstring has length {len(bits)}, expected {r}")
        for k, ch in enumerate(bits):
            if ch not in "01":
                raise DataFormatError(path, no, c2 + k, f"bad character {ch!r} in bitstring")
        S.append([int(ch) for ch in bits])
    ell = []
    for no, text in lines[1 + h :]:
        ((c, tok),) = _expect(path, no, text, 1, "location line")
        ell.append(_parse(path, no, c, tok, float, "location"))
    try:
        return IsmSample(np.array(S, dtype=np.uint8).reshape(h, r), n, ell)
    except ValueError as e:
        raise DataFormatError(path, lines[0][0], 1, f"invalid sample: {e}")


def write_ism(path, sample):
    with open(path, "w") as f:
        f.write(f"{sample.h} {sample.r}\n")
        for row, c in zip(sample.S, sample.n):
            f.write(f"{c} {''.join(map(str, row))}\n" if sample.r else f"{c}\n")
        for x in sample.ell:
            f.write(f"{float(x)!r}\n")
