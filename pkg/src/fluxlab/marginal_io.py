"""Marginal CSV files.

Schema: header ``k,segment,label,f0..f{d-1}``; one row per sample; the
label (and segment) column holds ``-`` when absent.  UTF-8, LF endings.
Floats are written with shortest round-trip repr so write-then-read is an
identity.
"""

from __future__ import annotations

import numpy as np

from .transport import MarginalSequence

__all__ = ["write_marginals", "read_marginals"]


def write_marginals(path, seq: MarginalSequence):
    d = seq.dim
    header = "k,segment,label," + ",".join(f"f{i}" for i in range(d))
    lines = [header]
    for k in range(seq.T):
        label = "-" if seq.regime_labels is None else str(seq.regime_labels[k])
        seg = str(seq.segment_ids[k])
        for row in seq.samples(k):
            feats = ",".join(repr(float(v)) for v in row)
            lines.append(f"{k},{seg},{label},{feats}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_marginals(path) -> MarginalSequence:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty marginal file")
    header = lines[0].split(",")
    if header[:3] != ["k", "segment", "label"]:
        raise ValueError(f"{path}: header must start with k,segment,label")
    d = len(header) - 3
    if d < 1:
        raise ValueError(f"{path}: no feature columns")

    by_k = {}
    seg_by_k = {}
    label_by_k = {}
    for ln_no, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != 3 + d:
            raise ValueError(f"{path}:{ln_no}: expected {3 + d} columns, got {len(parts)}")
        k = int(parts[0])
        seg = parts[1]
        label = parts[2]
        feats = [float(v) for v in parts[3:]]
        by_k.setdefault(k, []).append(feats)
        seg_by_k.setdefault(k, set()).add(seg)
        label_by_k.setdefault(k, set()).add(label)

    ks = sorted(by_k)
    if ks != list(range(len(ks))):
        raise ValueError(f"{path}: marginal indices must be contiguous from 0, got {ks}")
    marginals = [np.asarray(by_k[k], dtype=np.float64) for k in ks]

    def _unique(per_k, what):
        out = []
        for k in ks:
            vals = per_k[k]
            if len(vals) != 1:
                raise ValueError(f"{path}: marginal {k} has conflicting {what} values")
            out.append(next(iter(vals)))
        return out

    segs = _unique(seg_by_k, "segment")
    labels = _unique(label_by_k, "label")
    segment_ids = None if all(s == "-" for s in segs) else [int(s) for s in segs]
    regime_labels = None if all(v == "-" for v in labels) else [int(v) for v in labels]
    return MarginalSequence(marginals, segment_ids=segment_ids, regime_labels=regime_labels)
