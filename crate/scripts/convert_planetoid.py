#!/usr/bin/env python3
"""Convert the raw Cora (LINQS) and Citeseer (Planetoid) files into the
toolkit's dataset directory layout (meta.json, edges.tsv, features.tsv,
labels.tsv).

Usage: convert_planetoid.py cora     RAW_DIR OUT_DIR
       convert_planetoid.py citeseer RAW_DIR OUT_DIR

Cora: RAW_DIR holds cora.content and cora.cites. Nodes are numbered in
cora.content order, classes in sorted name order.

Citeseer: RAW_DIR holds ind.citeseer.{x,y,tx,ty,allx,ally,graph,test.index}.
Node numbering follows the usual Planetoid reordering; the isolated test
placeholders without a feature row stay unlabeled.
"""
import json
import os
import pickle
import sys

import numpy as np
import scipy.sparse as sp


def write(out_dir, n, d, c, edges, feats, labels):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump({"n": n, "d": d, "c": c}, f)
        f.write("\n")
    with open(os.path.join(out_dir, "edges.tsv"), "w") as f:
        for u, v in edges:
            f.write(f"{u}\t{v}\n")
    with open(os.path.join(out_dir, "features.tsv"), "w") as f:
        for node, dim, val in feats:
            f.write(f"{node}\t{dim}\t{val:g}\n")
    with open(os.path.join(out_dir, "labels.tsv"), "w") as f:
        for node, cls in labels:
            f.write(f"{node}\t{cls}\n")


def canonical_edges(pairs):
    seen = set()
    for u, v in pairs:
        if u == v:
            continue
        seen.add((min(u, v), max(u, v)))
    return sorted(seen)


def cora(raw, out):
    ids, rows, names = [], [], []
    with open(os.path.join(raw, "cora.content")) as f:
        for line in f:
            parts = line.split()
            ids.append(parts[0])
            rows.append([int(x) for x in parts[1:-1]])
            names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(names))
    cls_of = {name: i for i, name in enumerate(classes)}
    pairs = []
    with open(os.path.join(raw, "cora.cites")) as f:
        for line in f:
            a, b = line.split()
            pairs.append((index[a], index[b]))
    feats = [(i, j, float(v)) for i, row in enumerate(rows) for j, v in enumerate(row) if v]
    labels = [(i, cls_of[name]) for i, name in enumerate(names)]
    write(out, len(ids), len(rows[0]), len(classes), canonical_edges(pairs), feats, labels)


def citeseer(raw, out):
    def load(name):
        with open(os.path.join(raw, f"ind.citeseer.{name}"), "rb") as f:
            return pickle.load(f, encoding="latin1")

    allx, ally, tx, ty, graph = (load(k) for k in ("allx", "ally", "tx", "ty", "graph"))
    with open(os.path.join(raw, "ind.citeseer.test.index")) as f:
        test_idx = [int(line) for line in f]
    test_sorted = np.sort(test_idx)
    full_range = range(test_sorted[0], test_sorted[-1] + 1)
    tx_ext = sp.lil_matrix((len(full_range), tx.shape[1]))
    tx_ext[test_sorted - test_sorted[0], :] = tx
    ty_ext = np.zeros((len(full_range), ty.shape[1]))
    ty_ext[test_sorted - test_sorted[0], :] = ty
    features = sp.vstack((allx, tx_ext)).tolil()
    labels_1h = np.vstack((ally, ty_ext))
    features[test_idx, :] = features[test_sorted, :]
    labels_1h[test_idx, :] = labels_1h[test_sorted, :]
    features = features.tocsr()
    n = len(graph)
    assert features.shape[0] == n
    pairs = [(u, v) for u, nbrs in graph.items() for v in nbrs]
    coo = features.tocoo()
    feats = sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))
    labels = [(i, int(np.argmax(row))) for i, row in enumerate(labels_1h) if row.sum() > 0]
    write(out, n, features.shape[1], labels_1h.shape[1], canonical_edges(pairs), feats, labels)


if __name__ == "__main__":
    kind, raw, out = sys.argv[1:4]
    {"cora": cora, "citeseer": citeseer}[kind](raw, out)
