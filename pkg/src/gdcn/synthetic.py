"""Synthetic citation-style datasets for demos and end-to-end tests.

Generates clustered graphs in the same content/cites text format the loader
ingests: dense intra-cluster connectivity, a thin ring of inter-cluster
edges, and binary features that carry the cluster identity plus noise bits.
"""

from __future__ import annotations

import numpy as np


def cluster_graph(n_per_cluster: int, n_clusters: int, rng: np.random.Generator,
                  intra_prob: float = 0.6, noise_features: int = 8,
                  feature_flip: float = 0.05):
    """Return (features, labels, edges) for a planted-partition graph.

    Cluster membership is interleaved in node order (node i belongs to
    cluster i mod n_clusters) so that deterministic node-order splits hit
    every class, the way shuffled citation files do.
    """
    n = n_per_cluster * n_clusters
    labels = np.arange(n) % n_clusters
    edges = []
    for c in range(n_clusters):
        members = list(range(c, n, n_clusters))
        for ii, i in enumerate(members):
            for j in members[ii + 1:]:
                if rng.random() < intra_prob:
                    edges.append((i, j))
        # one bridge to the next cluster keeps the graph connected
        edges.append((members[0], (c + 1) % n_clusters))
    onehot = np.zeros((n, n_clusters))
    onehot[np.arange(n), labels] = 1.0
    flip = rng.random((n, n_clusters)) < feature_flip
    onehot = np.abs(onehot - flip)
    noise = (rng.random((n, noise_features)) < 0.2).astype(np.float64)
    features = np.hstack([onehot, noise])
    return features, labels, np.array(sorted(set(edges)), dtype=np.int64)


def write_content_cites(content_path, cites_path, features, labels, edges) -> None:
    """Serialize a dataset in the tab-separated content/cites format."""
    with open(content_path, "w", encoding="utf-8") as fh:
        for i in range(len(labels)):
            feats = "\t".join(str(int(v)) for v in features[i])
            fh.write(f"n{i}\t{feats}\tclass{labels[i]}\n")
    with open(cites_path, "w", encoding="utf-8") as fh:
        for u, v in edges:
            fh.write(f"n{u}\tn{v}\n")


def make_synthetic_files(directory, n_per_cluster: int = 10, n_clusters: int = 2,
                         seed: int = 7, **kwargs):
    """Write content/cites files under ``directory``; returns the two paths."""
    import os

    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    features, labels, edges = cluster_graph(n_per_cluster, n_clusters, rng,
                                            **kwargs)
    content = os.path.join(directory, "synthetic.content")
    cites = os.path.join(directory, "synthetic.cites")
    write_content_cites(content, cites, features, labels, edges)
    return content, cites
