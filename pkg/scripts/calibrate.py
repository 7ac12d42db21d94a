"""Calibration scan for the synthetic-SBM acceptance settings (not shipped API)."""

import itertools
import sys
import time
from dataclasses import replace

import numpy as np

from uniprompt.graphs import edge_homophily, knn_prompt_init
from uniprompt.harness import evaluate, generate_sbm, sample_k_shot
from uniprompt.pretrain import PretrainConfig, pretrain
from uniprompt.prompt import TuneConfig, run_method


def knn_homophily(graph, k):
    support = knn_prompt_init(graph.features, k)
    same = graph.labels[support.row_ids()] == graph.labels[support.indices]
    return float(same.mean())


def mean_acc(graph, enc, method, cfg, seeds=(42, 12345), runs=5, shot=1):
    accs = []
    t0 = time.time()
    epochs = []
    for seed in seeds:
        for run in range(runs):
            task = sample_k_shot(graph, shot, seed, run)
            res = run_method(method, graph, enc, task.train_ids,
                             replace(cfg, seed=seed * 100000 + run))
            epochs.append(res.epochs_run)
            accs.append(evaluate(res.predictions, task))
    per = (time.time() - t0) / len(accs)
    return float(np.mean(accs)), float(np.std(accs)), per, float(np.mean(epochs))


def scan_hetero():
    # strongly disassortative A (2-hop signal) + feature-separable classes
    for p_in, p_out, sep in [(0.01, 0.10, 2.2), (0.01, 0.10, 2.8), (0.02, 0.08, 2.5)]:
        g = generate_sbm(300, 4, p_in, p_out, 16, sep, seed=20)
        k = 10
        print(f"\n=== p_in={p_in} p_out={p_out} sep={sep}: hom={edge_homophily(g):.3f} "
              f"knn_hom={knn_homophily(g, k):.3f} E={g.num_undirected_edges}", flush=True)
        enc = pretrain(g, PretrainConfig("dgi", epochs=150, lr=0.001, seed=0,
                                         hidden_dim=32, embed_dim=32))
        base = TuneConfig(up_lr=0.01, down_lr=0.01, k=k, tau=0.999, max_epochs=600,
                          patience=20, min_delta=1e-5, clf_hidden=32)
        m, s, per, ep = mean_acc(g, enc, "linear-probe", base)
        print(f"  probe: {100*m:5.1f}±{100*s:4.1f} ({per:.2f}s, {ep:.0f}ep)", flush=True)
        for tau in (0.99, 0.999, 0.9999, 1.0):
            m, s, per, ep = mean_acc(g, enc, "uniprompt", replace(base, tau=tau))
            print(f"  uni tau={tau:7}: {100*m:5.1f}±{100*s:4.1f} ({per:.2f}s, {ep:.0f}ep)", flush=True)
        for method in ("ablate:random_topo", "ablate:discard_topo"):
            m, s, per, ep = mean_acc(g, enc, method, base)
            print(f"  {method}: {100*m:5.1f}±{100*s:4.1f} ({per:.2f}s, {ep:.0f}ep)", flush=True)


if __name__ == "__main__":
    scan_hetero()
