"""Few-shot task sampling, repeated-run evaluation, sweeps, noise robustness,
synthetic graph generation, and result reporting."""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, replace

import numpy as np

from .graphs import Graph, add_gaussian_noise
from .prompt import METHODS, TuneConfig, run_method
from .seeds import rng_stream

DEFAULT_SEEDS = (42, 12345, 23344, 38108, 39788)
DEFAULT_RUNS = 20


@dataclass(frozen=True)
class FewShotTask:
    shot: int
    train_ids: np.ndarray
    test_ids: np.ndarray
    train_labels: np.ndarray
    test_labels: np.ndarray
    seed: int
    run: int


def sample_k_shot(graph, k, seed, run):
    """Stratified uniform draw of k labeled nodes per class from a stream
    keyed by (seed, run); every remaining labeled node becomes test."""
    if graph.labels is None:
        raise ValueError("missing labels")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng_stream("sampling", seed, run)
    picked = []
    for cls in range(graph.num_classes):
        ids = np.flatnonzero(graph.labels == cls)
        if ids.size < k:
            raise ValueError(f"class {cls} has {ids.size} nodes, fewer than k={k}")
        picked.append(rng.choice(ids, size=k, replace=False))
    train = np.sort(np.concatenate(picked))
    test = np.setdiff1d(np.arange(graph.num_nodes), train)
    return FewShotTask(
        shot=k,
        train_ids=train,
        test_ids=test,
        train_labels=graph.labels[train],
        test_labels=graph.labels[test],
        seed=seed,
        run=run,
    )


def evaluate(predictions, task):
    """Fraction correct on the test ids only."""
    if isinstance(predictions, dict):
        try:
            preds = np.asarray([predictions[int(i)] for i in task.test_ids])
        except KeyError as exc:
            raise ValueError(f"missing prediction for node {exc.args[0]}") from exc
    else:
        preds = np.asarray(predictions)
        if preds.ndim != 1 or preds.shape[0] <= int(task.test_ids.max()):
            raise ValueError("missing prediction: vector does not cover test ids")
        preds = preds[task.test_ids]
    return float((preds == task.test_labels).mean())


# ---------------------------------------------------------------------------
# result tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    dataset: str
    pretrain: str
    method: str
    shot: int
    seed: int
    run: int
    accuracy: float
    param: float | None = None  # sweep/noise leading column


class ResultTable:
    """Per-run accuracy records with mean +- population-std aggregation."""

    def __init__(self, records=(), param_name=None):
        self.records = list(records)
        self.param_name = param_name

    def add(self, record):
        self.records.append(record)

    def extend(self, records):
        self.records.extend(records)

    def cells(self):
        """Group records by (param?, dataset, pretrain, method, shot)."""
        groups = {}
        for r in self.records:
            key = (r.param, r.dataset, r.pretrain, r.method, r.shot)
            groups.setdefault(key, []).append(r.accuracy)
        return groups

    def aggregate(self):
        """Rows of (key..., count, mean, population std), sorted."""
        rows = []
        for key in sorted(self.cells(), key=lambda k: (str(k[0]), k[1:])):
            accs = np.asarray(self.cells()[key])
            rows.append(key + (accs.size, float(accs.mean()), float(accs.std())))
        return rows

    def mean_accuracy(self, method, shot, param=None):
        accs = self.cells().get((param, *self._single_scope(), method, shot))
        if accs is None:
            raise KeyError(f"no records for method={method} shot={shot} param={param}")
        return float(np.mean(accs))

    def _single_scope(self):
        scopes = {(r.dataset, r.pretrain) for r in self.records}
        if len(scopes) != 1:
            raise ValueError("table spans multiple dataset/pretrain scopes")
        return next(iter(scopes))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            lead = f"{self.param_name}," if self.param_name else ""
            fh.write(lead + "dataset,pretrain,method,shot,seed,run,accuracy\n")
            key = lambda r: (str(r.param), r.dataset, r.pretrain, r.method,
                             r.shot, r.seed, r.run)
            for r in sorted(self.records, key=key):
                lead = f"{r.param!r}," if self.param_name else ""
                fh.write(
                    f"{lead}{r.dataset},{r.pretrain},{r.method},{r.shot},"
                    f"{r.seed},{r.run},{r.accuracy!r}\n"
                )

    def to_markdown(self, path):
        """One table per (param, dataset, pretrain): methods as rows, shots as
        columns, the best mean per column in bold. Std is population std."""
        rows = self.aggregate()
        scopes = sorted({(r[0], r[1], r[2]) for r in rows}, key=lambda s: str(s))
        lines = []
        for param, dataset, pretrain in scopes:
            scoped = [r for r in rows if r[:3] == (param, dataset, pretrain)]
            shots = sorted({r[4] for r in scoped})
            methods = sorted({r[3] for r in scoped})
            cell = {(r[3], r[4]): (r[6], r[7]) for r in scoped}
            best = {
                s: max((m for m in methods if (m, s) in cell),
                       key=lambda m: cell[(m, s)][0])
                for s in shots
            }
            title = f"## {dataset} / {pretrain}"
            if self.param_name is not None:
                title += f" ({self.param_name}={param})"
            lines.append(title)
            lines.append("")
            lines.append("| method | " + " | ".join(f"{s}-shot" for s in shots) + " |")
            lines.append("|---" * (len(shots) + 1) + "|")
            for m in methods:
                row = [m]
                for s in shots:
                    if (m, s) not in cell:
                        row.append("-")
                        continue
                    mean, std = cell[(m, s)]
                    text = f"{100 * mean:.2f} ± {100 * std:.2f}"
                    row.append(f"**{text}**" if best[s] == m else text)
                lines.append("| " + " | ".join(row) + " |")
            lines.append("")
        with open(path, "w") as fh:
            fh.write("\n".join(lines))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    dataset: str
    pretrain: str
    graph: Graph
    encoder: object
    methods: tuple
    shots: tuple
    tune: dict                      # method -> TuneConfig
    seeds: tuple = DEFAULT_SEEDS
    runs: int = DEFAULT_RUNS
    noise_sigma: float = 0.0
    workers: int = 1

    def config_for(self, method):
        if method in self.tune:
            return self.tune[method]
        if "default" in self.tune:
            return self.tune["default"]
        raise KeyError(f"no tune config for method '{method}'")


def _run_seed(seed, run):
    return seed * 100000 + run


def _run_one(spec, method, shot, seed, run):
    graph = spec.graph
    if spec.noise_sigma > 0.0:
        noise_rng = rng_stream("noise", int(round(spec.noise_sigma * 1e9)), seed, run)
        noisy = add_gaussian_noise(graph.features, spec.noise_sigma,
                                   int(noise_rng.integers(2**31)))
        graph = graph.with_features(noisy)
    task = sample_k_shot(graph, shot, seed, run)
    cfg = replace(spec.config_for(method), seed=_run_seed(seed, run))
    result = run_method(method, graph, spec.encoder, task.train_ids, cfg)
    acc = evaluate(result.predictions, task)
    return RunRecord(
        dataset=spec.dataset,
        pretrain=spec.pretrain,
        method=method,
        shot=shot,
        seed=seed,
        run=run,
        accuracy=acc,
        param=None,
    )


_WORKER_SPEC = None


def _pool_init(spec):
    global _WORKER_SPEC
    _WORKER_SPEC = spec


def _pool_run(args):
    return _run_one(_WORKER_SPEC, *args)


def run_experiment(spec, param=None, param_name=None):
    """Every (method, shot, seed, run) combination; exactly
    len(seeds) * runs records per (method, shot) cell."""
    for m in spec.methods:
        if m not in METHODS:
            raise ValueError(f"unknown method '{m}'")
    keys = [
        (method, shot, seed, run)
        for method in spec.methods
        for shot in spec.shots
        for seed in spec.seeds
        for run in range(spec.runs)
    ]
    if spec.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=spec.workers, initializer=_pool_init, initargs=(spec,)
        ) as pool:
            records = list(pool.map(_pool_run, keys, chunksize=8))
    else:
        records = [_run_one(spec, *key) for key in keys]
    if param is not None:
        records = [replace(r, param=param) for r in records]
    records.sort(key=lambda r: (r.method, r.shot, r.seed, r.run))
    return ResultTable(records, param_name=param_name)


def sweep(param, grid, base_spec):
    """One experiment per grid value of 'tau' | 'k' | 'alpha'."""
    if param not in ("tau", "k", "alpha"):
        raise ValueError(f"unknown sweep parameter '{param}'")
    if not grid:
        raise ValueError("sweep grid is empty")
    table = ResultTable(param_name=param)
    for value in grid:
        value = int(value) if param == "k" else float(value)
        tune = {m: replace(c, **{param: value}) for m, c in base_spec.tune.items()}
        spec = replace(base_spec, tune=tune)
        table.extend(run_experiment(spec, param=value, param_name=param).records)
    return table


def noise_robustness(levels, base_spec):
    """Features perturbed per level (kNN recomputed on noisy features inside
    each tuning run); level 0 reproduces the baseline exactly."""
    table = ResultTable(param_name="noise")
    for level in levels:
        if level < 0:
            raise ValueError("noise level must be non-negative")
        spec = replace(base_spec, noise_sigma=float(level))
        table.extend(
            run_experiment(spec, param=float(level), param_name="noise").records
        )
    return table


# ---------------------------------------------------------------------------
# synthetic graphs
# ---------------------------------------------------------------------------


def generate_sbm(n, classes, p_in, p_out, feature_dim, feature_sep, seed, name="sbm"):
    """Stochastic block model with balanced classes and class-Gaussian
    features whose means are pairwise ``feature_sep`` apart."""
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("edge probabilities must be in [0, 1]")
    if feature_dim < classes:
        raise ValueError("feature_dim must be >= classes")
    if n < classes:
        raise ValueError("need at least one node per class")
    rng = np.random.default_rng(seed)

    sizes = np.full(classes, n // classes)
    sizes[: n % classes] += 1
    labels = np.repeat(np.arange(classes), sizes)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    src = np.concatenate([iu[keep], ju[keep]])
    dst = np.concatenate([ju[keep], iu[keep]])

    means = np.zeros((classes, feature_dim))
    means[np.arange(classes), np.arange(classes)] = feature_sep / np.sqrt(2.0)
    features = means[labels] + rng.standard_normal((n, feature_dim))

    return Graph(n, src, dst, np.ones(src.size), features, labels, classes, name=name)
