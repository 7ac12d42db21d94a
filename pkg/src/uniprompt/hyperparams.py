"""Shipped per-dataset tuning configurations.

Keyed by (pretrain objective, dataset, shot); each value is
(up_lr, down_lr, k, tau). Everything else (alpha, epochs, patience) uses the
TuneConfig defaults.
"""

from __future__ import annotations

from .prompt import TuneConfig

TUNING_TABLE = {
    "dgi": {
        "cora":      {1: (0.001, 0.05, 50, 0.99999), 3: (0.0005, 0.05, 10, 0.9999), 5: (0.0001, 0.05, 10, 0.99999)},
        "citeseer":  {1: (0.0005, 0.05, 50, 0.9999), 3: (0.0005, 0.05, 10, 0.9999), 5: (0.0001, 0.05, 10, 0.9999)},
        "pubmed":    {1: (0.0005, 0.05, 1, 0.9999), 3: (0.0001, 0.05, 50, 0.9999), 5: (0.0005, 0.05, 10, 0.99999)},
        "cornell":   {1: (0.0001, 0.005, 50, 0.9999), 3: (0.001, 0.01, 50, 0.9999), 5: (0.00005, 0.001, 50, 0.9999)},
        "texas":     {1: (0.01, 0.005, 50, 0.9999), 3: (0.0001, 0.00005, 50, 0.9999), 5: (0.00001, 0.0001, 50, 0.9999)},
        "wisconsin": {1: (0.0001, 0.0005, 50, 0.9999), 3: (0.005, 0.0001, 50, 0.9999), 5: (0.00001, 0.0001, 50, 0.9999)},
        "chameleon": {1: (0.01, 0.001, 50, 0.9999), 3: (0.00001, 0.05, 10, 0.999), 5: (0.00001, 0.05, 10, 0.999)},
        "actor":     {1: (0.00005, 0.005, 50, 0.9999), 3: (0.00001, 0.01, 50, 0.9999), 5: (0.0005, 0.005, 50, 0.9999)},
        "squirrel":  {1: (0.0005, 0.05, 50, 0.9999), 3: (0.0005, 0.01, 50, 0.99), 5: (0.0001, 0.0001, 50, 0.9999)},
    },
    "grace": {
        "cora":      {1: (0.001, 0.005, 50, 0.9999), 3: (0.001, 0.05, 50, 0.9999), 5: (0.001, 0.05, 50, 0.9999)},
        "citeseer":  {1: (0.05, 0.001, 50, 0.9999), 3: (0.00001, 0.05, 50, 0.9999), 5: (0.00001, 0.05, 50, 0.9999)},
        "pubmed":    {1: (0.01, 0.05, 1, 0.9999), 3: (0.01, 0.05, 1, 0.9999), 5: (0.01, 0.0001, 1, 0.9999)},
        "cornell":   {1: (0.0001, 0.01, 50, 0.9999), 3: (0.00001, 0.0001, 50, 0.9999), 5: (0.00001, 0.0005, 50, 0.9999)},
        "texas":     {1: (0.0001, 0.00005, 50, 0.9999), 3: (0.00005, 0.0001, 50, 0.9999), 5: (0.00005, 0.0005, 50, 0.9999)},
        "wisconsin": {1: (0.001, 0.00005, 50, 0.9999), 3: (0.0001, 0.0005, 50, 0.999), 5: (0.0001, 0.0001, 50, 0.9999)},
        "chameleon": {1: (0.01, 0.0005, 1, 0.99999), 3: (0.001, 0.001, 50, 0.9999), 5: (0.005, 0.05, 50, 0.99999)},
        "actor":     {1: (0.00001, 0.01, 50, 0.9999), 3: (0.005, 0.01, 50, 0.9999), 5: (0.005, 0.05, 50, 0.9999)},
        "squirrel":  {1: (0.01, 0.05, 50, 0.9999), 3: (0.005, 0.05, 50, 0.99999), 5: (0.005, 0.05, 50, 0.99999)},
    },
    "graphmae": {
        "cora":      {1: (0.0005, 0.0005, 50, 0.9999), 3: (0.0005, 0.05, 1, 0.99999), 5: (0.005, 0.0005, 1, 0.9999)},
        "citeseer":  {1: (0.001, 0.0005, 50, 0.9999), 3: (0.001, 0.05, 50, 0.9999), 5: (0.001, 0.05, 10, 0.9999)},
        "pubmed":    {1: (0.001, 0.0001, 1, 0.999), 3: (0.0001, 0.05, 10, 0.9999), 5: (0.0001, 0.05, 1, 0.9999)},
        "cornell":   {1: (0.00005, 0.05, 50, 0.9999), 3: (0.00005, 0.005, 50, 0.9999), 5: (0.00005, 0.0005, 50, 0.9999)},
        "texas":     {1: (0.00001, 0.0005, 50, 0.9999), 3: (0.00005, 0.0005, 50, 0.9999), 5: (0.00005, 0.0005, 50, 0.9999)},
        "wisconsin": {1: (0.00005, 0.01, 50, 0.9999), 3: (0.00001, 0.00005, 50, 0.9999), 5: (0.00001, 0.0005, 50, 0.9999)},
        "chameleon": {1: (0.0005, 0.001, 50, 0.99999), 3: (0.001, 0.001, 50, 0.9999), 5: (0.001, 0.05, 50, 0.9999)},
        "actor":     {1: (0.005, 0.05, 50, 0.9999), 3: (0.001, 0.05, 50, 0.9999), 5: (0.01, 0.05, 50, 0.9999)},
        "squirrel":  {1: (0.005, 0.05, 50, 0.9999), 3: (0.001, 0.05, 5, 0.99999), 5: (0.005, 0.0001, 50, 0.9999)},
    },
}


def get_tuning_config(pretrain, dataset, shot, **overrides):
    """TuneConfig for a shipped (pretrain, dataset, shot) cell; unknown cells
    fall back to the TuneConfig defaults."""
    cell = TUNING_TABLE.get(pretrain.lower(), {}).get(dataset.lower(), {}).get(shot)
    if cell is None:
        return TuneConfig(**overrides)
    up_lr, down_lr, k, tau = cell
    base = dict(up_lr=up_lr, down_lr=down_lr, k=k, tau=tau)
    base.update(overrides)
    return TuneConfig(**base)
