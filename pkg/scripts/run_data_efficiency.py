#!/usr/bin/env python3
"""Data-efficiency sweep: variants x data fractions, plot-ready CSV.

Writes <output_dir>/<run_id>.data_sweep.csv. Pass --config to override the
default desk-scale configuration.
"""

import argparse
import sys

from cmvae.cli import main
from cmvae.objective import ObjectiveConfig
from cmvae.training import OptimizerConfig, RunConfig


def build_default(path: str) -> None:
    cfg = RunConfig(
        run_id="data-efficiency",
        objective=ObjectiveConfig.for_variant("cI", num_samples=10),
        optimizer=OptimizerConfig(steps=1500, batch_size=48),
        eval_every=0,
        output_dir="runs/data-efficiency",
    )
    cfg.save(path)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None)
    parser.add_argument("--percents", default="10,20,50,100")
    parser.add_argument("--variants", default="baseline,cI,cC")
    parser.add_argument("--seeds", default="0,1,2,3,4")
    args = parser.parse_args()
    config = args.config
    if config is None:
        config = "data_efficiency_config.json"
        build_default(config)
    sys.exit(main(["sweep-data", "--config", config, "--percents", args.percents,
                   "--variants", args.variants, "--seeds", args.seeds]))
