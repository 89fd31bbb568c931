#!/usr/bin/env python3
"""Label-propagation pipeline at a chosen pretraining fraction."""

import argparse
import sys

from cmvae.cli import main
from cmvae.objective import ObjectiveConfig
from cmvae.training import DatasetConfig, OptimizerConfig, RunConfig


def build_default(path: str) -> None:
    cfg = RunConfig(
        run_id="propagation",
        dataset=DatasetConfig(pairs_per_instance=1),
        objective=ObjectiveConfig.for_variant("cI", num_samples=10),
        optimizer=OptimizerConfig(steps=1000, batch_size=48),
        eval_every=0,
        output_dir="runs/propagation",
    )
    cfg.save(path)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None)
    parser.add_argument("--pretrain-percent", default="10")
    parser.add_argument("--variant", default="cI")
    args = parser.parse_args()
    config = args.config
    if config is None:
        config = "propagation_config.json"
        build_default(config)
    sys.exit(main(["propagate", "--config", config,
                   "--pretrain-percent", args.pretrain_percent,
                   "--variant", args.variant]))
