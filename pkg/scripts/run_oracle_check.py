#!/usr/bin/env python3
"""Run the estimator sandwich suite on the analytic linear-Gaussian testbed."""

import sys

from cmvae.cli import main

if __name__ == "__main__":
    sys.exit(main(["oracle-check"] + sys.argv[1:]))
