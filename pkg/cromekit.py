#!/usr/bin/env python3
"""cromekit - multimodal fake-news detection with metric learning and tri-transformer fusion.

Generates synthetic image/text datasets, trains the detector, runs the
ablation suite and the alpha/delta sweep, and checks gradients.
"""

import logging
import sys

from modules.cli import EXIT_RUNTIME, run

logger = logging.getLogger('cromekit')


def main():
    try:
        sys.exit(run(sys.argv[1:]))
    except KeyboardInterrupt:
        logger.warning("[Main] Interrupted by user")
        sys.exit(EXIT_RUNTIME)


if __name__ == "__main__":
    main()
