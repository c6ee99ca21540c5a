#!/usr/bin/env python3
"""
🧠 ARHNet - entry point of the harmonization pipeline.

Run from the repository root:

    python src/arhnet_cli.py synth-data --out-dir data --n 8 --n-test 4
    python src/arhnet_cli.py train --config configs/desk.cfg
    python src/arhnet_cli.py harmonize --method model --checkpoint runs/desk/checkpoints/ckpt_002000.arhf \
        --image data/test/images/case000.bin --mask data/test/masks/case000.bin --out out/case000.bin
"""

import os
import sys

SRC_DIR = os.path.dirname(os.path.abspath(__file__))
if SRC_DIR not in sys.path:
    sys.path.insert(0, SRC_DIR)

from arhnet.cli import main  # noqa: E402

if __name__ == "__main__":
    main()
