"""Download the ImageNet VGG-16 archive used by the feature losses.

    python scripts/fetch_vgg16.py [DEST]

Without DEST the file goes to the torch hub checkpoint cache, where
``FeatureExtractor.pretrained()`` looks by default.
"""

import sys
from pathlib import Path

import torch

from retifuse.loss_d2s import VGG16_URL, default_weights_path


def main() -> None:
    dest = Path(sys.argv[1]) if len(sys.argv) > 1 else default_weights_path()
    dest.parent.mkdir(parents=True, exist_ok=True)
    torch.hub.download_url_to_file(VGG16_URL, str(dest), hash_prefix="397923af")
    print(dest)


if __name__ == "__main__":
    main()
