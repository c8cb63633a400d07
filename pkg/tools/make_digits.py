"""Regenerate data/digits_8x8.mmimg from the UCI handwritten digits set bundled with scikit-learn."""
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

from matmamba.io import write_image_dataset


def main(out: str = "data/digits_8x8.mmimg") -> None:
    ds = load_digits()
    pixels = np.round(ds.images * (255.0 / 16.0)).astype(np.uint8)[..., None]
    write_image_dataset(Path(out), pixels, ds.target)
    print(f"wrote {len(pixels)} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
