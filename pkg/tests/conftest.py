import json

import numpy as np
import pytest

from longtaildet.dataset import load_dataset


def make_coco(images, annotations, categories):
    """Assemble a COCO-style document from shorthand tuples.

    images: (id, w, h, name); annotations: (id, image_id, category_id,
    [x, y, w, h]); categories: (id, name).
    """
    return {
        "images": [{"id": i, "width": w, "height": h, "file_name": n}
                   for i, w, h, n in images],
        "annotations": [{"id": i, "image_id": im, "category_id": c, "bbox": list(b)}
                        for i, im, c, b in annotations],
        "categories": [{"id": i, "name": n} for i, n in categories],
    }


@pytest.fixture
def write_dataset(tmp_path):
    def _write(doc, name="ann.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return path
    return _write


@pytest.fixture
def tiny_dataset(write_dataset):
    """Two classes, three images: class 1 rare (2 boxes), class 2 common."""
    doc = make_coco(
        images=[(1, 100, 80, "a.png"), (2, 100, 80, "b.png"), (3, 100, 80, "c.png")],
        annotations=[
            (1, 1, 1, [10, 10, 20, 20]),
            (2, 1, 2, [40, 40, 30, 20]),
            (3, 2, 2, [5, 5, 50, 50]),
            (4, 2, 2, [60, 10, 20, 30]),
            (5, 3, 1, [0, 0, 25, 25]),
        ],
        categories=[(1, "rare"), (2, "common")])
    return load_dataset(write_dataset(doc))


@pytest.fixture
def image_dir(tmp_path):
    """Directory of deterministic random PNGs keyed by file name."""
    from longtaildet.augment import save_image

    d = tmp_path / "images"
    d.mkdir()

    def _make(name, w=64, h=48, seed=0):
        rng = np.random.default_rng(seed)
        img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        save_image(img, d / name)
        return d

    return _make
