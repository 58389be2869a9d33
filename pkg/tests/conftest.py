"""Shared tiny-model helpers for the unit tests."""

import numpy as np
import pytest

from ewcdet.detector import AnchorConfig, Architecture, generate_anchors, init_params
from ewcdet.losses import Batch, match_anchors
from ewcdet.synthdata import DomainSpec, generate_domain

SMALL_CONFIG = AnchorConfig(image_size=32, grid_stride=8,
                            anchor_heights=(12.0, 20.0),
                            anchor_aspect_ratios=(0.5,),
                            score_threshold=0.3, nms_iou_threshold=0.5)
SMALL_ARCH = Architecture.for_config(SMALL_CONFIG, channels=(3, 4, 4))

# 64px twin of the shipped benchmark: tall-enough objects to pass the
# evaluation height filter, but cheap enough for unit tests
MINI_CONFIG = AnchorConfig(image_size=64, grid_stride=8,
                           anchor_heights=(56.0,),
                           anchor_aspect_ratios=(0.45,),
                           score_threshold=0.3, nms_iou_threshold=0.5)
MINI_ARCH = Architecture.for_config(MINI_CONFIG, channels=(4, 8, 8))

MINI_SPEC_A = DomainSpec(background="flat", background_intensity=(0.75, 0.92),
                         object_intensity=(0.05, 0.25),
                         object_height=(52.0, 60.0), aspect_ratio=0.45,
                         objects_per_image=(1, 2), occluder_probability=0.4,
                         occlusion_fraction=(0.1, 0.6), noise_sigma=0.02,
                         image_size=64)
MINI_SPEC_B = DomainSpec(background="striped", background_intensity=(0.2, 0.42),
                         object_intensity=(0.62, 0.88),
                         object_height=(52.0, 62.0), aspect_ratio=0.45,
                         objects_per_image=(1, 2), occluder_probability=0.5,
                         occlusion_fraction=(0.1, 0.6), noise_sigma=0.02,
                         image_size=64)


def mini_domain(spec, count, seed, split, domain_id):
    return generate_domain(spec, count, seed, split=split, domain_id=domain_id)


def mini_domains(train_count=8, test_count=6, seed=100):
    a = (mini_domain(MINI_SPEC_A, train_count, seed, "train", "A"),
         mini_domain(MINI_SPEC_A, test_count, seed + 1, "test", "A"))
    b = (mini_domain(MINI_SPEC_B, train_count, seed + 2, "train", "B"),
         mini_domain(MINI_SPEC_B, test_count, seed + 3, "test", "B"))
    return a, b


@pytest.fixture
def small_config():
    return SMALL_CONFIG


@pytest.fixture
def small_arch():
    return SMALL_ARCH


def small_params(seed=0):
    return init_params(seed, SMALL_ARCH)


def random_gt_boxes(rng, n):
    """Boxes roughly matching the small anchor shapes, inside a 32px image."""
    boxes = []
    for _ in range(n):
        h = rng.uniform(10, 22)
        w = h * rng.uniform(0.4, 0.6)
        x0 = rng.uniform(0, 32 - w)
        y0 = rng.uniform(0, 32 - h)
        boxes.append((x0, y0, x0 + w, y0 + h))
    return np.asarray(boxes, dtype=np.float64)


def random_batch(seed=0, n_images=2, objects=(1, 2)):
    """A small batch with images correlated to their gt boxes."""
    rng = np.random.default_rng(seed)
    anchors = generate_anchors(SMALL_CONFIG)
    images, targets = [], []
    for _ in range(n_images):
        img = rng.uniform(0.6, 0.9, size=(32, 32))
        gts = random_gt_boxes(rng, int(rng.integers(objects[0], objects[1] + 1)))
        for (x0, y0, x1, y1) in gts:
            img[int(y0):int(np.ceil(y1)), int(x0):int(np.ceil(x1))] = rng.uniform(0.1, 0.3)
        images.append(img)
        targets.append(match_anchors(gts, anchors))
    return Batch(images, targets, batch_id=seed)
