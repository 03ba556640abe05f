"""Synthetic shape corpus and augmentation."""

import numpy as np
import pytest

from nextscale.errors import ConfigError
from nextscale.synthetic import (
    BACKGROUNDS,
    CLASSES,
    CLASS_FILLS,
    SUBJECT_TOKEN,
    SyntheticSpec,
    augment,
    generate_synthetic_dataset,
    render_shape,
)


def test_dataset_is_bit_reproducible():
    spec = SyntheticSpec(samples_per_class=5)
    a = generate_synthetic_dataset(spec, seed=11)
    b = generate_synthetic_dataset(spec, seed=11)
    assert np.array_equal(a.images(), b.images())
    assert [e.prompt for e in a.examples] == [e.prompt for e in b.examples]
    assert all(np.array_equal(x, y) for x, y in zip(a.subject_images, b.subject_images))
    c = generate_synthetic_dataset(spec, seed=12)
    assert not np.array_equal(a.images(), c.images())


def test_dataset_layout_and_balance(corpus):
    assert corpus.class_counts() == {name: 200 for name in CLASSES}
    imgs = corpus.images()
    assert imgs.shape == (800, 32, 32, 3)
    assert imgs.min() >= 0.0 and imgs.max() <= 1.0
    assert len(corpus.subject_images) == 5
    assert len(corpus.subject_prompts) == 5


def test_prompt_grammar(corpus):
    for e in corpus.examples:
        words = e.prompt.split()
        assert words[0] == "a"
        assert words[1] in CLASSES
        assert words[2] == "on"
        assert words[3] in BACKGROUNDS
    for p in corpus.subject_prompts:
        words = p.split()
        assert words[0] == SUBJECT_TOKEN
        assert words[1] == corpus.spec.subject_class


def test_subject_fill_is_unique_to_subject_images(corpus):
    subject = np.array(corpus.spec.subject_fill)
    hit = lambda img: np.any(np.all(np.abs(img - subject) < 1e-9, axis=-1))
    assert all(hit(img) for img in corpus.subject_images)
    assert not any(hit(e.image) for e in corpus.examples[:100])


def test_spec_rejects_palette_collision_and_bad_values():
    with pytest.raises(ConfigError):
        SyntheticSpec(subject_fill=CLASS_FILLS["circle"])
    with pytest.raises(ConfigError):
        SyntheticSpec(subject_class="hexagon")
    with pytest.raises(ConfigError):
        SyntheticSpec(subject_count=1)


def test_render_is_inside_unit_cube_and_shape_dependent():
    imgs = {
        name: render_shape(name, (1.0, 0.0, 0.0), (0.0, 0.0, 0.0), (16, 16), 9.0, 32)
        for name in CLASSES
    }
    for img in imgs.values():
        assert img.shape == (32, 32, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0
    names = list(imgs)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            assert not np.array_equal(imgs[names[i]], imgs[names[j]])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def test_augment_identity_when_factor_rounds_to_input_size():
    # seed 29 draws a factor whose rounded target equals the input extent
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (32, 32, 3))
    assert np.array_equal(augment(img, seed=29), img)


def test_augment_zooms_content():
    # seed 4 draws a factor near the top of the range
    img = np.zeros((32, 32, 3))
    img[12:20, 12:20] = 1.0
    out = augment(img, seed=4)
    assert out.sum() > img.sum()


def test_augment_preserves_shape_range_and_determinism():
    rng = np.random.default_rng(1)
    img = rng.uniform(0.2, 0.8, (32, 32, 3))
    for seed in range(25):
        out = augment(img, seed=seed)
        assert out.shape == img.shape
        assert out.min() >= img.min() - 1e-12
        assert out.max() <= img.max() + 1e-12
        assert np.array_equal(out, augment(img, seed=seed))


def test_augment_keeps_centered_content_centered():
    img = np.zeros((32, 32, 3))
    img[12:20, 12:20] = 1.0
    grid = np.arange(32)

    def center_of_mass(x):
        m = x[..., 0]
        return (m * grid[:, None]).sum() / m.sum(), (m * grid[None, :]).sum() / m.sum()

    cy0, cx0 = center_of_mass(img)
    for seed in range(100):
        cy, cx = center_of_mass(augment(img, seed=seed))
        assert abs(cy - cy0) <= 1.0 and abs(cx - cx0) <= 1.0


def test_augment_rejects_non_square():
    with pytest.raises(ConfigError):
        augment(np.zeros((16, 32, 3)), seed=0)
