import numpy as np
import pytest

from halfspace.data import write_idx


@pytest.fixture
def fake_fmnist(tmp_path):
    """A tiny IDX dataset in the Fashion-MNIST layout: 8x8 images, 10
    classes, each class a noisy copy of its own template."""
    rng = np.random.default_rng(123)
    templates = rng.integers(0, 256, size=(10, 8, 8))

    def split(per_class, images_name, labels_name):
        labels = np.repeat(np.arange(10), per_class)
        noise = rng.integers(-30, 31, size=(len(labels), 8, 8))
        images = np.clip(templates[labels] + noise, 0, 255)
        write_idx(tmp_path / images_name, images.astype(np.uint8))
        write_idx(tmp_path / labels_name, labels.astype(np.uint8))

    split(30, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    split(6, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    return tmp_path


ACCEPTANCE_LINES = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
