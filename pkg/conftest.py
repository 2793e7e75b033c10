import numpy as np
import pytest

from services.model import BackboneConfig, Prediction, build_model
from services.records import DEFECT, NO_DEFECT, Annotation, Sample
from services.wavesim import DefectSpec, PlateSpec


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running learning / end-to-end checks")


@pytest.fixture
def small_spec():
    """40 x 40 mm window on a 64 x 64 grid, noiseless, 32 px frames"""
    return PlateSpec(
        scan_width_mm=40.0,
        scan_height_mm=40.0,
        grid_nx=64,
        grid_ny=64,
        probe_pos=(20.0, 0.0),
        probe_width_mm=4.0,
        noise_sigma=0.0,
        image_size=32,
    )


@pytest.fixture
def small_defect_spec(small_spec):
    slit = DefectSpec(center=(20.0, 20.0), length_mm=10.0, width_mm=1.0)
    return small_spec.model_copy(update={"defects": (slit,)})


@pytest.fixture
def tiny_backbone():
    return BackboneConfig(widths=(4, 8), blocks_per_stage=1, input_size=16)


@pytest.fixture
def tiny_model(tiny_backbone):
    return build_model(tiny_backbone, seed=3)


def make_prediction(predicted_class, center=(0.0, 0.0)):
    scores = np.array([1.0, 0.0]) if predicted_class == DEFECT else np.array([0.0, 1.0])
    return Prediction(scores=scores, predicted_class=predicted_class, center_px=center)


def positive(x, y):
    return Annotation(label=DEFECT, center_px=(x, y))


def negative():
    return Annotation(label=NO_DEFECT)


@pytest.fixture
def six_sample_set():
    """Two hits, one mislocated detection, one miss, one false alarm, one correct rejection"""
    truths = [positive(30, 30), positive(10, 10), positive(40, 40), positive(20, 20), negative(), negative()]
    preds = [
        make_prediction(DEFECT, (33, 34)),   # 5 px off
        make_prediction(DEFECT, (10, 10)),   # exact
        make_prediction(DEFECT, (40, 55)),   # 15 px off
        make_prediction(NO_DEFECT),
        make_prediction(DEFECT, (5, 5)),
        make_prediction(NO_DEFECT),
    ]
    return preds, truths


def blob_samples(n, size=16, seed=0, positions=None, sigma=1.2):
    """Bright Gaussian blob on a dark noisy background for positives, background only for negatives"""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    samples = []
    for i in range(n):
        image = rng.normal(0.1, 0.02, size=(size, size))
        if i % 2 == 0:
            if positions is None:
                cx, cy = rng.uniform(3, size - 4, size=2)
            else:
                cx, cy = positions[(i // 2) % len(positions)]
            image += 0.8 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
            annotation = positive(float(cx), float(cy))
        else:
            annotation = negative()
        samples.append(Sample(image=np.clip(image, 0, 1).astype(np.float32), annotation=annotation,
                              series_id=1, frame_index=i))
    return samples


@pytest.fixture
def blob_data():
    return blob_samples(24, seed=1), blob_samples(8, seed=2)
