import numpy as np
import pytest

from petctseg.types import Grid3D, LabelMask, Study, Volume


def make_mask(values, spacing=(1.0, 1.0, 1.0)):
    values = np.asarray(values, dtype=np.uint8)
    return LabelMask(grid=Grid3D(shape=values.shape, spacing=spacing), values=values)


def mask_from_coords(shape, coords, spacing=(1.0, 1.0, 1.0)):
    vals = np.zeros(shape, dtype=np.uint8)
    for c in coords:
        vals[tuple(c)] = 1
    return make_mask(vals, spacing)


def make_study(study_id="s1", shape=(4, 4, 4), ct=None, pet=None, label=None, tracer="FDG", spacing=(1.0, 1.0, 1.0)):
    grid = Grid3D(shape=shape, spacing=spacing)
    if ct is None:
        ct = np.zeros(shape, dtype=np.float32)
    if pet is None:
        pet = np.zeros(shape, dtype=np.float32)
    mask = LabelMask(grid=grid, values=np.asarray(label, dtype=np.uint8)) if label is not None else None
    positive = mask is not None and mask.foreground_count > 0
    return Study(
        id=study_id,
        tracer=tracer,
        ct=Volume(grid=grid, values=np.asarray(ct, dtype=np.float32)),
        pet=Volume(grid=grid, values=np.asarray(pet, dtype=np.float32)),
        label=mask,
        positive=positive,
    )


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Eight 24-cube phantom studies written to disk once per session."""
    from petctseg import synth

    out = tmp_path_factory.mktemp("corpus")
    manifest = synth.generate_corpus(
        out, seed=77, n_studies=8, shape=(24, 24, 24), difficulties="uniform"
    )
    return out, manifest
