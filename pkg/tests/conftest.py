import pytest
from panotool import *

TEST_PATH = 'tests/testfiles/'

@pytest.fixture(scope="session")
def testpath():
    return TEST_PATH

# 256 x 32 panoramas: windows are 32 px wide, x16 strides by 16 px
@pytest.fixture(scope="session")
def small_synth():
    return synth_dataset(SynthParams(seed=3, num_places=12, pano_width_px=256, pano_height_px=32,
                                     queries_per_place=2, offset_step_px=32))

@pytest.fixture(scope="session")
def seam_synth():
    return synth_dataset(SynthParams(seed=5, num_places=12, pano_width_px=256, pano_height_px=32,
                                     queries_per_place=4, offset_step_px=16,
                                     seam_straddle_fraction=0.5))
