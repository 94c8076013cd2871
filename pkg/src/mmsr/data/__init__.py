from .patches import (
    DatasetManifest,
    PatchPair,
    PatchSample,
    build_patch_pair,
    extract_patches,
    load_patch_cache,
    patch_pair_from_cache,
    sample_patches,
    save_patch_cache,
)
from .preprocess import LungMask, denormalize, normalize, segment_lung
from .synthetic import (
    SyntheticConfig,
    SyntheticDataset,
    make_synthetic_dataset,
    read_dataset_index,
    write_synthetic_dataset,
)
from .volumes import CTVolume, IntensityMap, load_volume, save_volume
