"""Synthetic phantoms, TVOL volume I/O, patch sampling and sliding-window assembly."""
from .phantoms import (
    LABELS,
    MODALITIES,
    PhantomSpec,
    VolumeSample,
    generate_phantoms,
    load_dataset,
    load_subject,
    make_phantom,
    zscore,
)
from .sampling import sample_patch, sliding_window_infer, window_starts
from .volume import VolumeFormatError, import_raw, load_volume, save_volume
