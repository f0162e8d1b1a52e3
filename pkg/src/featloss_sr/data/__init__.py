"""NIfTI I/O, resampling, normalisation, LR/HR pairs, splits and the synthetic phantom."""
from .dataset import CaseSplit, SrPair, apportion, make_pairs, make_split, normalize, restore
from .nifti import Nifti1Volume, read_nifti, write_nifti
from .phantom import Phantom, PhantomSpec, generate_phantom
from .resample import bicubic_resample, crop_to_multiple, cubic_kernel

__all__ = [
    "CaseSplit", "SrPair", "apportion", "make_pairs", "make_split", "normalize", "restore",
    "Nifti1Volume", "read_nifti", "write_nifti", "Phantom", "PhantomSpec", "generate_phantom",
    "bicubic_resample", "crop_to_multiple", "cubic_kernel",
]
