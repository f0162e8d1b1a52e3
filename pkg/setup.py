import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FEATLOSS_SR_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        # fp contraction off: results must match the numpy fallback bit for bit
        ext = Extension(
            "featloss_sr.tensor._conv_ext",
            ["src/featloss_sr/tensor/_conv_ext.pyx"],
            extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
        )
        ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
