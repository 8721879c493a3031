import os

import numpy as np
from setuptools import Extension, setup

# MFMC_NO_EXT=1 skips the compiled kernels; the package then runs on the
# pure-numpy fallback.
ext_modules = []
if not os.environ.get("MFMC_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "mfmc._ext",
                    ["src/mfmc/_ext.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
