"""Builds the optional compiled kernel core (ldae._native).

The package is fully functional without it: ldae.kernels falls back to the
pure-numpy implementations at import time. Set LDAE_SKIP_NATIVE=1 to force a
pure-Python build.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("LDAE_SKIP_NATIVE") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext = Extension(
            "ldae._native",
            ["src/ldae/_native.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
            optional=True,  # a failed compile must not break the install
        )
        ext_modules = cythonize([ext], language_level="3")
    except ImportError:
        pass

setup(ext_modules=ext_modules)
