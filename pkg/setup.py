import os

from setuptools import Extension, setup

# The rasterizer ships a compiled kernel module plus a pure-numpy fallback.
# Builds without Cython (or without the .pyx checked out) still produce a
# working package; the renderer selects the fallback at import time.
ext_modules = []
pyx = os.path.join("src", "splatdiff", "renderer", "_kernels.pyx")
if os.path.exists(pyx):
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "splatdiff.renderer._kernels",
                    [pyx],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
