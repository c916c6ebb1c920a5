"""Build script: compiles the optional fast kernels when Cython is available.

The package is fully functional without the extension; kernels fall back to
the pure numpy implementations in prunesearch.kernels.pure.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "prunesearch.kernels._ckernels",
                sources=["src/prunesearch/kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
