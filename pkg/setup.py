"""Build script for the optional compiled kernel extension.

The package is pure Python plus numpy; the Cython extension only speeds up
a handful of inner loops (row softmax, layer norm, fused Adam, scatter-add).
If the extension cannot be built the install still succeeds and the package
falls back to the numpy implementation at import time.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "dagquery.kernels._core",
                ["src/dagquery/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-ffast-math"],
                extra_link_args=["-lmvec", "-lm"],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
