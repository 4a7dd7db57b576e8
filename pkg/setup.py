from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "lbi._kernels._core",
                ["src/lbi/_kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython/numpy at build time: install pure-Python; the kernel
    # dispatcher falls back to the numpy backend at import.
    extensions = []

setup(ext_modules=extensions)
