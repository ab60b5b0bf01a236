"""Build script for the optional compiled kernels.

Package metadata lives in pyproject.toml.  If Cython or a compiler is missing
the package still installs and falls back to the numpy kernels.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "regmap._kernels._locate",
                ["src/regmap/_kernels/_locate.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
