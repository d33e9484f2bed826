"""Builds the optional compiled forest kernels; the package works without them."""
import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "tcnet.forest._kernels",
        ["src/tcnet/forest/_kernels.pyx"],
        include_dirs=[np.get_include()],
        language="c++",
        # No fused multiply-add: keeps results identical to the numpy fallback.
        extra_compile_args=["-O2", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
