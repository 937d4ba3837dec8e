"""Build the optional compiled RHS kernel.

The package works without it: ``pinmg._backend`` falls back to the numpy
implementation when the extension is missing. Set ``PINMG_NO_EXT=1`` to skip
the build entirely.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("PINMG_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "pinmg._rhs",
                    ["src/pinmg/_rhs.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
