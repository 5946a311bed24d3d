"""Build script: compiles the optional scoring kernel.

The package is fully functional without the extension (a numpy fallback is
selected at import time); set SHOPMATCH_PURE=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the accelerator if we can, fall back to pure python if not."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler / blas headers
            self._skip(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._skip(exc)

    @staticmethod
    def _skip(exc):
        print(f"warning: compiled scoring kernel skipped ({exc}); "
              "using the numpy fallback")


def extensions():
    if os.environ.get("SHOPMATCH_PURE") == "1":
        return []
    if not os.path.exists("src/shopmatch/kernels/_fastscore.pyx"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "shopmatch.kernels._fastscore",
        ["src/shopmatch/kernels/_fastscore.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
