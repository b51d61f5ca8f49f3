"""Build the optional Cython kernel core.

If Cython or a C compiler is unavailable the package still installs and
``catsg.kernels`` falls back to the pure numpy implementations.
"""

from setuptools import setup
from setuptools.command.build_ext import build_ext

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - depends on build env
    ext_modules = []
else:
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "catsg._core",
                ["src/catsg/_core.pyx"],
                include_dirs=[np.get_include()],
                # no -ffast-math: kernels must stay bit-reproducible
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover
            print(f"warning: Cython core not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover
            print(f"warning: failed to build {ext.name} ({exc}); using numpy fallback")


setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
