import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("MPCRL_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # pure-Python install; the numpy kernel is used instead
        cythonize = None
    if cythonize is not None:
        ext = Extension(
            "mpcrl.ocp._ipm_core",
            ["src/mpcrl/ocp/_ipm_core.pyx"],
            extra_compile_args=["-O3"],
        )
        ext_modules = cythonize(
            [ext],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
