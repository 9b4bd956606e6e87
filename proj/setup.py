import os

from pybind11.setup_helpers import Pybind11Extension, build_ext
from setuptools import setup

eigen = os.environ.get("EIGEN3_INCLUDE_DIR", "/usr/include/eigen3")

ext = Pybind11Extension(
    "cdp._cdp",
    ["bindings/py_module.cpp"],
    include_dirs=["include", "vendor", eigen],
    cxx_std=20,
    extra_compile_args=["-O3", "-march=native"],
)

setup(ext_modules=[ext], cmdclass={"build_ext": build_ext})
