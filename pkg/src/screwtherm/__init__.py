"""Isogeometric thermal-expansion and clearance analysis for twin-screw
compressors: spline kernel, rotor/casing geometry generation, Galerkin
thermoelastic solver and clearance postprocessing."""

__version__ = "0.1.0"

_SUBMODULES = (
    "splinecore",
    "geomgen",
    "discretize",
    "thermoelastic",
    "postproc",
    "serialization",
    "synthetic",
    "cli",
    "errors",
)


def __getattr__(name):
    # lazy submodule access keeps `import screwtherm` cheap for the CLI
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
