"""
MLMI Bench - Simulation harness comparing multilevel multiple imputation methods
"""
import os
import sys
import importlib.util

__version__ = '0.1.0'


def get_package_dir():
    """Get the directory where this package is installed"""
    spec = importlib.util.find_spec('mlmi_bench')
    if spec and spec.origin:
        return os.path.dirname(spec.origin)

    # Fallback to current file's directory
    return os.path.dirname(os.path.abspath(__file__))


def get_project_root():
    """Parent of the package directory (the checkout root in development mode)"""
    return os.path.dirname(get_package_dir())



def setup_logging(verbose=False):
    """
    Configure the root logger once for command-line use
    Priority: MLMI_LOG_LEVEL env > --verbose (DEBUG) > INFO
    """
    import logging
    level_name = os.environ.get('MLMI_LOG_LEVEL', '').upper()
    level = getattr(logging, level_name, None) if level_name else None
    if not isinstance(level, int):
        level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format='%(message)s', stream=sys.stderr, force=True)
