#!/usr/bin/env python3
"""
MoLRG Lab Dependency Test Script
Tests all required dependencies before running the lab.
"""

import sys


def test_python_version():
    """Check Python version (3.11+ required)."""
    version = sys.version_info
    if version.major == 3 and version.minor >= 11:
        print(f"✓ Python {version.major}.{version.minor}.{version.micro}: OK")
        return True
    print(f"✗ Python {version.major}.{version.minor}.{version.micro}: REQUIRES Python 3.11+")
    return False


def test_dependency(name, import_name=None):
    """Test a single Python dependency."""
    if import_name is None:
        import_name = name.replace('-', '_')

    try:
        module = __import__(import_name)
        print(f"✓ {name}: OK ({getattr(module, '__version__', 'unknown version')})")
        return True
    except ImportError:
        print(f"✗ {name}: NOT INSTALLED")
        return False


def test_svg_backend():
    """matplotlib must render SVG without a display."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        from matplotlib.backends.backend_svg import FigureCanvasSVG  # noqa: F401
        print("✓ matplotlib SVG backend: OK")
        return True
    except Exception as e:
        print(f"✗ matplotlib SVG backend: ERROR ({e})")
        return False


def main():
    """Run all dependency tests."""
    print("=" * 60)
    print("MoLRG Lab Dependency Test")
    print("=" * 60)
    print()

    results = [test_python_version()]
    print()

    print("Python Dependencies:")
    results.append(test_dependency('numpy'))
    results.append(test_dependency('scipy'))
    results.append(test_dependency('PyYAML', 'yaml'))
    results.append(test_dependency('matplotlib'))
    results.append(test_dependency('pytest'))
    print()

    print("Rendering:")
    results.append(test_svg_backend())
    print()

    print("=" * 60)
    if all(results):
        print("✓ All dependencies installed successfully!")
        print("You can now run: python3 run.py check --quick")
        return 0
    print("✗ Some dependencies are missing.")
    print("Install Python packages: pip3 install -r requirements.txt")
    return 1


if __name__ == "__main__":
    sys.exit(main())
