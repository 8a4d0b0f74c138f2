#!/usr/bin/env python3
"""
psfa Version Checker - Check installation and provide usage guidance
"""

import sys


def check_psfa_installation():
    """Check psfa installation and provide usage guidance"""

    print("psfa Group Sparse Factor Analysis - Version Checker")
    print("=" * 52)

    try:
        import psfa
    except ImportError as e:
        print("❌ psfa is not installed")
        print(f"   Error: {e}")
        print("\n🔧 Installation Instructions:")
        print("   pip install -e .")
        return False

    print("✅ psfa library is installed")
    info = psfa.version()
    print("\n📋 Current Installation:")
    print(f"   Version: {info.get('version', 'Unknown')}")
    print(f"   Mode: {info.get('mode', 'Unknown')}")
    print(f"   numpy: {info.get('numpy', 'Unknown')}")
    print(f"   scipy: {info.get('scipy', 'Unknown')}")

    print("\n🧪 Testing Basic Functionality:")
    for name in ('help', 'version', 'cli', 'fit', 'group_pca', 'validate_dataset', 'amari_index'):
        mark = "✅" if hasattr(psfa, name) else "❌"
        print(f"   {mark} psfa.{name}")

    try:
        ds, _ = psfa.generate_synthetic(psfa.SeededRng(0), V=30, T=6, B=2, D_true=2)
        state, report = psfa.fit(ds, psfa.FitOptions(D=3, max_iters=5))
        print(f"   ✅ Tiny fit ran {report.iterations_run} iterations, ELBO {report.elbo_trace[-1]:.3f}")
    except Exception as e:
        print(f"   ❌ Tiny fit failed: {e}")
        return False

    print("\n📚 Usage Examples:")
    print("   psfa generate --out data")
    print("   psfa fit --in data/dataset.psfa --out run --restarts 10")
    print("   psfa eval --est run/A.psfm --ref data/A_true.psfm")
    print("   psfa --version")
    return True


def main():
    success = check_psfa_installation()
    print("\n" + "=" * 52)
    if success:
        print("🎉 psfa is working!")
        print("📖 For full documentation, see Documentation.txt")
    else:
        print("⚠️  Please install psfa first (see README.md)")
    return 0 if success else 1


if __name__ == "__main__":
    sys.exit(main())
