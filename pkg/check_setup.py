"""
Environment check: packages, optional .env overrides, an optional config file
and the output directory.

    python check_setup.py [config.env]
"""
import importlib
import os
import sys

from dotenv import load_dotenv

REQUIRED = ["numpy", "scipy", "pandas", "pydantic", "dotenv", "networkx", "pyvis", "streamlit", "pytest"]


def check_python_packages():
    print("🔍 Checking Python packages...")
    missing = []
    for name in REQUIRED:
        try:
            importlib.import_module(name)
        except ImportError:
            missing.append(name)
    if missing:
        print(f"❌ Not importable: {', '.join(missing)}")
        print("   Install them with: pip install -r requirements.txt")
        return False
    print(f"✅ {len(REQUIRED)} packages importable")
    return True


def check_env_file():
    """.env is optional; when present its MMSLAM_* keys must resolve to a valid config."""
    print("\n🔍 Checking .env overrides...")
    if not os.path.isfile(".env"):
        print("ℹ️  No .env, running on defaults (see .env.example)")
        return True
    load_dotenv()
    from config import load_config

    try:
        cfg = load_config()
    except ValueError as e:
        print(f"❌ .env overrides rejected: {e}")
        return False
    print(f"✅ .env resolves (preset {cfg.preset}, matching {cfg.matching_label})")
    return True


def check_config_file(path):
    print(f"\n🔍 Checking config file {path}...")
    from config import load_config

    try:
        cfg = load_config(path)
    except ValueError as e:
        print(f"❌ {path} rejected: {e}")
        return False
    print(f"✅ {path} parsed (preset {cfg.preset}, matching {cfg.matching_label})")
    return True


def check_output_dir():
    print("\n🔍 Checking output directory...")
    load_dotenv()
    out = os.getenv("MMSLAM_OUTPUT_DIR", "runs")
    marker = os.path.join(out, ".write_test")
    try:
        os.makedirs(out, exist_ok=True)
        with open(marker, "w") as f:
            f.write("ok")
        os.remove(marker)
    except OSError as e:
        print(f"❌ Cannot write to {out}: {e}")
        return False
    print(f"✅ Runs will be written to {out}")
    return True


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    print("📡 mmSLAM setup check")
    print("-" * 40)

    checks = {"Python packages": check_python_packages, "Environment": check_env_file}
    if argv:
        checks["Config file"] = lambda: check_config_file(argv[0])
    checks["Output directory"] = check_output_dir
    outcome = {name: check() for name, check in checks.items()}

    print("\n" + "-" * 40)
    for name, ok in outcome.items():
        print(f"{'✅' if ok else '❌'} {name}")
    if all(outcome.values()):
        print("\n🎉 Ready. Try: python cli.py simulate --out data/loop && python cli.py run data/loop")
        return 0
    print("\n⚠️  Fix the failing checks above and run again.")
    return 1


if __name__ == "__main__":
    sys.exit(main())
