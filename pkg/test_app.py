"""
Smoke tests for the Caption-Flow Lab: imports, configuration, directories
and the results store
"""

import os
import sys
from pathlib import Path

# Add the project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))


def test_imports():
    """Test that all required modules can be imported"""
    print("Testing imports...")

    import numpy  # noqa: F401
    import openpyxl  # noqa: F401
    import pandas  # noqa: F401
    import scipy  # noqa: F401

    from backend.bench import ExperimentConfig, Pipeline  # noqa: F401
    from backend.captionaug import load_rulesets  # noqa: F401
    from backend.encoders import train_classifier, train_dual  # noqa: F401
    from backend.flowmatch import pretrain  # noqa: F401
    from backend.grpo import train_grpo  # noqa: F401
    from backend.results_store import ResultsStore  # noqa: F401
    from backend.rewriters import build_rewriter  # noqa: F401
    from backend.rlrewards import RewardModel  # noqa: F401

    print("✅ Backend modules imported successfully")


def test_config():
    """Test configuration loading"""
    print("\nTesting configuration...")

    import config

    for attr in ["APP_TITLE", "APP_VERSION", "ARTIFACT_DIR", "RESULTS_DB", "REWRITER_KIND", "LOG_DIR"]:
        assert hasattr(config, attr), f"Config attribute {attr} missing"
        print(f"✅ Config attribute {attr} found")


def test_default_experiment_loads():
    from backend.bench import ExperimentConfig

    cfg = ExperimentConfig.load(project_root / "data" / "default_experiment.json")
    assert cfg.to_dict() == ExperimentConfig().to_dict()
    print(f"✅ Default experiment digest {cfg.digest()[:12]}")


def test_directories():
    """Test required directories exist"""
    print("\nTesting directories...")

    for dir_name in ["data", "backend", "scripts"]:
        assert (project_root / dir_name).is_dir(), f"Directory {dir_name} missing"
        print(f"✅ Directory {dir_name} exists")
    for file_name in ["vocabulary.txt", "rulesets.json", "default_experiment.json"]:
        assert (project_root / "data" / file_name).exists(), f"data/{file_name} missing"


def test_results_store(tmp_path=None):
    """Test results store initialization and round trip"""
    print("\nTesting results store...")

    from backend.results_store import ResultsStore

    db_path = Path(tmp_path or ".") / "test_results.db"
    try:
        store = ResultsStore(str(db_path))
        store.record_run("artifacts/x", "gen-data", "ok", "abc", 0, 1.5)
        report = {
            "model_id": "dataaug",
            "fd_mean": 1.0,
            "fd_std": 0.1,
            "kl_mean": 0.2,
            "kl_std": 0.01,
            "clap_mean": 0.5,
            "clap_std": 0.02,
            "config_digest": "abc",
        }
        store.save_report("artifacts/x", report, seed=0, wall_time=2.0)
        runs = store.get_runs("artifacts/x")
        assert runs and runs[0]["stage"] == "gen-data"
        df = store.reports_dataframe("artifacts/x")
        assert list(df["model_id"]) == ["dataaug"]
        assert store.get_reports()[0]["report"]["clap_mean"] == 0.5
        print("✅ Results store round trip successful")
    finally:
        if db_path.exists():
            os.remove(db_path)


def main():
    """Run all tests"""
    print("🧪 Running Caption-Flow Lab smoke tests\n")

    tests = [
        ("Import Tests", test_imports),
        ("Directory Tests", test_directories),
        ("Config Tests", test_config),
        ("Experiment Config Tests", test_default_experiment_loads),
        ("Results Store Tests", test_results_store),
    ]

    passed = 0
    total = len(tests)

    for test_name, test_func in tests:
        print(f"\n{'='*50}")
        print(f"Running {test_name}")
        print("=" * 50)

        try:
            test_func()
            passed += 1
            print(f"✅ {test_name} PASSED")
        except Exception as e:
            print(f"❌ {test_name} FAILED: {e}")

    print(f"\n{'='*50}")
    print(f"Test Results: {passed}/{total} tests passed")
    print("=" * 50)

    if passed == total:
        print("🎉 All tests passed! The lab is ready to use.")
        return True
    print("⚠️  Some tests failed. Please check the errors above.")
    return False


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
