#!/usr/bin/env python3
"""
Command-line entry point for the Caption-Flow Lab

    python run.py pipeline --config data/default_experiment.json --out artifacts/run0
    python run.py grpo --out artifacts/run0 --reward clap --resume
    python run.py sweep --seeds 0 1 2 3 4 --out artifacts/sweep
"""
import argparse
import logging
import os
import subprocess
import sys
from pathlib import Path

import config
from backend.bench import STAGES, ExperimentConfig, Pipeline, exit_code, sweep
from backend.errors import LabError
from backend.results_store import ResultsStore
from backend.rlrewards import REWARD_VARIANTS

logger = logging.getLogger("run")


def check_python_version():
    """Check if Python version is 3.10+"""
    if sys.version_info < (3, 10):
        print("❌ Python 3.10 or higher is required")
        print(f"Current version: {sys.version}")
        return False
    print(f"✅ Python version: {sys.version.split()[0]}")
    return True


def check_dependencies():
    """Check if required dependencies are installed"""
    # Package name -> import name mapping
    required_packages = {
        "numpy": "numpy",
        "scipy": "scipy",
        "pandas": "pandas",
        "requests": "requests",
        "python-dotenv": "dotenv",
        "openpyxl": "openpyxl",
        "streamlit": "streamlit",
    }

    missing_packages = []

    for package_name, import_name in required_packages.items():
        try:
            __import__(import_name)
            print(f"✅ {package_name} is installed")
        except ImportError:
            missing_packages.append(package_name)
            print(f"❌ {package_name} is missing")

    if missing_packages:
        print(f"\nMissing packages: {', '.join(missing_packages)}")
        print("Install them with: pip install -r requirements.txt")
        return False

    return True


def create_directories():
    """Create required directories if they don't exist"""
    for directory in ["data", config.ARTIFACT_DIR, config.LOG_DIR]:
        Path(directory).mkdir(parents=True, exist_ok=True)
        print(f"✅ Directory {directory} ready")


def check_env_file():
    """Check if .env file exists"""
    if os.path.exists(".env"):
        print("✅ .env file found")
        return True
    print("⚠️  .env file not found")
    print(f"Using defaults: rewriter '{config.REWRITER_KIND}' (run setup_env.py to configure)")
    return False


def run_checks() -> int:
    print("🔎 Caption-Flow Lab environment check")
    print("=" * 50)
    if not check_python_version() or not check_dependencies():
        return 1
    create_directories()
    check_env_file()
    print("=" * 50)
    print("🎉 All checks passed!")
    return 0


def launch_app() -> int:
    try:
        subprocess.run(
            [
                sys.executable,
                "-m",
                "streamlit",
                "run",
                "app.py",
                "--server.port=8501",
                "--server.address=localhost",
            ]
        )
    except KeyboardInterrupt:
        print("\n👋 Application stopped by user")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=config.APP_TITLE)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", default=config.DEFAULT_EXPERIMENT_PATH, help="experiment JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="artifact directory")
        p.add_argument("--reward", choices=REWARD_VARIANTS, action="append", help="reward variant(s) to train/evaluate")
        p.add_argument("--rho", type=float, default=None, help="caption mixing ratio for pretraining")
        p.add_argument("--resume", action="store_true", help="skip completed stages, continue from checkpoints")

    for stage in STAGES:
        common(sub.add_parser(stage, help=f"run the {stage} stage"))
    common(sub.add_parser("pipeline", help="run every stage in order"))
    sweep_parser = sub.add_parser("sweep", help="pipeline over several seeds plus the directional summary")
    common(sweep_parser)
    sweep_parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sub.add_parser("check", help="check the Python environment")
    sub.add_parser("app", help="launch the Streamlit dashboard")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    return cfg.with_overrides(seed=args.seed, rho=args.rho, reward_variants=args.reward)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "check":
        return run_checks()
    if args.command == "app":
        return launch_app()

    config.setup_logging()
    try:
        cfg = load_config(args)
        out = Path(args.out or os.path.join(config.ARTIFACT_DIR, f"seed_{cfg.seed}"))
        store = ResultsStore(config.RESULTS_DB)
        if args.command == "sweep":
            summary = sweep(cfg, args.seeds, out, resume=args.resume, settings=config, store=store)
            print(summary.to_string(index=False))
            return 0 if bool(summary["passed"].all()) else 1
        stages = None if args.command == "pipeline" else [args.command]
        root = Pipeline(cfg, out, resume=args.resume, settings=config, store=store).run(stages)
        print(f"✅ {args.command} finished: {root}")
        summary = root / "summary_table.txt"
        if args.command in ("pipeline", "report") and summary.exists():
            print(summary.read_text(encoding="utf-8"))
        return 0
    except LabError as e:
        logger.error(str(e))
        print(f"❌ {e}", file=sys.stderr)
        return exit_code(e)
    except KeyboardInterrupt:
        print("\n👋 Stopped by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
