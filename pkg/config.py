"""
Configuration settings for the Caption-Flow Lab
"""

import logging
import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Logging
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
LOG_DIR = os.getenv("LOG_DIR", "logs")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Artifacts
ARTIFACT_DIR = os.getenv("ARTIFACT_DIR", "artifacts")
RESULTS_DB = os.getenv("RESULTS_DB", os.path.join(ARTIFACT_DIR, "results.db"))
DEFAULT_EXPERIMENT_PATH = os.getenv("EXPERIMENT_CONFIG", "data/default_experiment.json")
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "0"))
WORKERS = int(os.getenv("WORKERS", "4"))

# Caption rewriter
# REWRITER_KIND can be: "rule", "subprocess", "http" or "chat". Default: rule
REWRITER_KIND = os.getenv("REWRITER_KIND", "rule").lower()
REWRITER_ENDPOINT = os.getenv("REWRITER_ENDPOINT", "")
REWRITER_COMMAND = os.getenv("REWRITER_COMMAND", "python scripts/rule_rewriter_server.py")
REWRITER_TIMEOUT = float(os.getenv("REWRITER_TIMEOUT", "30"))

# OpenAI Configuration
OPENAI_API_KEY = os.getenv("OPENAI_API_KEY", "")

# AI Provider Configuration (used by the "chat" rewriter)
# PROVIDER can be: "openai", "ollama", or "openrouter". Default: openrouter
AI_PROVIDER = os.getenv("AI_PROVIDER", "openrouter").lower()

# Ollama Configuration (used when AI_PROVIDER=="ollama")
OLLAMA_HOST = os.getenv("OLLAMA_HOST", "http://127.0.0.1:11434")
OLLAMA_MODEL = os.getenv("OLLAMA_MODEL", "llama3.1:8b-instruct")

# OpenRouter Configuration (used when AI_PROVIDER=="openrouter")
OPENROUTER_API_KEY = os.getenv("OPENROUTER_API_KEY", "")
OPENROUTER_MODEL = os.getenv("OPENROUTER_MODEL", "openrouter/auto")
OPENROUTER_API_URL = os.getenv(
    "OPENROUTER_API_URL", "https://openrouter.ai/api/v1/chat/completions"
)

# Application Configuration
APP_TITLE = "Caption-Flow Lab: caption augmentation, flow matching and GRPO"
APP_VERSION = "1.0.0"

# AI Model Configuration
DEFAULT_MODEL = os.getenv("DEFAULT_MODEL", "gpt-3.5-turbo")
MAX_TOKENS = int(os.getenv("MAX_TOKENS", "200"))
TEMPERATURE = float(os.getenv("TEMPERATURE", "0.7"))


def setup_logging(level: str = LOG_LEVEL, log_dir: str = LOG_DIR):
    """File + console logging for entry points"""
    Path(log_dir).mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(os.path.join(log_dir, "lab.log")),
            logging.StreamHandler(),
        ],
    )
