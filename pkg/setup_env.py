#!/usr/bin/env python3
"""
Environment setup script for the Caption-Flow Lab
This script helps users set up their .env file securely
"""

import getpass
import os
from pathlib import Path

REWRITER_CHOICES = ("rule", "subprocess", "http", "chat")
PROVIDER_CHOICES = ("openai", "ollama", "openrouter")


def _choose(prompt: str, choices, default: str) -> str:
    answer = input(f"   {prompt} {'/'.join(choices)} [{default}]: ").lower().strip()
    if not answer:
        return default
    if answer not in choices:
        print(f"   ⚠️  Unknown choice '{answer}', using {default}")
        return default
    return answer


def setup_environment():
    """Interactive setup for environment variables"""
    print("🔧 Caption-Flow Lab - Environment Setup")
    print("=" * 50)
    print("This script will help you set up your .env file securely.")
    print("Your API keys will be stored locally and never shared.\n")

    # Check if .env already exists
    env_file = Path(".env")
    if env_file.exists():
        print("⚠️  .env file already exists!")
        overwrite = input("Do you want to overwrite it? (y/N): ").lower().strip()
        if overwrite != "y":
            print("Setup cancelled.")
            return

    env_vars = {}

    print("\n📝 Caption Rewriter")
    print("-" * 30)
    print("   rule: built-in deterministic rewriter (no keys needed)")
    print("   subprocess: a local program speaking one JSON line per request")
    print("   http: a POST endpoint")
    print("   chat: a hosted or local chat model")
    kind = _choose("Rewriter kind", REWRITER_CHOICES, "rule")
    env_vars["REWRITER_KIND"] = kind

    if kind == "http":
        env_vars["REWRITER_ENDPOINT"] = input("   Endpoint URL: ").strip()
    elif kind == "subprocess":
        command = input("   Command [python scripts/rule_rewriter_server.py]: ").strip()
        env_vars["REWRITER_COMMAND"] = command or "python scripts/rule_rewriter_server.py"
    elif kind == "chat":
        provider = _choose("AI provider", PROVIDER_CHOICES, "openrouter")
        env_vars["AI_PROVIDER"] = provider
        if provider == "openai":
            print("   Get your key from: https://platform.openai.com/api-keys")
            env_vars["OPENAI_API_KEY"] = getpass.getpass("   Enter your OpenAI API key: ").strip()
        elif provider == "openrouter":
            env_vars["OPENROUTER_API_KEY"] = getpass.getpass("   Enter your OpenRouter API key: ").strip()
            model = input("   OpenRouter model [openrouter/auto]: ").strip()
            env_vars["OPENROUTER_MODEL"] = model or "openrouter/auto"
        else:
            host = input("   Ollama host [http://127.0.0.1:11434]: ").strip()
            env_vars["OLLAMA_HOST"] = host or "http://127.0.0.1:11434"
            model = input("   Ollama model [llama3.1:8b-instruct]: ").strip()
            env_vars["OLLAMA_MODEL"] = model or "llama3.1:8b-instruct"

    print("\n📁 Paths")
    print("-" * 30)
    artifacts = input("   Artifact directory [artifacts]: ").strip()
    env_vars["ARTIFACT_DIR"] = artifacts or "artifacts"

    # Write .env file
    print("\n💾 Writing .env file...")
    try:
        with open(".env", "w") as f:
            f.write("# Caption-Flow Lab - Environment Variables\n")
            f.write("# Generated by setup_env.py\n\n")
            for key, value in env_vars.items():
                f.write(f"{key}={value}\n")

        print("✅ .env file created successfully!")

        # Verify the setup
        print("\n🔍 Verifying configuration...")
        try:
            from dotenv import load_dotenv

            load_dotenv(override=True)
            print(f"✅ Rewriter kind: {os.getenv('REWRITER_KIND')}")
            if kind == "chat" and not any(
                os.getenv(k) for k in ("OPENAI_API_KEY", "OPENROUTER_API_KEY", "OLLAMA_HOST")
            ):
                print("⚠️  No chat credentials set; the rule-based rewriter will be used instead")

            print("✅ Environment configuration complete!")
            print("\n🚀 You can now run the lab:")
            print("   python run.py pipeline")

        except ImportError:
            print("⚠️  python-dotenv not installed. Install with: pip install python-dotenv")

    except Exception as e:
        print(f"❌ Error creating .env file: {e}")


if __name__ == "__main__":
    setup_environment()
