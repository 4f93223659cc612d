#!/usr/bin/env python3
"""
Setup script for the BEAS federated ledger simulator
This script helps set up the development environment
"""

import shutil
import subprocess
import sys
from pathlib import Path

MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def run_command(command, description):
    """Run a shell command and handle errors."""
    print(f"🔄 {description}...")
    try:
        subprocess.run(command, shell=True, check=True, capture_output=True, text=True)
        print(f"✅ {description} completed successfully")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ {description} failed:")
        print(f"   Command: {command}")
        print(f"   Error: {e.stderr}")
        return False


def check_requirements():
    """Check if required tools are installed."""
    print("🔍 Checking system requirements...")
    if sys.version_info < (3, 8):
        print(f"❌ Python 3.8+ required, found {sys.version.split()[0]}")
        return False

    missing = [tool for tool in ("pip",) if shutil.which(tool) is None]
    if missing:
        print(f"❌ Missing required tools: {', '.join(missing)}")
        return False
    print("✅ python and pip are installed")
    return True


def create_env_file():
    """Create .env file from template."""
    print("📝 Creating environment file...")
    env_template = Path("env_demo.txt")
    env_file = Path(".env")

    if env_file.exists():
        print("⚠️  .env file already exists, skipping...")
        return True
    if not env_template.exists():
        print("❌ env_demo.txt not found")
        return False
    shutil.copy(env_template, env_file)
    print("✅ .env file created from template")
    return True


def install_python_dependencies():
    """Install Python dependencies."""
    print("📦 Installing Python dependencies...")
    return run_command(f"{sys.executable} -m pip install -r requirements.txt", "Installing Python packages")


def create_directories():
    """Create the run output and dataset directories."""
    for directory in (Path("runs"), Path("data") / "mnist"):
        directory.mkdir(parents=True, exist_ok=True)
    print("✅ runs/ and data/mnist/ are ready")
    return True


def check_mnist():
    """Report whether the MNIST IDX files are in place."""
    data_dir = Path("data") / "mnist"
    missing = [
        name for name in MNIST_FILES
        if not (data_dir / name).exists() and not (data_dir / f"{name}.gz").exists()
    ]
    if missing:
        print(f"⚠️  MNIST files missing from {data_dir}: {', '.join(missing)}")
        print("   The mnist_* experiments need them; synthetic experiments run without them")
        return False
    print("✅ MNIST IDX files found")
    return True


def main():
    """Main setup function."""
    print("🚀 BEAS Federated Ledger Simulator Setup")
    print("=" * 50)

    if not check_requirements():
        sys.exit(1)
    if not create_env_file():
        sys.exit(1)
    if not install_python_dependencies():
        sys.exit(1)
    create_directories()
    check_mnist()

    print("\n🎉 Setup completed!")
    print("\n📋 Next steps:")
    print("1. python -m pytest                                            # Run the test suite")
    print("2. python -m app.cli run --config experiments/images_clean.json   # Run an experiment")
    print("3. python -m app.cli verify --ledger runs/images_clean/images_clean.beas")
    print("4. python -m app.cli serve --ledger-dir runs                    # Browse ledgers at http://localhost:8000/docs")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        # Invoked by a build frontend (pip/setuptools): package metadata lives in pyproject.toml.
        from setuptools import setup

        setup()
    else:
        main()
