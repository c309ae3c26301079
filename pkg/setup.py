import os
import sys

from src import config
from src.utils import setup_directories


def create_directory_structure(root=None):
    """Legt die Datenverzeichnisse des Toolkits an."""
    dirs = setup_directories(root)
    for path in dirs.values():
        print(f"Created directory: {path}")
    return dirs


def main():
    root = sys.argv[1] if len(sys.argv) > 1 else None
    print("Setting up cdweight data directories...")
    create_directory_structure(root)
    base = os.path.basename(os.path.normpath(root or config.DATA_DIR))
    print("\nSetup complete! The following structure has been created:")
    print(f"{base}/")
    print(f"├── {config.INSTANCES_SUBDIR}/")
    print(f"├── {config.PROTOCOLS_SUBDIR}/")
    print(f"├── {config.CACHE_SUBDIR}/")
    print(f"└── {config.RESULTS_SUBDIR}/")


if __name__ == "__main__":
    main()
