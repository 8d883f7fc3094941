#!/usr/bin/env python3
"""
MNIST Download
==============
Fetches the four gzipped MNIST IDX files into the dataset root.

Usage:
    python scripts/download_mnist.py [--root data/mnist] [--force]

The root defaults to $FLEXFL_DATA_ROOT, then data/mnist. Each file is parsed
after download so a truncated transfer is caught here rather than at
training time.
"""

import argparse
import os
import sys
from typing import List, Optional

import requests
from dotenv import load_dotenv

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from flexfl.config import ENV_DATA_ROOT
from flexfl.logger import get_logger
from flexfl.services.datasets import MNIST_FILES, IdxFormatError, read_idx
from flexfl.utils import ensure_dir

log = get_logger('datasets')

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
TIMEOUT = 60
CHUNK = 1 << 16


def _fetch(name: str, target: str) -> bool:
    for mirror in MIRRORS:
        url = mirror + name
        try:
            with requests.get(url, stream=True, timeout=TIMEOUT) as response:
                response.raise_for_status()
                tmp = target + '.part'
                with open(tmp, 'wb') as f:
                    for chunk in response.iter_content(CHUNK):
                        f.write(chunk)
            os.replace(tmp, target)
            log.info(f"downloaded {url}")
            return True
        except requests.RequestException as e:
            log.warning(f"{url}: {e}")
    return False


def download(root: str, force: bool = False) -> List[str]:
    """Download missing files; returns the names that could not be fetched."""
    ensure_dir(root)
    failed = []
    for pair in MNIST_FILES.values():
        for name in pair:
            target = os.path.join(root, name + '.gz')
            if os.path.exists(target) and not force:
                log.info(f"present: {target}")
                continue
            if not _fetch(name + '.gz', target):
                failed.append(name)
                continue
            try:
                shape = read_idx(target).shape
                print(f"  {name}: {shape}")
            except IdxFormatError as e:
                log.error(f"{target} is corrupt: {e}")
                os.remove(target)
                failed.append(name)
    return failed


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = argparse.ArgumentParser(description="Download MNIST IDX files")
    parser.add_argument("--root", default=os.environ.get(ENV_DATA_ROOT, "data/mnist"),
                        help="Dataset root directory")
    parser.add_argument("--force", action="store_true", help="Re-download existing files")
    args = parser.parse_args(argv)

    print(f"Dataset root: {os.path.abspath(args.root)}")
    failed = download(args.root, args.force)
    if failed:
        print(f"ERROR: could not fetch {', '.join(failed)}")
        return 1
    print("MNIST ready.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
