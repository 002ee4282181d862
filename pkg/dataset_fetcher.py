"""
Multibin Dataset Fetcher
Downloads benchmark datasets into the layout data_pipeline expects

MNIST and Fashion-MNIST arrive as gzipped IDX files (kept compressed, the
loader reads .gz directly); CIFAR-10 arrives as one binary tarball that is
extracted next to the download.
"""

import logging
import tarfile
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Union

import requests

from data_pipeline import CIFAR_FILES, IDX_FILES, DatasetId
from errors import FetchError

logger = logging.getLogger(__name__)

MNIST_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
FASHION_URL = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"
CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR10_ARCHIVE = "cifar-10-binary.tar.gz"
CHUNK_SIZE = 1 << 16


class FetchStatus(Enum):
    """Outcome per file"""
    DOWNLOADED = "downloaded"
    CACHED = "cached"
    FAILED = "failed"


@dataclass
class FetchResult:
    """One file of a dataset download"""
    dataset: str
    path: str
    status: FetchStatus
    bytes: int = 0
    seconds: float = 0.0
    error_message: Optional[str] = None


def sources(dataset: Union[DatasetId, str]) -> Dict[str, str]:
    """File name under data_dir/<dataset>/ -> download URL"""
    dataset = DatasetId(dataset)
    if dataset is DatasetId.CIFAR10:
        return {CIFAR10_ARCHIVE: CIFAR10_URL}
    base_url = MNIST_URL if dataset is DatasetId.MNIST else FASHION_URL
    names = [name for pair in IDX_FILES.values() for name in pair]
    return {f"{name}.gz": f"{base_url}{name}.gz" for name in names}


def _cifar_extracted(root: Path) -> bool:
    base = root / "cifar-10-batches-bin"
    return all((base / name).exists() for names in CIFAR_FILES.values() for name in names)


def _download(url: str, target: Path, timeout: int, max_retries: int) -> int:
    """Stream one URL to disk, retrying with exponential backoff; returns bytes written"""
    partial = target.with_name(target.name + ".part")
    for attempt in range(max_retries):
        try:
            written = 0
            with requests.get(url, stream=True, timeout=timeout) as response:
                response.raise_for_status()
                with open(partial, "wb") as f:
                    for chunk in response.iter_content(chunk_size=CHUNK_SIZE):
                        f.write(chunk)
                        written += len(chunk)
            partial.replace(target)
            logger.info(f"Downloaded {url} -> {target} ({written} bytes)")
            return written
        except requests.exceptions.RequestException as e:
            logger.warning(f"Attempt {attempt + 1} failed for {url}: {e}")
            if partial.exists():
                partial.unlink()
            if attempt == max_retries - 1:
                raise FetchError(f"download failed after {max_retries} attempts: {url}: {e}")
            time.sleep(2 ** attempt)
    raise FetchError(f"no download attempts for {url} (max_retries={max_retries})")


def _extract_cifar(archive: Path, root: Path) -> None:
    try:
        with tarfile.open(archive, "r:gz") as tar:
            tar.extractall(root)
    except (tarfile.TarError, OSError) as e:
        archive.unlink(missing_ok=True)
        raise FetchError(f"could not extract {archive}: {e}")
    logger.info(f"Extracted {archive} into {root}")


def fetch_dataset(dataset: Union[DatasetId, str], data_dir: Union[str, Path],
                  max_retries: int = 3, timeout: int = 120) -> List[FetchResult]:
    """Make data_dir/<dataset>/ loadable, downloading only what is missing.

    Args:
        dataset: mnist, fashion or cifar10
        data_dir: root data directory
        max_retries: attempts per file
        timeout: per-request timeout in seconds

    Returns:
        One FetchResult per file. Raises FetchError naming every failed file
        once all files have been attempted.
    """
    dataset = DatasetId(dataset)
    root = Path(data_dir) / dataset.value
    root.mkdir(parents=True, exist_ok=True)
    results = []

    for name, url in sources(dataset).items():
        target = root / name
        plain = root / name[:-3] if name.endswith(".gz") and dataset is not DatasetId.CIFAR10 else None
        start_time = time.time()
        if target.exists() or (plain is not None and plain.exists()) or \
                (dataset is DatasetId.CIFAR10 and _cifar_extracted(root)):
            existing = target if target.exists() else (plain or target)
            size = existing.stat().st_size if existing.exists() else 0
            logger.info(f"{existing} already present")
            results.append(FetchResult(dataset.value, str(existing), FetchStatus.CACHED, size))
            continue
        try:
            written = _download(url, target, timeout, max_retries)
            if dataset is DatasetId.CIFAR10:
                _extract_cifar(target, root)
            results.append(FetchResult(dataset.value, str(target), FetchStatus.DOWNLOADED,
                                       written, time.time() - start_time))
        except FetchError as e:
            logger.error(f"Fetching {name} failed: {e}")
            results.append(FetchResult(dataset.value, str(target), FetchStatus.FAILED,
                                       seconds=time.time() - start_time, error_message=str(e)))

    if dataset is DatasetId.CIFAR10 and (root / CIFAR10_ARCHIVE).exists() and not _cifar_extracted(root):
        _extract_cifar(root / CIFAR10_ARCHIVE, root)

    failed = [r for r in results if r.status is FetchStatus.FAILED]
    if failed:
        raise FetchError(f"{dataset.value}: {len(failed)} file(s) failed: "
                         + "; ".join(r.error_message or r.path for r in failed))
    return results


# Example usage
if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    for result in fetch_dataset("mnist", "data"):
        print(f"{result.path}: {result.status.value} {result.bytes} bytes in {result.seconds:.1f}s")
