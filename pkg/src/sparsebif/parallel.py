"""Worker-count policy shared by the threaded stages."""
import os


def workers():
    """Thread cap from ``SPARSEBIF_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("SPARSEBIF_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n
