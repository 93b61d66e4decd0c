"""Inspect the learned front-end filterbank.

The first front-end layer maps a 400-sample patch to ``frontend_hidden``
units; each unit's incoming weight vector is read as a filter, its
magnitude spectrum computed, and the bank ordered by spectral peak.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import SAMPLE_RATE
from .errors import CheckpointError, ContractError
from .model import AudioTransformer, load_checkpoint

FILTER_LEN = 400
N_BINS = FILTER_LEN // 2 + 1
BIN_HZ = SAMPLE_RATE / FILTER_LEN


@dataclass
class FilterBankView:
    filters: np.ndarray  # [n_filters, 400]
    spectra: np.ndarray  # [n_filters, 201]
    peak_bin: np.ndarray  # [n_filters]
    order: np.ndarray  # permutation; identity until sorted
    original_index: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.original_index is None:
            self.original_index = np.arange(len(self.filters))

    @property
    def peak_hz(self) -> np.ndarray:
        return self.peak_bin * BIN_HZ

    @property
    def energy(self) -> np.ndarray:
        return (self.filters.astype(np.float64) ** 2).sum(axis=1)


def dft_magnitude(x: np.ndarray) -> np.ndarray:
    """One-sided magnitude of the 400-point DFT (bin k is k * 40 Hz)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != FILTER_LEN:
        raise ContractError(f"filters must have {FILTER_LEN} taps, got {x.shape[-1]}")
    return np.abs(np.fft.rfft(x, axis=-1))


def view_from_filters(filters: np.ndarray) -> FilterBankView:
    filters = np.asarray(filters, dtype=np.float64)
    spectra = dft_magnitude(filters)
    # argmax picks the lowest bin on ties; DC counts as a peak
    peak = spectra.argmax(axis=-1)
    return FilterBankView(filters, spectra, peak, np.arange(len(filters)))


def extract_filters(source) -> FilterBankView:
    """Read first-layer filters from a model or a checkpoint path (unsorted)."""
    model = source if isinstance(source, AudioTransformer) else load_checkpoint(source)
    W = model.frontend[0].W.data
    if W.shape[0] != FILTER_LEN:
        raise CheckpointError(f"front-end input dim is {W.shape[0]}, expected {FILTER_LEN}")
    return view_from_filters(W.T)


def sort_by_peak(view: FilterBankView) -> FilterBankView:
    """Stable sort by peak bin; ties keep original index order."""
    order = np.argsort(view.peak_bin, kind="stable")
    return FilterBankView(
        filters=view.filters[order],
        spectra=view.spectra[order],
        peak_bin=view.peak_bin[order],
        order=order,
        original_index=view.original_index[order],
    )


def peak_table(view: FilterBankView) -> list[tuple[int, int, float]]:
    """``(rank, original_index, peak_hz)`` rows in view order."""
    return [(r, int(i), float(hz)) for r, (i, hz) in enumerate(zip(view.original_index, view.peak_hz))]


def top_energy_peak_bins(view: FilterBankView, k: int) -> np.ndarray:
    """Distinct peak bins among the ``k`` highest-energy filters."""
    idx = np.argsort(-view.energy, kind="stable")[:k]
    return np.unique(view.peak_bin[idx])


def _fmt(x) -> str:
    return repr(float(x))


def export_analysis(view: FilterBankView, out_dir) -> list[Path]:
    """Write filters_sorted.csv, spectra_sorted.csv (raw and max-normalized) and peaks.csv."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    written = []
    prefix = list(zip(range(len(view.filters)), view.original_index, view.peak_hz))

    def dump(name: str, header: list[str], matrix, fmt=_fmt) -> None:
        path = out / name
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for (rank, orig, hz), values in zip(prefix, matrix):
                    w.writerow([rank, int(orig), _fmt(hz)] + [fmt(v) for v in values])
        except OSError as exc:
            raise OSError(f"failed writing {path}: {exc}") from exc
        written.append(path)

    base = ["rank", "original_index", "peak_hz"]
    dump("filters_sorted.csv", base + [f"tap_{i}" for i in range(FILTER_LEN)], view.filters)
    bins = [f"bin_{k}" for k in range(view.spectra.shape[1])]
    dump("spectra_sorted.csv", base + bins, view.spectra)
    peak_mag = view.spectra.max(axis=1, keepdims=True)
    normalized = np.divide(view.spectra, peak_mag, out=np.zeros_like(view.spectra), where=peak_mag > 0)
    dump("spectra_sorted_normalized.csv", base + bins, normalized)
    peaks = [(int(b), e) for b, e in zip(view.peak_bin, view.energy)]
    dump("peaks.csv", base + ["peak_bin", "energy"], peaks, fmt=lambda v: v if isinstance(v, int) else _fmt(v))
    return written


def read_peaks(path) -> list[tuple[int, int, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["rank"]), int(r["original_index"]), float(r["peak_hz"])) for r in csv.DictReader(fh)]
