"""Tab-separated genotype and phenotype files, and atomic writes."""
from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .simkernel import BINARY, CONTINUOUS, GenotypeMatrix, PhenotypeTable

MISSING = "NA"
COVARIATE_PREFIX = "cov_"


class InputError(ValueError):
    """Malformed input file; the message cites the offending line and column."""


def _rows(path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            yield lineno, line.split("\t")


def read_genotype_file(path) -> GenotypeMatrix:
    """Header ``id<TAB>variant...``; one subject per row; cells 0, 1, 2 or NA."""
    it = _rows(path)
    try:
        _, header = next(it)
    except StopIteration:
        raise InputError(f"{path}: empty genotype file") from None
    variant_ids = header[1:]
    if not variant_ids:
        raise InputError(f"{path}: line 1: header lists no variants")
    codes = {"0": 0.0, "1": 1.0, "2": 2.0, MISSING: np.nan}
    ids, rows = [], []
    for lineno, cells in it:
        if len(cells) != len(header):
            raise InputError(f"{path}: line {lineno}: expected {len(header)} fields, found {len(cells)}")
        row = []
        for col, cell in enumerate(cells[1:], 2):
            try:
                row.append(codes[cell.strip()])
            except KeyError:
                raise InputError(
                    f"{path}: line {lineno}, column {col} ({variant_ids[col - 2]}): "
                    f"genotype {cell!r} is not 0, 1, 2 or {MISSING}"
                ) from None
        ids.append(cells[0])
        rows.append(row)
    if len(rows) < 2:
        raise InputError(f"{path}: need at least 2 subjects, found {len(rows)}")
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate subject ids")
    return GenotypeMatrix(np.array(rows, dtype=float), ids, variant_ids)


def format_genotypes(G: GenotypeMatrix) -> str:
    lines = ["\t".join(["id", *G.variant_ids])]
    for sid, row in zip(G.subject_ids, G.values):
        cells = [MISSING if np.isnan(v) else str(int(v)) for v in row]
        lines.append("\t".join([sid, *cells]))
    return "\n".join(lines) + "\n"


def write_genotype_file(path, G: GenotypeMatrix):
    atomic_write(path, format_genotypes(G))


@dataclass
class PhenotypeFileData:
    table: PhenotypeTable
    covariates: Optional[np.ndarray]
    covariate_names: List[str]


def read_phenotype_file(path) -> PhenotypeFileData:
    """Header ``id<TAB>name:binary|name:continuous ... [cov_x ...]``.

    Missing values are rejected everywhere.
    """
    it = _rows(path)
    try:
        _, header = next(it)
    except StopIteration:
        raise InputError(f"{path}: empty phenotype file") from None
    pheno_cols, cov_cols, names, kinds, cov_names = [], [], [], [], []
    for col, name in enumerate(header[1:], 1):
        if name.startswith(COVARIATE_PREFIX):
            cov_cols.append(col)
            cov_names.append(name)
            continue
        base, sep, kind = name.rpartition(":")
        if not sep or kind not in (BINARY, CONTINUOUS) or not base:
            raise InputError(f"{path}: line 1, column {col + 1}: phenotype header {name!r} "
                             f"must be name:binary or name:continuous")
        pheno_cols.append(col)
        names.append(base)
        kinds.append(kind)
    if not pheno_cols:
        raise InputError(f"{path}: line 1: no phenotype columns")
    ids, vals, covs = [], [], []
    for lineno, cells in it:
        if len(cells) != len(header):
            raise InputError(f"{path}: line {lineno}: expected {len(header)} fields, found {len(cells)}")
        row = []
        for col, kind in zip(pheno_cols, kinds):
            v = _number(path, lineno, col, header[col], cells[col])
            if kind == BINARY and v not in (0.0, 1.0):
                raise InputError(f"{path}: line {lineno}, column {col + 1} ({header[col]}): "
                                 f"binary phenotype must be 0 or 1, got {cells[col]!r}")
            row.append(v)
        covs.append([_number(path, lineno, c, header[c], cells[c]) for c in cov_cols])
        ids.append(cells[0])
        vals.append(row)
    if len(vals) < 2:
        raise InputError(f"{path}: need at least 2 subjects, found {len(vals)}")
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate subject ids")
    table = PhenotypeTable(np.array(vals), kinds, names=names, subject_ids=ids)
    cov = np.array(covs) if cov_cols else None
    return PhenotypeFileData(table, cov, cov_names)


def _number(path, lineno, col, name, cell) -> float:
    cell = cell.strip()
    if cell == MISSING or cell == "":
        raise InputError(f"{path}: line {lineno}, column {col + 1} ({name}): missing values are not allowed")
    try:
        v = float(cell)
    except ValueError:
        raise InputError(f"{path}: line {lineno}, column {col + 1} ({name}): {cell!r} is not a number") from None
    if not np.isfinite(v):
        raise InputError(f"{path}: line {lineno}, column {col + 1} ({name}): {cell!r} is not finite")
    return v


def format_phenotypes(Y: PhenotypeTable, covariates=None, covariate_names=None) -> str:
    head = ["id"] + [f"{nm}:{k}" for nm, k in zip(Y.names, Y.kinds)]
    cov = None
    if covariates is not None:
        cov = np.asarray(covariates, dtype=float).reshape(Y.n, -1)
        covariate_names = covariate_names or [f"{COVARIATE_PREFIX}{j}" for j in range(cov.shape[1])]
        head += list(covariate_names)
    lines = ["\t".join(head)]
    for i, sid in enumerate(Y.subject_ids):
        cells = [_fmt(v, k) for v, k in zip(Y.values[i], Y.kinds)]
        if cov is not None:
            cells += [repr(float(v)) for v in cov[i]]
        lines.append("\t".join([sid, *cells]))
    return "\n".join(lines) + "\n"


def _fmt(v, kind) -> str:
    return str(int(v)) if kind == BINARY else repr(float(v))


def write_phenotype_file(path, Y: PhenotypeTable, covariates=None, covariate_names=None):
    atomic_write(path, format_phenotypes(Y, covariates, covariate_names))


def atomic_write(path, text: str):
    """Write via a temporary file in the target directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(str(path)))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def align_subjects(G: GenotypeMatrix, P: PhenotypeFileData):
    """Restrict both inputs to their shared subject ids, in genotype-file order.

    Returns ``(G, P, dropped)`` where ``dropped`` counts subjects present in
    only one file.
    """
    pid = {s: i for i, s in enumerate(P.table.subject_ids)}
    gi = [i for i, s in enumerate(G.subject_ids) if s in pid]
    if not gi:
        raise InputError("genotype and phenotype files share no subject ids")
    pi = [pid[G.subject_ids[i]] for i in gi]
    dropped = (G.n - len(gi)) + (P.table.n - len(pi))
    if len(gi) < 2:
        raise InputError("fewer than 2 subjects are shared by the genotype and phenotype files")
    G2 = G.take_subjects(gi)
    table = P.table.take_subjects(pi)
    cov = P.covariates[pi] if P.covariates is not None else None
    return G2, PhenotypeFileData(table, cov, P.covariate_names), dropped
