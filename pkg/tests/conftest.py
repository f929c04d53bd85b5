import numpy as np
import pytest

from hcsbench.data import EmbeddingTable


def make_table(embeddings, types=None, experiments=None, genes=None, perturbations=None, positions=None, **extra):
    """Small EmbeddingTable from arrays; defaults give one gene per row."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    types = types or ["gene_knockout_guide"] * n
    experiments = experiments or ["E0"] * n
    genes = genes or [f"G{i}" for i in range(n)]
    perturbations = perturbations or [f"{g}_g0" if g else f"P{i}" for i, g in enumerate(genes)]
    positions = positions or [f"A{i:02d}" for i in range(n)]
    records = []
    for i in range(n):
        rec = dict(
            well_id=f"w{i}",
            experiment_id=experiments[i],
            plate_id="P1",
            well_position=positions[i],
            perturbation_id=perturbations[i],
            perturbation_type=types[i],
            gene_id=genes[i] if types[i] in ("gene_knockout_guide", "sirna") else None,
            concentration=None,
            cell_type="c",
        )
        for k, v in extra.items():
            rec[k] = v[i]
        records.append(rec)
    return EmbeddingTable.from_records(records, x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
