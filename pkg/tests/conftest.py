from pathlib import Path

import pytest

from synthaudit.corpus import ClinicalReport, Corpus, ReportSource, load_corpus

FIXTURES = Path(__file__).parent / "fixtures"


def real_report(report_id, text, *codes):
    return ClinicalReport(id=report_id, text=text, codes=codes or ("F32",), source=ReportSource.REAL)


def synthetic_report(report_id, text, *codes, generator="mock-model"):
    return ClinicalReport(id=report_id, text=text, codes=codes or ("F32",), source=ReportSource.SYNTHETIC,
                          generator=generator)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def toy_real():
    """3 codes x 5 real reports of placeholder text"""
    return load_corpus(FIXTURES / "toy_real.jsonl", ReportSource.REAL)


@pytest.fixture
def small_corpus():
    return Corpus([
        real_report("r1", "Animo bajo, insomnio.", "F32"),
        real_report("r2", "Tristeza y fatiga.", "F32", "G47"),
        real_report("r3", "Preocupacion constante.", "F41"),
    ])


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep host settings out of config loading"""
    monkeypatch.delenv("SYNTHAUDIT_BASE_URL", raising=False)
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
