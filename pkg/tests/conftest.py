import json

import pytest

from kgdiag.graph import EdgeKind, build_graph
from kgdiag.normalize import NormalizedConcept

ODEMSA_PAGE = """# Injury - Crush Syndrome

## Symptoms
Entrapment of a limb with compromised circulation.
Significant muscle mass involvement.

## Procedure
Establish IV access and begin fluid resuscitation.
Apply cardiac monitor before extrication.

## History
Prolonged compression longer than one hour.
"""


@pytest.fixture
def crush_graph():
    """One diagnosis, one symptom, one hierarchy parent."""
    return build_graph(
        ["Injury - Crush Syndrome"],
        [("Injury - Crush Syndrome", EdgeKind.HAS_INDICATES, "muscle mass")],
        {"Injury - Crush Syndrome": "Adult Trauma Emergencies"},
    )


@pytest.fixture
def two_disease_graph():
    """Two diagnoses whose different surface forms share one CUI."""
    myalgia_a = NormalizedConcept("muscle pain", "Myalgia", "C0231528", "sosy")
    myalgia_b = NormalizedConcept("aching muscles", "Myalgia", "C0231528", "sosy")
    return build_graph(
        ["disease one", "disease two"],
        [
            ("disease one", EdgeKind.HAS_INDICATES, myalgia_a),
            ("disease two", EdgeKind.HAS_INDICATES, myalgia_b),
        ],
    )


@pytest.fixture
def kb_pages(tmp_path):
    root = tmp_path / "kb_pages"
    root.mkdir()
    (root / "crush-syndrome.txt").write_text(ODEMSA_PAGE, encoding="utf-8")
    return root


@pytest.fixture
def concept_fixture_dir(tmp_path):
    """Candidate files mirroring a ranked concept-search service."""
    root = tmp_path / "concepts"
    root.mkdir()
    candidates = {
        "fever": [
            {"name": "Fever", "cui": "C0015967", "types": ["sosy"]},
        ],
        "high-temperature": [
            {"name": "Temperature taking", "cui": "C0582103", "types": ["topp"]},
            {"name": "Fever", "cui": "C0015967", "types": ["sosy"]},
        ],
        "burning-up": [
            {"name": "Fever", "cui": "C0015967", "types": ["sosy"]},
        ],
        "lung-transplantation": [
            {"name": "Transplantation of lung", "cui": "C0024128", "types": ["topp"]},
        ],
    }
    for slug, rows in candidates.items():
        (root / f"{slug}.json").write_text(json.dumps(rows), encoding="utf-8")
    return root
