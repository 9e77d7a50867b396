"""Two-stage lesion detection: Saab radiomics candidates, CNN residue correction."""

__version__ = "0.1.0"
