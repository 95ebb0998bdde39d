"""Peptide-spectrum match scoring, open search rescoring and open de novo sequencing."""

__version__ = "0.1.0"
