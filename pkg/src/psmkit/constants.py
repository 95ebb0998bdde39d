"""Monoisotopic mass constants (Da)."""

PROTON = 1.007276466
H2O = 18.010565
NH3 = 17.026549

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"

RESIDUE_MASSES = {
    "G": 57.021464,
    "A": 71.037114,
    "S": 87.032028,
    "P": 97.052764,
    "V": 99.068414,
    "T": 101.047679,
    "C": 103.009185,
    "L": 113.084064,
    "I": 113.084064,
    "N": 114.042927,
    "D": 115.026943,
    "Q": 128.058578,
    "K": 128.094963,
    "E": 129.042593,
    "M": 131.040485,
    "H": 137.058912,
    "F": 147.068414,
    "R": 156.101111,
    "Y": 163.063329,
    "W": 186.079313,
}

# Carbamidomethyl[C], applied to every cysteine unless overridden.
DEFAULT_FIXED_MODS = {"C": 57.021464}

# Residues that gate neutral losses on a fragment.
NH3_LOSS_RESIDUES = frozenset("KRNQ")
H2O_LOSS_RESIDUES = frozenset("STED")
