"""Exception hierarchy shared across the package."""


class SafeDrugError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(SafeDrugError, ValueError):
    pass


class NonFiniteError(SafeDrugError, FloatingPointError):
    pass


class InvalidRate(SafeDrugError, ValueError):
    pass


class DomainError(SafeDrugError, ValueError):
    pass


class AsymmetricMatrix(SafeDrugError, ValueError):
    pass


class SmilesSyntaxError(SafeDrugError, ValueError):
    """Malformed SMILES. ``position`` is the 0-based byte offset of the problem."""

    def __init__(self, message, smiles, position):
        self.smiles = smiles
        self.position = position
        super().__init__(f"{message} at offset {position} in {smiles!r}")


class UnsupportedFeature(SafeDrugError, ValueError):
    def __init__(self, message, smiles=None, position=None):
        self.smiles = smiles
        self.position = position
        where = f" at offset {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


class DrugParseError(SafeDrugError, ValueError):
    """A drug's SMILES failed to parse; wraps the underlying error."""

    def __init__(self, drug_id, cause):
        self.drug_id = drug_id
        self.cause = cause
        super().__init__(f"drug {drug_id!r}: {cause}")


class UnknownAtom(SafeDrugError, KeyError):
    def __init__(self, element, drug_id=None):
        self.element = element
        self.drug_id = drug_id
        super().__init__(f"atom {element!r} (drug {drug_id!r}) not in atom vocabulary")

    def __str__(self):
        return self.args[0]


class SpecError(SafeDrugError, ValueError):
    pass


class RatioError(SafeDrugError, ValueError):
    pass


class ParseError(SafeDrugError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class VersionError(SafeDrugError, ValueError):
    pass


class OutOfRangeId(SafeDrugError, IndexError):
    pass


class EmptyCohort(SafeDrugError, ValueError):
    pass


class EmptyTestSet(SafeDrugError, ValueError):
    pass


class NonFiniteLoss(SafeDrugError, FloatingPointError):
    def __init__(self, patient_id, epoch, value):
        self.patient_id = patient_id
        self.epoch = epoch
        super().__init__(f"non-finite loss {value!r} for patient {patient_id!r} in epoch {epoch}")


class VocabularyMismatch(SafeDrugError, ValueError):
    pass


class ConfigError(SafeDrugError, ValueError):
    pass
