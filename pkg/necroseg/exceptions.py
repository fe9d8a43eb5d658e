class Error(Exception):
    """Base class for exceptions in this package.

    Attributes:
        message -- explanation of the error
        exit_code -- process exit code used by the command line interface
    """

    name = "Error"
    exit_code = 1

    def __init__(self, message):
        super().__init__(message)
        self.message = message


class ConfigError(Error):
    """Exception raised for invalid or unreadable experiment configurations"""

    name = "Configuration Error"
    exit_code = 2


class MissingArtifactError(Error):
    """Exception raised when a prerequisite file of a pipeline stage is absent"""

    name = "Missing Artifact Error"
    exit_code = 3


class NumericalError(Error):
    """Exception raised for non-finite losses or model outputs"""

    name = "Numerical Error"
    exit_code = 4


class FrozenBaseError(NumericalError):
    """Exception raised when fine-tuning altered the frozen backbone"""

    name = "Frozen Base Error"


class GeometryError(Error):
    """Exception raised for region/patch geometry that does not tile evenly"""

    name = "Geometry Error"


class InvalidFrequencyError(Error):
    """Exception raised for class frequency vectors off the simplex"""

    name = "Invalid Frequency Error"


class ShapeMismatchError(Error):
    """Exception raised when two rasters or tensors must share a shape"""

    name = "Shape Mismatch Error"


class SimplexError(Error):
    """Exception raised when a probability vector does not sum to one"""

    name = "Simplex Error"


class EmptyPatchError(Error):
    name = "Empty Patch Error"


class EmptyDatasetError(MissingArtifactError):
    """Exception raised when a dataset split a stage trains on holds no items"""

    name = "Empty Dataset Error"


class InvalidModelConfigError(Error):
    name = "Invalid Model Config Error"


class LoraRankError(Error):
    """Exception raised for a LoRA rank outside 1..min(d, k)"""

    name = "LoRA Rank Error"


class TimestepError(Error):
    """Exception raised for diffusion timesteps outside the valid range"""

    name = "Timestep Error"


class UndefinedRateError(Error):
    """Exception raised when a raster has no tumor-bed pixels

    The necrosis rate is undefined in that case, which is distinct from a rate of 0.
    """

    name = "Undefined Rate Error"


class EmptyConfusionError(Error):
    name = "Empty Confusion Matrix Error"


class TensorFileError(Error):
    """Exception raised for corrupt binary tensor containers"""

    name = "Tensor File Error"


class ManifestValidationError(Error):
    name = "Manifest Validation Error"
    exit_code = 3
