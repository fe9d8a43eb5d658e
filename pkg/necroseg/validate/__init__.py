from pathlib import Path
import warnings

from necroseg.core import logger
from necroseg.exceptions import ManifestValidationError, MissingArtifactError
from necroseg.validate.application import NecrosegValidator, dataset_validators


def validate_dataset(dataset_dir, schema=None, markdown=False) -> bool:
    """Validate every split manifest of a dataset directory

    Returns:
        bool: True when all manifests are valid
    Raises:
        ManifestValidationError: first invalid manifest, after printing its errors
    """
    validators = dataset_validators(dataset_dir)
    if schema is not None:
        validators = [NecrosegValidator(v.manifest_path, schema) for v in validators]
    if not validators:
        raise MissingArtifactError(f"No manifests found in {dataset_dir}")
    for v in validators:
        if v.parsing_ok:
            v.validate_schema()
        if v.parsing_ok and not v.errors:
            v.check_files()
            v.check_geometry()
            v.check_disjoint_splits([o for o in validators if o is not v])
    failed = None
    for v in validators:
        try:
            if markdown:
                v.to_markdown()
            else:
                v.to_rich()
        except ManifestValidationError as e:
            failed = failed or e
    if failed is not None:
        raise failed
    return True


def run_validation(workspace, datasets, schema, markdown, verbose, **kwargs):
    if not verbose:
        warnings.filterwarnings("ignore")
    data_dir = Path(workspace) / "data"
    for name in datasets or ("source", "patches", "regions"):
        logger.info(f"Validating {name} manifests")
        validate_dataset(data_dir / name, schema=schema, markdown=markdown)
