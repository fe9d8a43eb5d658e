from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional
import json

import pandas as pd
from jsonschema import Draft7Validator
from rich.console import Console
from rich.table import Table

from necroseg.core import PathLike, get_asset_path, logger
from necroseg.exceptions import ManifestValidationError


@dataclass
class ManifestError:
    """One problem found in a dataset manifest"""

    error: str
    source: str
    field: str
    item: str
    message: str

    def to_dict(self) -> dict:
        return {
            "Error": str(self.error),
            "Source": str(self.source),
            "Field": str(self.field) if self.field else "-",
            "Item": str(self.item) if self.item != "" else "-",
            "Message": str(self.message),
        }

    def to_list(self) -> List[str]:
        return list(self.to_dict().values())


class ManifestValidator:
    """Validation of a single manifest file

    Attributes:
        errors (list): ManifestError records
        manifest_name (str): file name of the manifest
        manifest (dict): parsed manifest, None when it could not be read

    Args:
        manifest (PathLike): manifest JSON file
        schema (PathLike): JSON schema, the bundled manifest schema by default
    """

    def __init__(self, manifest: PathLike, schema: Optional[PathLike] = None):
        self.errors: List[ManifestError] = []
        self.manifest_path = Path(manifest)
        self.manifest_name = self.manifest_path.name
        self.schema_path = Path(schema) if schema else get_asset_path("manifest_schema.json")
        self.schema = self.read_json(self.schema_path)
        self.manifest = self.read_json(self.manifest_path)
        self.parsing_ok = self.schema is not None and self.manifest is not None

    def __repr__(self):
        return f"ManifestValidator(manifest={self.manifest_name}, errors={len(self.errors)})"

    def add_error(self, err: ManifestError):
        self.errors.append(err)

    def read_json(self, path: Path) -> Optional[dict]:
        try:
            with open(path, "r") as fh:
                return json.load(fh)
        except FileNotFoundError:
            message = "File not found"
        except json.JSONDecodeError as e:
            message = f"JSON parsing error at line {e.lineno}, column {e.colno}"
        self.add_error(ManifestError("Parsing Error", path.name, "", "", message))
        return None

    def validate_schema(self) -> bool:
        validator = Draft7Validator(self.schema)
        ok = True
        for error in validator.iter_errors(self.manifest):
            ok = False
            path = list(error.path)
            item = path[1] if len(path) > 1 and path[0] == "items" else ""
            self.add_error(
                ManifestError(
                    error="Schema Validation Error",
                    source=self.manifest_name,
                    field=".".join(str(p) for p in path if not isinstance(p, int)),
                    item=item,
                    message=error.message,
                )
            )
        return ok

    def check_files(self) -> bool:
        """Every referenced tile, region and mask exists next to the manifest"""
        ok = True
        root = self.manifest_path.parent
        for i, item in enumerate(self.manifest.get("items", [])):
            for key in ("path", "mask"):
                if key in item and not (root / item[key]).exists():
                    ok = False
                    self.add_error(
                        ManifestError("Missing File Error", self.manifest_name, key, i, f"{item[key]} does not exist")
                    )
        return ok

    def check_geometry(self) -> bool:
        """Regions tile into whole patches and origins sit on the grid"""
        geometry = self.manifest.get("geometry", {})
        region, patch = geometry.get("region", [0, 0]), geometry.get("patch", [0, 0])
        if not all(p > 0 and r % p == 0 for r, p in zip(region, patch)):
            self.add_error(
                ManifestError(
                    "Geometry Error",
                    self.manifest_name,
                    "geometry",
                    "",
                    f"Region {region} is not divisible into {patch} patches",
                )
            )
            return False
        step = region if self.manifest.get("kind") == "region" else patch
        ok = True
        for i, item in enumerate(self.manifest.get("items", [])):
            if any(o % s for o, s in zip(item["origin"], step)):
                ok = False
                self.add_error(
                    ManifestError(
                        "Geometry Error", self.manifest_name, "origin", i, f"Origin {item['origin']} is off the {step} grid"
                    )
                )
        return ok

    def to_rich(self) -> bool:
        """Print the errors as a rich table

        Returns:
            bool: True if the manifest is valid
        Raises:
            ManifestValidationError: if it is not
        """
        table = Table(title=f"necroseg validation report of {self.manifest_name}")
        for column in ["Error", "Source", "Field", "Item", "Message"]:
            table.add_column(column, style="red", overflow="fold")
        for error in self.errors:
            table.add_row(*error.to_list())
        if self.errors:
            Console().print(table)
            raise ManifestValidationError(f"Invalid manifest {self.manifest_name}")
        logger.info(f"{self.manifest_name} is valid")
        return True

    def to_markdown(self) -> bool:
        if self.errors:
            df = pd.DataFrame([error.to_dict() for error in self.errors])
            raise ManifestValidationError(
                f"Invalid manifest `{self.manifest_name}`\n\n{df.to_markdown(index=False)}"
            )
        print(f"`{self.manifest_name}` is valid")
        return True
