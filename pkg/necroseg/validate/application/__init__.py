from pathlib import Path
from typing import Iterable, List

from necroseg.validate.domain import ManifestError, ManifestValidator


class NecrosegValidator(ManifestValidator):
    """Manifest validator with checks that span the splits of a dataset"""

    def item_keys(self) -> set:
        if not self.parsing_ok:
            return set()
        return {(item["source"], tuple(item["coords"])) for item in self.manifest.get("items", [])}

    def check_disjoint_splits(self, others: Iterable["NecrosegValidator"]) -> bool:
        """No tile or region of this split appears in another split"""
        ok = True
        mine = self.item_keys()
        for other in others:
            shared = sorted(mine & other.item_keys())
            if shared:
                ok = False
                source, coords = shared[0]
                self.add_error(
                    ManifestError(
                        error="Split Overlap Error",
                        source=self.manifest_name,
                        field="items",
                        item="",
                        message=f"{len(shared)} items also in {other.manifest_name}, e.g. {source} at {list(coords)}",
                    )
                )
        return ok


def dataset_validators(dataset_dir: Path) -> List[NecrosegValidator]:
    return [NecrosegValidator(path) for path in sorted(Path(dataset_dir).glob("*.json"))]
