"""Registry of a trunk plus hot-registrable branches.

Readers always see an immutable composite snapshot; registration builds a
new composite under a lock and swaps it in atomically, so an in-flight
inference keeps using the model it started with and never observes a
half-added branch.
"""

import threading
from pathlib import Path

from .backbone import graft
from .weights_io import load_branch, load_trunk


class DuplicateBranchError(ValueError):
    pass


class Registry:
    def __init__(self, trunk, branches=(), allow_fingerprint_mismatch=False):
        self._lock = threading.Lock()
        self._allow_mismatch = allow_fingerprint_mismatch
        self._model = graft(trunk, branches, allow_fingerprint_mismatch=allow_fingerprint_mismatch)

    @property
    def model(self):
        """The current immutable composite snapshot."""
        return self._model

    @property
    def trunk(self):
        return self._model.trunk

    @property
    def attributes(self):
        return self._model.attributes

    def register_branch(self, branch, replace=False, allow_fingerprint_mismatch=None):
        """Attach a branch; subsequent requests see it, in-flight ones do not.

        Rejects a stale trunk fingerprint (unless overridden) and duplicate
        attributes (unless ``replace``).
        """
        if allow_fingerprint_mismatch is None:
            allow_fingerprint_mismatch = self._allow_mismatch
        with self._lock:
            current = self._model
            if branch.attribute in current.branches and not replace:
                raise DuplicateBranchError(
                    f"attribute {branch.attribute!r} already registered; pass replace=True to swap it"
                )
            kept = [current.branches[a] for a in current.attributes if a != branch.attribute]
            self._model = graft(
                current.trunk, kept + [branch], allow_fingerprint_mismatch=allow_fingerprint_mismatch
            )
        return branch.attribute

    def infer(self, image, attributes=None):
        return self._model.infer(image, attributes)

    def infer_batch(self, images, attributes=None):
        return self._model.infer_batch(images, attributes)


def register_branch(registry, branch_file, replace=False, allow_fingerprint_mismatch=None):
    """Load a branch weight file and register it; returns the attribute name."""
    return registry.register_branch(
        load_branch(branch_file), replace=replace, allow_fingerprint_mismatch=allow_fingerprint_mismatch
    )


def infer(registry, image, attribute_filter=None):
    """Map attribute -> class probability vector for one image."""
    return registry.infer(image, attribute_filter)


def load_registry(trunk_path, branch_dir=None, allow_fingerprint_mismatch=False):
    """Registry from a trunk file plus every .grft branch in a directory."""
    trunk = load_trunk(trunk_path)
    branches = []
    if branch_dir is not None:
        for p in sorted(Path(branch_dir).glob("*.grft")):
            branches.append(load_branch(p))
    return Registry(trunk, branches, allow_fingerprint_mismatch=allow_fingerprint_mismatch)
