"""Universal class registry and conversion of dataset-local label volumes
into per-class binary masks with availability flags.

Datasets disagree on label indices, naming, and which structures count as
background; the fix is a single shared registry plus per-dataset maps into
it. Tumors and cysts carry parent links so organ masks can absorb tumor
voxels that source datasets label exclusively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

_CONN26 = np.ones((3, 3, 3), dtype=bool)


class HarmonizeError(ValueError):
    """Label volume or map violates the harmonization contract."""


class ClassKind(str, Enum):
    ORGAN = "organ"
    TUMOR = "tumor"
    CYST = "cyst"


@dataclass(frozen=True)
class ClassEntry:
    name: str
    index: int
    kind: ClassKind
    parents: tuple[int, ...] = ()  # candidate parent organ indices (tumor/cyst only)


class ClassRegistry:
    """Ordered class list with contiguous indices 1..K and parent links."""

    def __init__(self, entries: list[ClassEntry]):
        self.entries = list(entries)
        indices = [e.index for e in self.entries]
        if sorted(indices) != list(range(1, len(self.entries) + 1)):
            raise ValueError(f"class indices must be contiguous 1..K, got {sorted(indices)}")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        self._by_index = {e.index: e for e in self.entries}
        self._by_name = {e.name: e for e in self.entries}
        for e in self.entries:
            if e.kind in (ClassKind.TUMOR, ClassKind.CYST):
                if not e.parents:
                    raise ValueError(f"{e.name}: tumor/cyst entries need a parent organ")
                for p in e.parents:
                    parent = self._by_index.get(p)
                    if parent is None or parent.kind != ClassKind.ORGAN:
                        raise ValueError(f"{e.name}: parent index {p} is not an organ")
            elif e.parents:
                raise ValueError(f"{e.name}: organ entries cannot have parents")

    @property
    def size(self) -> int:
        return len(self.entries)

    def by_index(self, index: int) -> ClassEntry:
        return self._by_index[index]

    def by_name(self, name: str) -> ClassEntry:
        return self._by_name[name]

    def names(self) -> list[str]:
        return [self.by_index(i).name for i in range(1, self.size + 1)]

    def bilateral_pairs(self) -> list[tuple[int, int]]:
        """Organ index pairs that are left/right counterparts by name."""
        groups: dict[str, dict[str, int]] = {}
        for e in self.entries:
            if e.kind != ClassKind.ORGAN:
                continue
            words = e.name.split()
            for side in ("Left", "Right"):
                if side in words:
                    stem = " ".join(w for w in words if w not in ("Left", "Right"))
                    groups.setdefault(stem, {})[side] = e.index
        pairs = []
        for stem in sorted(groups):
            sides = groups[stem]
            if "Left" in sides and "Right" in sides:
                pairs.append((sides["Left"], sides["Right"]))
        return pairs


_KIDNEYS = (2, 3)
_LUNGS = (16, 17)

_CANONICAL = [
    ("Spleen", ClassKind.ORGAN, ()),
    ("Right Kidney", ClassKind.ORGAN, ()),
    ("Left Kidney", ClassKind.ORGAN, ()),
    ("Gall Bladder", ClassKind.ORGAN, ()),
    ("Esophagus", ClassKind.ORGAN, ()),
    ("Liver", ClassKind.ORGAN, ()),
    ("Stomach", ClassKind.ORGAN, ()),
    ("Aorta", ClassKind.ORGAN, ()),
    ("Postcava", ClassKind.ORGAN, ()),
    ("Portal Vein and Splenic Vein", ClassKind.ORGAN, ()),
    ("Pancreas", ClassKind.ORGAN, ()),
    ("Right Adrenal Gland", ClassKind.ORGAN, ()),
    ("Left Adrenal Gland", ClassKind.ORGAN, ()),
    ("Duodenum", ClassKind.ORGAN, ()),
    ("Hepatic Vessel", ClassKind.ORGAN, ()),
    ("Right Lung", ClassKind.ORGAN, ()),
    ("Left Lung", ClassKind.ORGAN, ()),
    ("Colon", ClassKind.ORGAN, ()),
    ("Intestine", ClassKind.ORGAN, ()),
    ("Rectum", ClassKind.ORGAN, ()),
    ("Bladder", ClassKind.ORGAN, ()),
    ("Prostate/Uterus", ClassKind.ORGAN, ()),
    ("Head of Femur Left", ClassKind.ORGAN, ()),
    ("Head of Femur Right", ClassKind.ORGAN, ()),
    ("Celiac Truck", ClassKind.ORGAN, ()),
    ("Kidney Tumor", ClassKind.TUMOR, _KIDNEYS),
    ("Liver Tumor", ClassKind.TUMOR, (6,)),
    ("Pancreas Tumor", ClassKind.TUMOR, (11,)),
    ("Hepatic Vessel Tumor", ClassKind.TUMOR, (15,)),
    ("Lung Tumor", ClassKind.TUMOR, _LUNGS),
    ("Colon Tumor", ClassKind.TUMOR, (18,)),
    ("Kidney Cyst", ClassKind.CYST, _KIDNEYS),
]


def build_registry() -> ClassRegistry:
    """The universal 32-class taxonomy."""
    return ClassRegistry([ClassEntry(name, i + 1, kind, parents)
                          for i, (name, kind, parents) in enumerate(_CANONICAL)])


@dataclass(frozen=True)
class SplitDirective:
    """Split one dataset-local label into left/right universal classes."""
    local_label: int
    left_index: int
    right_index: int
    axis: int = 0
    method: str = "component-centroid"  # or "midplane"


@dataclass(frozen=True)
class DatasetLabelMap:
    dataset_id: str
    entries: dict[int, int] = field(default_factory=dict)  # local label -> universal index
    annotated: frozenset[int] = frozenset()
    splits: tuple[SplitDirective, ...] = ()
    parent_inclusion: bool = True

    def validate(self, registry: ClassRegistry):
        targets = set(self.entries.values())
        for d in self.splits:
            if d.left_index == d.right_index:
                raise HarmonizeError(
                    f"{self.dataset_id}: split of local {d.local_label} targets a single class")
            if d.local_label in self.entries:
                raise HarmonizeError(
                    f"{self.dataset_id}: local label {d.local_label} both mapped and split")
            targets.update((d.left_index, d.right_index))
        for t in targets:
            if not 1 <= t <= registry.size:
                raise HarmonizeError(f"{self.dataset_id}: unknown universal class index {t}")
        missing = targets - set(self.annotated)
        if missing:
            raise HarmonizeError(
                f"{self.dataset_id}: mapped classes {sorted(missing)} not listed as annotated")
        for a in self.annotated:
            if not 1 <= a <= registry.size:
                raise HarmonizeError(f"{self.dataset_id}: unknown annotated class index {a}")


@dataclass
class BinaryMaskSet:
    """Per-class binary volumes for the classes a case annotates."""
    dims: tuple[int, int, int]
    masks: dict[int, np.ndarray]  # universal index -> bool volume

    def validate_dims(self):
        for idx, m in self.masks.items():
            if m.shape != self.dims:
                raise HarmonizeError(f"mask for class {idx} has dims {m.shape}, case {self.dims}")


@dataclass
class AvailabilityMask:
    flags: np.ndarray  # (K,) bool; flags[k-1] is class k

    @classmethod
    def from_indices(cls, indices, k: int) -> "AvailabilityMask":
        flags = np.zeros(k, dtype=bool)
        for i in indices:
            flags[i - 1] = True
        return cls(flags)

    def available(self) -> list[int]:
        return [int(i) + 1 for i in np.flatnonzero(self.flags)]


def split_left_right(mask: np.ndarray, axis: int, method: str = "component-centroid"):
    """Partition a binary mask into (left, right) halves along ``axis``.

    Left is the upper-coordinate half of the axis, which matches anatomical
    left under the default RAS-style ordering. ``component-centroid`` assigns
    each 26-connected component wholly by the side of its centroid;
    ``midplane`` cuts voxel-wise at the axis midpoint.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise HarmonizeError("nothing to split: mask is empty")
    if not 0 <= axis < mask.ndim:
        raise HarmonizeError(f"split axis {axis} invalid for {mask.ndim}-d mask")
    extent = mask.shape[axis]
    mid = extent / 2.0

    left = np.zeros_like(mask)
    if method == "midplane":
        coords = np.arange(extent) + 0.5 > mid
        shape = [1] * mask.ndim
        shape[axis] = extent
        left = mask & coords.reshape(shape)
    elif method == "component-centroid":
        labeled, n = ndimage.label(mask, structure=_CONN26)
        centroids = ndimage.center_of_mass(mask, labeled, range(1, n + 1))
        for comp, centroid in enumerate(centroids, start=1):
            if centroid[axis] + 0.5 > mid:
                left |= labeled == comp
    else:
        raise HarmonizeError(f"unknown split method {method!r}")
    right = mask & ~left
    return left, right


def _resolve_parent(component: np.ndarray, candidates: list[int],
                    masks: dict[int, np.ndarray]) -> int:
    """Pick which candidate parent a tumor component belongs to.

    Containment of the component centroid wins; otherwise the parent whose
    own centroid is nearest; parents with empty masks only as a last resort.
    """
    if len(candidates) == 1:
        return candidates[0]
    centroid = np.array(ndimage.center_of_mass(component))
    voxel = tuple(int(round(c)) for c in centroid)
    for p in candidates:
        m = masks[p]
        if all(0 <= voxel[i] < m.shape[i] for i in range(3)) and m[voxel]:
            return p
    best, best_dist = None, np.inf
    for p in candidates:
        m = masks[p]
        if not m.any():
            continue
        d = float(np.linalg.norm(np.array(ndimage.center_of_mass(m)) - centroid))
        if d < best_dist:
            best, best_dist = p, d
    return best if best is not None else candidates[0]


def harmonize(labels: np.ndarray, label_map: DatasetLabelMap, registry: ClassRegistry,
              expected_dims: tuple[int, int, int] | None = None):
    """Convert a dataset-local integer label volume into universal binary masks.

    Every annotated class gets a mask (possibly empty). With parent inclusion
    on, voxels of each tumor/cyst class are unioned into its annotated parent
    organ, resolving two-parent classes per connected component.
    """
    label_map.validate(registry)
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise HarmonizeError(f"label volume must be 3-d, got shape {labels.shape}")
    dims = labels.shape
    if expected_dims is not None and tuple(dims) != tuple(expected_dims):
        raise HarmonizeError(f"label dims {dims} do not match image dims {tuple(expected_dims)}")

    known = set(label_map.entries) | {d.local_label for d in label_map.splits}
    present = set(int(v) for v in np.unique(labels)) - {0}
    unknown = present - known
    if unknown:
        raise HarmonizeError(
            f"{label_map.dataset_id}: unknown local label value(s) {sorted(unknown)}")

    masks: dict[int, np.ndarray] = {
        idx: np.zeros(dims, dtype=bool) for idx in label_map.annotated}
    for local, target in label_map.entries.items():
        if local in present:
            masks[target] |= labels == local
    for d in label_map.splits:
        if d.local_label in present:
            left, right = split_left_right(labels == d.local_label, d.axis, d.method)
            masks[d.left_index] |= left
            masks[d.right_index] |= right

    if label_map.parent_inclusion:
        for idx in sorted(label_map.annotated):
            entry = registry.by_index(idx)
            if entry.kind == ClassKind.ORGAN or not masks[idx].any():
                continue
            annotated_parents = [p for p in entry.parents if p in label_map.annotated]
            if not annotated_parents:
                continue
            if len(annotated_parents) == 1:
                masks[annotated_parents[0]] |= masks[idx]
            else:
                labeled, n = ndimage.label(masks[idx], structure=_CONN26)
                for comp in range(1, n + 1):
                    component = labeled == comp
                    parent = _resolve_parent(component, annotated_parents, masks)
                    masks[parent] |= component

    mask_set = BinaryMaskSet(tuple(dims), masks)
    avail = AvailabilityMask.from_indices(label_map.annotated, registry.size)
    return mask_set, avail


def validate_case(mask_set: BinaryMaskSet, avail: AvailabilityMask,
                  registry: ClassRegistry) -> list[str]:
    """Consistency findings for a harmonized case; empty list means valid."""
    findings: list[str] = []
    if avail.flags.shape != (registry.size,):
        findings.append(
            f"availability length {avail.flags.shape[0]} != class count {registry.size}")
        return findings

    for idx in range(1, registry.size + 1):
        name = registry.by_index(idx).name
        if avail.flags[idx - 1] and idx not in mask_set.masks:
            findings.append(f"{name}: marked available but mask missing")
        if not avail.flags[idx - 1] and idx in mask_set.masks:
            findings.append(f"{name}: mask present but marked unavailable")

    for idx, m in mask_set.masks.items():
        if m.shape != mask_set.dims:
            findings.append(
                f"{registry.by_index(idx).name}: mask dims {m.shape} != case dims {mask_set.dims}")

    available = set(mask_set.masks)
    for idx in sorted(available):
        entry = registry.by_index(idx)
        if entry.kind == ClassKind.ORGAN:
            continue
        parents = [p for p in entry.parents if p in available]
        if not parents:
            continue
        union = np.zeros(mask_set.dims, dtype=bool)
        for p in parents:
            union |= mask_set.masks[p]
        outside = int(np.count_nonzero(mask_set.masks[idx] & ~union))
        if outside:
            parent_names = ", ".join(registry.by_index(p).name for p in parents)
            findings.append(
                f"{entry.name}: {outside} voxel(s) outside parent mask(s) {parent_names}")

    for left_idx, right_idx in registry.bilateral_pairs():
        if left_idx in available and right_idx in available:
            overlap = int(np.count_nonzero(
                mask_set.masks[left_idx] & mask_set.masks[right_idx]))
            if overlap:
                findings.append(
                    f"{registry.by_index(left_idx).name} overlaps "
                    f"{registry.by_index(right_idx).name} on {overlap} voxel(s)")
    return findings
