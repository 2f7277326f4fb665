"""
Patient Records
"""

from dataclasses import dataclass

import numpy as np

SEXES = ("male", "female")


@dataclass
class Volume:
    """One MRI sequence of one patient: [depth, height, width] voxels"""

    voxels: np.ndarray
    sequence: str
    patient_id: str = ""

    @property
    def shape(self):
        return tuple(self.voxels.shape)

    def with_voxels(self, voxels):
        return Volume(voxels=voxels, sequence=self.sequence, patient_id=self.patient_id)


@dataclass
class ClinicalRecord:
    patient_id: str
    age: int
    sex: str
    hospitalizations: int
    tumor_size: float
    multiple_lesions: int
    t_stage: int
    grade: int
    label: int

    def problems(self):
        """
        Range checks on every attribute

        Returns:
            problems: List of human-readable violations, empty when valid
        """
        out = []
        if not 18 <= self.age <= 100:
            out.append(f"age {self.age} outside [18, 100]")
        if self.sex not in SEXES:
            out.append(f"sex {self.sex!r} not in {SEXES}")
        if self.hospitalizations < 1:
            out.append(f"hospitalizations {self.hospitalizations} < 1")
        if not 0.0 < self.tumor_size <= 15.0:
            out.append(f"tumor_size {self.tumor_size} outside (0, 15]")
        if self.multiple_lesions not in (0, 1):
            out.append(f"multiple_lesions {self.multiple_lesions} not binary")
        if self.t_stage not in range(6):
            out.append(f"t_stage {self.t_stage} outside 0..5")
        if self.grade not in (0, 1):
            out.append(f"grade {self.grade} not binary")
        if self.label not in (0, 1):
            out.append(f"label {self.label} not binary")
        return out
