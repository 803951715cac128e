from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .. import body
from ..state import NUM_CONTACTS, pack

FPS = 30
CONTACT_HEIGHT = 0.05
CONTACT_DISPLACEMENT = 0.01


@dataclass
class MotionSequence:
    id: str
    root_rot: np.ndarray  # (T, 3, 3)
    root_pos: np.ndarray  # (T, 3)
    local_rot: np.ndarray  # (T, 51, 3, 3)
    contacts: np.ndarray  # (T, 21)
    beta: np.ndarray  # (2,)
    fps: int = FPS
    family: str = ""
    hands: list = field(default=None, repr=False)
    cloud: object = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.root_rot) < 1:
            raise ValueError("a motion sequence needs at least one timestep")

    @property
    def length(self) -> int:
        return len(self.root_rot)

    def joints(self):
        """World joint rotations (T, 52, 3, 3) and positions (T, 52, 3)."""
        return body.fk_arrays(self.root_rot, self.root_pos, self.local_rot, self.beta)

    def cpf(self):
        jr, jp = self.joints()
        return body.cpf_from_joints(jr, jp, np.broadcast_to(self.beta, (self.length, 2)))

    def states(self) -> np.ndarray:
        """Diffusion states (T, 329) with the sequence shape replicated per timestep."""
        return pack(self.local_rot, np.broadcast_to(self.beta, (self.length, 2)), self.contacts)

    def crop(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(
            id=self.id, root_rot=self.root_rot[start:stop], root_pos=self.root_pos[start:stop],
            local_rot=self.local_rot[start:stop], contacts=self.contacts[start:stop],
            beta=self.beta, fps=self.fps, family=self.family,
        )


def label_contacts(joint_pos: np.ndarray) -> np.ndarray:
    """Joints 1..21 are in contact when low and nearly stationary between frames.

    The displacement uses the backward difference (forward difference at t = 0).
    """
    p = joint_pos[:, 1:1 + NUM_CONTACTS]
    disp = np.zeros(p.shape[:2])
    if len(p) > 1:
        d = np.linalg.norm(np.diff(p, axis=0), axis=-1)
        disp[1:] = d
        disp[0] = d[0]
    return ((p[..., 2] < CONTACT_HEIGHT) & (disp < CONTACT_DISPLACEMENT)).astype(np.float64)


def is_test_id(seq_id: str, test_fraction: float = 0.1) -> bool:
    """Deterministic held-out split by id hash."""
    h = int.from_bytes(hashlib.sha256(seq_id.encode("utf-8")).digest()[:8], "little")
    return (h % 1000) < int(round(test_fraction * 1000))


def split_train_test(seqs, test_fraction: float = 0.1):
    train = [s for s in seqs if not is_test_id(s.id, test_fraction)]
    test = [s for s in seqs if is_test_id(s.id, test_fraction)]
    return train, test
