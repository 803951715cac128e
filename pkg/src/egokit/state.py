"""Per-timestep diffusion state: local joint rotations, shape, contacts.

The flat layout is ``[51 x rot6d | beta | 21 contacts]`` = 329 reals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import NUM_LOCAL, SHAPE_DIM
from .geometry import matrix_to_rot6d, rot6d_to_matrix

NUM_CONTACTS = 21
ROT_DIM = NUM_LOCAL * 6
STATE_DIM = ROT_DIM + SHAPE_DIM + NUM_CONTACTS

ROT_SLICE = slice(0, ROT_DIM)
SHAPE_SLICE = slice(ROT_DIM, ROT_DIM + SHAPE_DIM)
CONTACT_SLICE = slice(ROT_DIM + SHAPE_DIM, STATE_DIM)


@dataclass(frozen=True)
class MotionState:
    rotations6d: np.ndarray  # (51, 6)
    beta: np.ndarray  # (2,)
    contacts: np.ndarray  # (21,)

    def __post_init__(self):
        object.__setattr__(self, "rotations6d", np.asarray(self.rotations6d, dtype=np.float64).reshape(NUM_LOCAL, 6))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64).reshape(SHAPE_DIM))
        object.__setattr__(self, "contacts", np.asarray(self.contacts, dtype=np.float64).reshape(NUM_CONTACTS))

    def local_rotations(self) -> np.ndarray:
        return rot6d_to_matrix(self.rotations6d)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.rotations6d.reshape(-1), self.beta, self.contacts])

    @classmethod
    def from_flat(cls, x: np.ndarray) -> "MotionState":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (STATE_DIM,):
            raise ValueError(f"expected a flat state of size {STATE_DIM}, got {x.shape}")
        return cls(x[ROT_SLICE], x[SHAPE_SLICE], x[CONTACT_SLICE])


def pack(local_rot: np.ndarray, beta: np.ndarray, contacts: np.ndarray) -> np.ndarray:
    """(..., 51, 3, 3), (..., 2), (..., 21) -> (..., 329)."""
    local_rot = np.asarray(local_rot, dtype=np.float64)
    batch = local_rot.shape[:-3]
    r6 = matrix_to_rot6d(local_rot).reshape(batch + (ROT_DIM,))
    beta = np.broadcast_to(beta, batch + (SHAPE_DIM,))
    contacts = np.broadcast_to(contacts, batch + (NUM_CONTACTS,))
    return np.concatenate([r6, beta, contacts], axis=-1)


def unpack(x: np.ndarray):
    """(..., 329) -> local rotations (..., 51, 3, 3), beta (..., 2), contacts (..., 21)."""
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[:-1]
    rot = rot6d_to_matrix(x[..., ROT_SLICE].reshape(batch + (NUM_LOCAL, 6)))
    return rot, x[..., SHAPE_SLICE], x[..., CONTACT_SLICE]


def states_from_array(x: np.ndarray) -> list[MotionState]:
    return [MotionState.from_flat(row) for row in np.asarray(x)]
