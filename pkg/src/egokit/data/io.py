"""Text file formats for sequences, CPF trajectories and hand observations.

Every number is written with 17 significant digits so that a round trip
through text reproduces the float64 values bit for bit.

Sequence file (newline-delimited JSON)::

    {"id": ..., "fps": 30, "T": ..., "beta": [b0, b1], "skeleton": <hash>, "family": ...}
    {"t": 0, "root": [9 rotation entries row-major, 3 position], "rot": [51 x 9], "contacts": [21]}
    ...

CPF trajectory: one line per timestep, ``r00 r01 ... r22 x y z``; ``#`` starts a comment.

Hand observations: one record per line, ``#`` comments allowed::

    intrinsics fx fy cx cy
    camera_from_cpf r00 ... r22 x y z
    kp <t> <left|right> <joint 0..15> <u> <v>
    wrist <t> <left|right> r00 ... r22 x y z
    local <t> <left|right> <finger joint 0..14> r00 ... r22

``intrinsics`` and ``camera_from_cpf`` must precede the per-hand records.
Keypoint joint 0 is the wrist and 1..15 the finger joints.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import body
from ..geometry import PoseSE3, Rotation3
from ..guidance.costs import SIDES, CameraIntrinsics, HandObservation
from ..state import NUM_CONTACTS
from .sequence import MotionSequence


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""


def _num(x) -> str:
    return "%.17g" % float(x)


def _nums(values) -> str:
    return ", ".join(_num(v) for v in np.ravel(values))


# --- motion sequences ----------------------------------------------------------


def sequence_to_text(seq: MotionSequence) -> str:
    header = {"id": seq.id, "fps": int(seq.fps), "T": int(seq.length), "beta": None,
              "skeleton": body.DEFAULT_SKELETON.digest(), "family": seq.family}
    head = json.dumps(header).replace("null", "[" + _nums(seq.beta) + "]")
    lines = [head]
    for t in range(seq.length):
        lines.append(
            '{"t": %d, "root": [%s, %s], "rot": [%s], "contacts": [%s]}'
            % (t, _nums(seq.root_rot[t]), _nums(seq.root_pos[t]), _nums(seq.local_rot[t]), _nums(seq.contacts[t]))
        )
    return "\n".join(lines) + "\n"


def save_sequence(seq: MotionSequence, path) -> None:
    Path(path).write_text(sequence_to_text(seq))


def _json_line(path, lineno, text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{lineno}:{e.colno}: {e.msg}") from None


def _array(path, lineno, record, key, size):
    try:
        arr = np.asarray(record[key], dtype=np.float64)
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{path}:{lineno}: missing or non-numeric field {key!r}") from None
    if arr.shape != (size,):
        raise FormatError(f"{path}:{lineno}: field {key!r} has {arr.size} values, expected {size}")
    return arr


def sequence_from_text(text: str, path="<string>") -> MotionSequence:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise FormatError(f"{path}:1: empty sequence file")
    header = _json_line(path, 1, lines[0])
    if not isinstance(header, dict):
        raise FormatError(f"{path}:1: header must be an object")
    try:
        length = int(header["T"])
        fps = int(header["fps"])
        seq_id = str(header["id"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{path}:1: header needs id, fps and T") from None
    beta = _array(path, 1, header, "beta", 2)
    if header.get("skeleton") not in (None, body.DEFAULT_SKELETON.digest()):
        raise FormatError(f"{path}:1: skeleton hash does not match this build")
    body_lines = [ln for ln in lines[1:]]
    if len(body_lines) < length:
        raise FormatError(f"{path}:{len(lines) + 1}: file truncated, expected {length} timestep records "
                          f"but found {len(body_lines)}")
    root_rot = np.empty((length, 3, 3))
    root_pos = np.empty((length, 3))
    local = np.empty((length, body.NUM_LOCAL, 3, 3))
    contacts = np.empty((length, NUM_CONTACTS))
    for t in range(length):
        lineno = t + 2
        rec = _json_line(path, lineno, body_lines[t])
        if not isinstance(rec, dict) or rec.get("t") != t:
            raise FormatError(f"{path}:{lineno}: expected the record for timestep {t}")
        root = _array(path, lineno, rec, "root", 12)
        root_rot[t] = root[:9].reshape(3, 3)
        root_pos[t] = root[9:]
        local[t] = _array(path, lineno, rec, "rot", 9 * body.NUM_LOCAL).reshape(-1, 3, 3)
        contacts[t] = _array(path, lineno, rec, "contacts", NUM_CONTACTS)
    extra = [i for i, ln in enumerate(body_lines[length:], start=length + 2) if ln.strip()]
    if extra:
        raise FormatError(f"{path}:{extra[0]}: unexpected content after the last timestep")
    return MotionSequence(id=seq_id, root_rot=root_rot, root_pos=root_pos, local_rot=local, contacts=contacts,
                          beta=beta, fps=fps, family=str(header.get("family", "")))


def load_sequence(path) -> MotionSequence:
    return sequence_from_text(Path(path).read_text(), path)


# --- CPF trajectories ----------------------------------------------------------


def save_cpf(rot: np.ndarray, pos: np.ndarray, path) -> None:
    lines = ["# r00 r01 r02 r10 r11 r12 r20 r21 r22 x y z"]
    for r, p in zip(rot, pos):
        lines.append(" ".join(_num(v) for v in np.concatenate([np.ravel(r), p])))
    Path(path).write_text("\n".join(lines) + "\n")


def _floats(path, lineno, tokens, count):
    if len(tokens) != count:
        raise FormatError(f"{path}:{lineno}: expected {count} numbers, found {len(tokens)}")
    try:
        return np.array([float(v) for v in tokens])
    except ValueError as e:
        raise FormatError(f"{path}:{lineno}: {e}") from None


def load_cpf(path):
    rots, poss = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        v = _floats(path, lineno, line.split(), 12)
        r = v[:9].reshape(3, 3)
        if not Rotation3(r).is_valid(1e-6):
            raise FormatError(f"{path}:{lineno}: rotation is not orthonormal")
        rots.append(r)
        poss.append(v[9:])
    if not rots:
        raise FormatError(f"{path}: no CPF poses")
    return np.array(rots), np.array(poss)


# --- hand observations ---------------------------------------------------------


def observations_to_text(observations) -> str:
    observations = list(observations)
    if not observations:
        return "# no observations\n"
    k, cam = observations[0].intrinsics, observations[0].camera_from_cpf
    lines = [
        f"intrinsics {_num(k.fx)} {_num(k.fy)} {_num(k.cx)} {_num(k.cy)}",
        "camera_from_cpf " + " ".join(_num(v) for v in np.concatenate([cam.rotation.matrix.ravel(), cam.position])),
    ]
    for o in observations:
        if o.intrinsics != k or not np.array_equal(o.camera_from_cpf.as_matrix(), cam.as_matrix()):
            raise ValueError("all observations in one file must share intrinsics and camera_from_cpf")
        if o.keypoints2d is not None:
            for j, (u, v) in enumerate(o.keypoints2d):
                if np.isfinite(u) and np.isfinite(v):
                    lines.append(f"kp {o.timestep} {o.side} {j} {_num(u)} {_num(v)}")
        if o.wrist_pose_world is not None:
            w = o.wrist_pose_world
            vals = np.concatenate([w.rotation.matrix.ravel(), w.position])
            lines.append(f"wrist {o.timestep} {o.side} " + " ".join(_num(v) for v in vals))
        if o.local_hand_rotations is not None:
            for j, r in enumerate(o.local_hand_rotations):
                lines.append(f"local {o.timestep} {o.side} {j} " + " ".join(_num(v) for v in r.ravel()))
    return "\n".join(lines) + "\n"


def save_observations(observations, path) -> None:
    Path(path).write_text(observations_to_text(observations))


def observations_from_text(text: str, path="<string>") -> list[HandObservation]:
    k = cam = None
    groups: dict = {}

    def group(lineno, t_tok, side):
        if k is None or cam is None:
            raise FormatError(f"{path}:{lineno}: intrinsics and camera_from_cpf must come first")
        if side not in SIDES:
            raise FormatError(f"{path}:{lineno}: hand side must be left or right")
        try:
            t = int(t_tok)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad timestep {t_tok!r}") from None
        return groups.setdefault((t, side), {"kp": np.full((16, 2), np.nan), "has_kp": False,
                                             "wrist": None, "local": {}})

    def index(lineno, tok, hi):
        try:
            j = int(tok)
        except ValueError:
            j = -1
        if not 0 <= j < hi:
            raise FormatError(f"{path}:{lineno}: joint index {tok!r} out of range [0, {hi})")
        return j

    for lineno, raw in enumerate(text.splitlines(), start=1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        kind, rest = tok[0], tok[1:]
        if kind == "intrinsics":
            v = _floats(path, lineno, rest, 4)
            try:
                k = CameraIntrinsics(*v)
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
        elif kind == "camera_from_cpf":
            v = _floats(path, lineno, rest, 12)
            cam = PoseSE3(Rotation3(v[:9].reshape(3, 3)), v[9:])
        elif kind == "kp":
            if len(rest) != 5:
                raise FormatError(f"{path}:{lineno}: kp needs t side joint u v")
            g = group(lineno, rest[0], rest[1])
            g["kp"][index(lineno, rest[2], 16)] = _floats(path, lineno, rest[3:], 2)
            g["has_kp"] = True
        elif kind == "wrist":
            if len(rest) < 2:
                raise FormatError(f"{path}:{lineno}: wrist needs t side and 12 numbers")
            g = group(lineno, rest[0], rest[1])
            v = _floats(path, lineno, rest[2:], 12)
            g["wrist"] = PoseSE3(Rotation3(v[:9].reshape(3, 3)), v[9:])
        elif kind == "local":
            if len(rest) < 3:
                raise FormatError(f"{path}:{lineno}: local needs t side joint and 9 numbers")
            g = group(lineno, rest[0], rest[1])
            g["local"][index(lineno, rest[2], 15)] = _floats(path, lineno, rest[3:], 9).reshape(3, 3)
        else:
            raise FormatError(f"{path}:{lineno}: unknown record type {kind!r}")

    out = []
    for (t, side), g in sorted(groups.items()):
        local = None
        if g["local"]:
            if len(g["local"]) != 15:
                raise FormatError(f"{path}: timestep {t} {side} hand has {len(g['local'])} of 15 local rotations")
            local = np.array([g["local"][j] for j in range(15)])
        if not g["has_kp"] and g["wrist"] is None:
            raise FormatError(f"{path}: timestep {t} {side} hand has neither keypoints nor a wrist pose")
        out.append(HandObservation(t, side, k, cam, g["kp"] if g["has_kp"] else None, g["wrist"], local))
    return out


def load_observations(path) -> list[HandObservation]:
    return observations_from_text(Path(path).read_text(), path)
