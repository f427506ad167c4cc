import struct

import numpy as np
import pytest

from pcformer.state import (BoundarySet, ParticleSystem, StateError, Topology, Trajectory, TrajectoryFormatError,
                            load_trajectory, mass_matrix_inverse_apply, save_trajectory, zero_fill_absent)
from pcformer.toy_data import gen_floor_contact, gen_spring_lattice


def _system(n=4, rng=None):
    rng = rng or np.random.default_rng(0)
    return ParticleSystem(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(n, 3)),
                          np.column_stack([rng.uniform(0.5, 2, n), rng.normal(size=n)]))


def test_topology_canonical_and_deduplicated():
    t = Topology(np.array([[3, 1], [1, 3], [0, 2]]))
    assert t.edges.tolist() == [[0, 2], [1, 3]]
    assert sorted(t.adjacency(1).tolist()) == [3]


def test_topology_rejects_self_loops_and_out_of_range():
    with pytest.raises(StateError):
        Topology(np.array([[2, 2]]))
    with pytest.raises(StateError):
        Topology(np.array([[0, 5]])).check_range(3)


def test_boundary_normals_must_be_unit():
    pos = np.zeros((2, 3))
    BoundarySet.with_normals(pos, np.array([[0, 0, 1.0], [1.0, 0, 0]]))
    with pytest.raises(StateError):
        BoundarySet.with_normals(pos, np.array([[0, 0, 1.01], [1.0, 0, 0]]))


@pytest.mark.parametrize("field,bad", [("positions", np.nan), ("velocities", np.inf)])
def test_particle_system_rejects_non_finite(field, bad):
    s = _system()
    arr = getattr(s, field).copy()
    arr[1, 2] = bad
    with pytest.raises(StateError) as err:
        s.replace(**{field: arr})
    assert err.value.field == field


def test_particle_system_rejects_nonpositive_mass():
    s = _system()
    attrs = s.attributes.copy()
    attrs[0, 0] = 0.0
    with pytest.raises(StateError):
        s.replace(attributes=attrs)


def test_particle_system_shape_mismatch():
    s = _system()
    with pytest.raises(StateError):
        s.replace(velocities=np.zeros((3, 3)))


def test_mass_matrix_inverse_is_per_particle_division():
    s = _system(5)
    f = np.arange(15.0).reshape(5, 3)
    np.testing.assert_allclose(mass_matrix_inverse_apply(s, f), f / s.attributes[:, :1])


def test_zero_fill_absent_defaults():
    s = _system(3)
    s2, topo, bnd = zero_fill_absent(s, None, None)
    assert len(topo) == 0 and bnd.count == 0
    s3, _, _ = zero_fill_absent(s, Topology(np.array([[0, 1]])), None)
    np.testing.assert_array_equal(s3.rest_positions, s.positions)


def test_roundtrip_bit_exact(tmp_path):
    for traj in (gen_floor_contact(n=10, frames=5, seed=3), gen_spring_lattice(dims=(3, 3), frames=4, seed=1)):
        p = tmp_path / "t.traj"
        save_trajectory(traj, p)
        back = load_trajectory(p)
        assert back.equals(traj)
        save_trajectory(back, tmp_path / "u.traj")
        assert (tmp_path / "u.traj").read_bytes() == p.read_bytes()


def test_roundtrip_without_topology_or_boundary(tmp_path):
    traj = Trajectory(0.1, np.zeros((2, 3, 3)), np.ones((2, 3, 3)), np.zeros((2, 3, 3)), np.ones((3, 1)))
    save_trajectory(traj, tmp_path / "a.traj")
    back = load_trajectory(tmp_path / "a.traj")
    assert back.equals(traj) and back.rest_positions is None


def test_header_layout(tmp_path):
    traj = gen_floor_contact(n=7, frames=3, seed=0)
    save_trajectory(traj, tmp_path / "a.traj")
    data = (tmp_path / "a.traj").read_bytes()
    n, nb, cp, cb, w, e, dt = struct.unpack_from("<6Id", data, 7)
    assert (n, nb, cp, cb, w, e) == (7, traj.boundary.count, 1, 3, 3, 0)
    assert dt == traj.dt


def test_truncated_file_rejected(tmp_path):
    traj = gen_floor_contact(n=5, frames=3, seed=0)
    p = tmp_path / "a.traj"
    save_trajectory(traj, p)
    data = p.read_bytes()
    (tmp_path / "b.traj").write_bytes(data[:-4])
    with pytest.raises(TrajectoryFormatError):
        load_trajectory(tmp_path / "b.traj")
    (tmp_path / "c.traj").write_bytes(data + b"\0")
    with pytest.raises(TrajectoryFormatError):
        load_trajectory(tmp_path / "c.traj")
    (tmp_path / "d.traj").write_bytes(b"NOTATRJ" + data[7:])
    with pytest.raises(TrajectoryFormatError):
        load_trajectory(tmp_path / "d.traj")


def test_non_finite_payload_rejected(tmp_path):
    traj = gen_floor_contact(n=5, frames=3, seed=0)
    p = tmp_path / "a.traj"
    save_trajectory(traj, p)
    data = bytearray(p.read_bytes())
    data[-4:] = np.float32(np.nan).tobytes()
    p.write_bytes(bytes(data))
    with pytest.raises(TrajectoryFormatError):
        load_trajectory(p)


def test_window_and_frame():
    traj = gen_floor_contact(n=4, frames=6, seed=0)
    w = traj.window(2, 3)
    assert w.frame_count == 3
    np.testing.assert_array_equal(w.positions[0], traj.positions[2])
    s = traj.frame(4)
    np.testing.assert_array_equal(s.velocities, traj.velocities[4])
