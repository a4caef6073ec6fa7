import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graspref.align import IcpParams
from graspref.cloud import Plane, PointCloud, principal_axes
from graspref.errors import DegenerateCloud, DegenerateRotation, EmptyCloud, UnknownObject
from graspref.geometry import Frame, LossWeights, Pose, axis_angle, compose, invert, rot_z
from graspref.nn import Mlp, TrainConfig
from graspref.propose import (PROPOSAL_LAYERS, GraspLibrary, ProposalModel, gpnet_propose, library_propose,
                              load_proposal, naive_propose, proposal_errors, save_proposal, train_proposal)
from graspref.shapes import BOX, ShapeSpec, sample_surface
from graspref.synth import split

from conftest import quick_labels


def test_zero_model_degenerate(small_data):
    _, ex = small_data
    m = ProposalModel(Mlp(PROPOSAL_LAYERS, params=np.zeros(Mlp(PROPOSAL_LAYERS, seed=0).n_params)))
    with pytest.raises(DegenerateRotation):
        gpnet_propose(m, ex[0].observation)


def test_identical_observations_identical_poses(small_data):
    _, ex = small_data
    m = ProposalModel.create(seed=1)
    assert gpnet_propose(m, ex[0].observation) == gpnet_propose(m, ex[0].observation)


def test_zero_lr_unchanged(small_data):
    _, ex = small_data
    m = ProposalModel.create(seed=2)
    before = m.net.params.copy()
    train_proposal(m, split(ex, "train"), TrainConfig(learning_rate=0.0, epochs=3))
    assert np.array_equal(m.net.params, before)



def test_overfit_single_example(small_data):
    _, ex = small_data
    m, curve = train_proposal(ProposalModel.create(seed=3), ex[:1], TrainConfig(epochs=500, batch_size=1))
    assert curve[-1] < 1e-3


def test_training_reduces_loss_and_orthonormal_output(small_data):
    _, ex = small_data
    train = split(ex, "train")
    m, curve = train_proposal(ProposalModel.create(seed=4), train, TrainConfig(epochs=60, batch_size=8))
    assert curve[-1] < curve[0]
    for e in ex:
        R = gpnet_propose(m, e.observation).rotation
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-9) and np.linalg.det(R) == pytest.approx(1.0)


def test_translation_learns_without_rotation_weight(small_data):
    _, ex = small_data
    train = split(ex, "train")
    m = ProposalModel.create(seed=5)
    cfg = TrainConfig(epochs=1, batch_size=8, loss_weights=LossWeights(1.0, 0.0))
    m, _ = train_proposal(m, train, cfg)
    before = proposal_errors(m, train)[0].mean()
    m, _ = train_proposal(m, train, TrainConfig(epochs=80, batch_size=8, loss_weights=LossWeights(1.0, 0.0)),
                          epoch_offset=1, refit=False)
    assert proposal_errors(m, train)[0].mean() < before


def test_checkpoint_round_trip(tmp_path, small_data):
    _, ex = small_data
    m, curve = train_proposal(ProposalModel.create(seed=6), ex[:4], TrainConfig(epochs=2, batch_size=2))
    save_proposal(tmp_path / "p.ckpt", m, curve=curve, epoch=2)
    back, header, vectors = load_proposal(tmp_path / "p.ckpt")
    assert header["epoch"] == 2
    assert gpnet_propose(back, ex[0].observation) == gpnet_propose(m, ex[0].observation)


def flat_cloud(center, length=0.2, width=0.05, angle=0.0, n=400, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * [length, width, 0.04]
    pts[:, 2] += 0.03
    pts = pts @ rot_z(angle).T + [center[0], center[1], 0.0]
    return PointCloud(pts, None, Frame.TABLE)


def test_naive_height_and_offset_bounds():
    c = flat_cloud((0.3, 0.2))
    cx, cy = c.centroid()[:2]
    for seed in range(50):
        g = naive_propose(c, Plane(), seed)
        assert g.translation[2] == pytest.approx(0.20, abs=1e-12)
        assert abs(g.translation[0] - cx) <= 0.02 and abs(g.translation[1] - cy) <= 0.02
        assert g.rotation[:, 2] @ [0, 0, -1] == pytest.approx(1.0)


def test_naive_grip_axis_across_major_axis():
    for angle in (0.0, 0.4, 1.3):
        c = flat_cloud((0, 0), angle=angle)
        g = naive_propose(c, Plane(), 0)
        # PCA oracle on the cloud flattened onto the table
        flat = PointCloud(c.points * [1, 1, 0] + [0, 0, 1e-3] * np.random.default_rng(1).normal(size=(len(c), 1)))
        major = principal_axes(flat)[1][:, 0]
        # the jaws close along gripper x, perpendicular to the long axis
        assert abs(g.rotation[:, 0] @ major) < 1e-6
        assert abs(major @ rot_z(angle) @ [1, 0, 0]) > 0.99


def test_naive_deterministic_and_errors():
    c = flat_cloud((0.1, 0.0))
    assert naive_propose(c, Plane(), 9) == naive_propose(c, Plane(), 9)
    with pytest.raises(EmptyCloud):
        naive_propose(PointCloud(np.zeros((0, 3)), None, Frame.TABLE))
    with pytest.raises(DegenerateCloud):
        naive_propose(PointCloud([[0, 0, 0.1], [0, 0, 0.2], [0, 0, 0.3]], None, Frame.TABLE))


def test_naive_offsets_uniform():
    c = flat_cloud((0, 0))
    cx, cy = c.centroid()[:2]
    offs = np.array([naive_propose(c, Plane(), s).translation[:2] - [cx, cy] for s in range(10000)])
    for axis in range(2):
        counts, _ = np.histogram(offs[:, axis], bins=10, range=(-0.02, 0.02))
        sigma = np.sqrt(10000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 1000) <= 3 * sigma)
        assert offs[:, axis].min() >= -0.02 and offs[:, axis].max() <= 0.02


BOX_SPEC = ShapeSpec(BOX, (0.12, 0.06, 0.15), id="b")


def box_library():
    return GraspLibrary.from_labels([BOX_SPEC], quick_labels([BOX_SPEC]), points=4000)


def test_library_full_cloud_recovers_grasp():
    lib = box_library()
    entry = lib.get("b")
    c_from_o = Pose(axis_angle([0.2, 1, 0.3], 0.3), [0.02, -0.01, 0.5], Frame.OBJECT, Frame.CAMERA)
    visible = entry.cloud.transformed(c_from_o)
    g = library_propose(lib, "b", visible, IcpParams(starts=1))
    truth = compose(c_from_o, entry.grasp)
    assert np.linalg.norm(g.translation - truth.translation) < 1e-6
    assert np.allclose(g.rotation, truth.rotation, atol=1e-6)


def test_library_unknown_object():
    with pytest.raises(UnknownObject):
        library_propose(box_library(), "nope", PointCloud([[0, 0, 0]] * 3, None, Frame.CAMERA))


def test_library_partial_view_box():
    lib = box_library()
    entry = lib.get("b")
    rng = np.random.default_rng(0)
    errs = []
    for k in range(5):
        t_from_o = Pose(rot_z(rng.uniform(0, 2 * np.pi)), [*rng.uniform(-0.05, 0.05, 2), 0.0], Frame.OBJECT,
                        Frame.TABLE)
        # camera 0.5 m away at 50 degrees elevation
        from graspref.synth import camera_pose_for
        cam = camera_pose_for(t_from_o.apply([0, 0, 0.075]), rng.uniform(0, 2 * np.pi), 50.0)
        c_from_o = compose(invert(cam), t_from_o)
        pts = sample_surface(BOX_SPEC, 4000, 100 + k)
        # a 25% partial view: the two faces toward the camera, cropped to a quarter of the points
        eye_o = invert(c_from_o).apply(np.zeros(3))
        facing = np.sum((eye_o - pts.points) * pts.normals, axis=1) > 0
        seen = pts.points[facing]
        seen = seen[np.argsort(np.linalg.norm(seen - eye_o, axis=1))][:1000]
        visible = PointCloud(c_from_o.apply(seen), None, Frame.CAMERA)
        g = library_propose(lib, "b", visible, camera_pose=cam)
        errs.append(np.linalg.norm(g.translation - compose(c_from_o, entry.grasp).translation))
    assert max(errs) < 0.01


def test_library_save_load(tmp_path):
    lib = box_library()
    lib.save(tmp_path / "lib")
    back = GraspLibrary.load(tmp_path / "lib")
    assert back.ids() == ["b"]
    assert np.array_equal(back.get("b").cloud.points, lib.get("b").cloud.points)
    assert np.allclose(back.get("b").grasp.matrix, lib.get("b").grasp.matrix, atol=1e-15)
    assert lib.validate([BOX_SPEC]) == []
    line = (tmp_path / "lib" / "library.txt").read_text().split()
    assert line[0] == "b" and line[1] == "clouds/b.pcb" and len(line) == 14


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gpnet_rotation_always_valid(seed):
    rng = np.random.default_rng(seed)
    m = ProposalModel.create(seed=seed % 1000)
    m.out_mean = rng.normal(size=12)
    enc = rng.normal(size=PROPOSAL_LAYERS[0])
    from graspref.geometry import vector_to_pose
    try:
        R = vector_to_pose(m.predict_encoded(enc)).rotation
    except DegenerateRotation:
        return
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12) and np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
