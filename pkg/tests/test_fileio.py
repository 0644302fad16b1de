import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facetmvs.fileio import (ParseError, read_cameras, read_cameras_binary, read_csv, read_image, read_pfm,
                             read_ply, read_pnm, read_points, read_points_text, write_cameras,
                             write_cameras_binary, write_csv, write_image, write_pfm, write_ply, write_pnm,
                             write_points, write_points_text)
from facetmvs.geometry import PointSample, look_at, make_camera
from facetmvs.mesh import SurfaceMesh, icosphere

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
tmp_ok = settings(suppress_health_check=[HealthCheck.function_scoped_fixture])


@st.composite
def meshes(draw):
    nv = draw(st.integers(3, 30))
    V = draw(arrays(np.float64, (nv, 3), elements=finite))
    nf = draw(st.integers(0, 40))
    F = draw(arrays(np.int64, (nf, 3), elements=st.integers(0, nv - 1)))
    return SurfaceMesh(V, F)


@tmp_ok
@given(meshes(), st.booleans())
def test_ply_round_trip(tmp_path, mesh, binary):
    p = tmp_path / "m.ply"
    write_ply(p, mesh, binary=binary)
    back = read_ply(p)
    if binary:
        assert np.array_equal(back.vertices, mesh.vertices)
    else:
        assert np.allclose(back.vertices, mesh.vertices, rtol=1e-15, atol=0)
    assert np.array_equal(back.faces, mesh.faces)


def cameras(rng, n=3):
    out = []
    for k in range(n):
        eye = rng.normal(size=3) * 5 + np.array([0, 0, 8.0])
        K = np.array([[rng.uniform(50, 500), 0.3, rng.uniform(10, 40)], [0, rng.uniform(50, 500),
                      rng.uniform(10, 40)], [0, 0, 1]])
        out.append(make_camera(K, look_at(eye, rng.normal(size=3)), eye, (64, 48), id=k * 7))
    return out


def test_camera_round_trips(tmp_path, rng):
    cams = cameras(rng)
    write_cameras_binary(tmp_path / "c.bin", cams)
    write_cameras(tmp_path / "c.txt", cams)
    for back in (read_cameras_binary(tmp_path / "c.bin"), read_cameras(tmp_path / "c.txt")):
        for a, b in zip(cams, back):
            # 17 significant digits reproduce doubles exactly
            assert np.array_equal(a.intrinsics, b.intrinsics) and np.array_equal(a.rotation, b.rotation)
            assert np.array_equal(a.center, b.center) and a.id == b.id and a.image_size == b.image_size


samples_st = st.lists(st.tuples(st.tuples(finite, finite, finite),
                                st.frozensets(st.integers(0, 2 ** 20), min_size=1, max_size=6)), max_size=20)


@tmp_ok
@given(samples_st)
def test_point_round_trips(tmp_path, raw):
    samples = [PointSample(p, v) for p, v in raw]
    write_points(tmp_path / "p.bin", samples)
    write_points_text(tmp_path / "p.txt", samples)
    for back in (read_points(tmp_path / "p.bin"), read_points_text(tmp_path / "p.txt")):
        assert [tuple(s.position) for s in back] == [tuple(s.position) for s in samples]
        assert [s.visibility for s in back] == [s.visibility for s in samples]


@tmp_ok
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(0, 1, width=32)))
def test_pfm_round_trip_is_lossless(tmp_path, img):
    write_pfm(tmp_path / "i.pfm", img)
    assert np.array_equal(read_pfm(tmp_path / "i.pfm"), img.astype(np.float64))


@tmp_ok
@given(arrays(np.int64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(0, 255)),
       st.booleans())
def test_pgm_and_png_round_trip_8_bit_values(tmp_path, q, binary):
    img = q / 255.0
    write_pnm(tmp_path / "i.pgm", img, binary=binary)
    assert np.allclose(read_pnm(tmp_path / "i.pgm"), img, atol=1e-12)
    write_image(tmp_path / "i.png", img)
    assert np.allclose(read_image(tmp_path / "i.png").values, img, atol=1e-12)


def test_csv_round_trip(tmp_path):
    rows = [[1, 0.1, "a"], [2, 1e-300, "b"]]
    write_csv(tmp_path / "m.csv", ["k", "v", "s"], rows)
    header, back = read_csv(tmp_path / "m.csv")
    assert header == ["k", "v", "s"]
    assert [float(r[1]) for r in back] == [0.1, 1e-300]


def _ply_ascii(body, header_extra=""):
    return ("ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\n"
            f"property double z\nelement face 1\nproperty list uchar int vertex_indices\n{header_extra}"
            f"end_header\n{body}").encode()


GOOD_BODY = "0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"
CAM_LINE = "0 " + " ".join(["1"] * 9) + " " + " ".join(["1", "0", "0", "0", "1", "0", "0", "0", "1"]) + " 0 0 0 4 4"

MALFORMED = [
    ("m.ply", b"plx\n"),
    ("m.ply", b"ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\n"),
    ("m.ply", _ply_ascii("0 0 0\n1 0 0\n0 1\n3 0 1 2\n")),
    ("m.ply", _ply_ascii("0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n")),
    ("m.ply", _ply_ascii("0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", "comment x\nformat ascii 2.0\n")),
    ("m.ply", _ply_ascii("0 0 0\n1 0 zz\n0 1 0\n3 0 1 2\n")),
    ("m.ply", _ply_ascii("0 0 0\n1 0 0\n0 1 0\n4 0 1 2 0\n")),
    ("m.ply", b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\n"
              b"property double y\nproperty double z\nend_header\n" + b"\0" * 20),
    ("c.txt", ("0 1 2\n").encode()),
    ("c.txt", (CAM_LINE + "\n" + CAM_LINE + "\n").encode()),
    ("c.txt", CAM_LINE.replace(" 4 4", " 4 -4").encode()),
    ("c.bin", b"FMCAM1\x05\0\0\0"),
    ("p.bin", b"FMPTX1"),
    ("p.bin", b"FMPTS1" + (2).to_bytes(8, "little") + b"\0" * 24 + b"\x01\x03"),
    ("p.bin", b"FMPTS1" + (1).to_bytes(8, "little") + b"\0" * 24 + b"\x00"),
    ("p.txt", b"0 0 0 2 1\n"),
    ("p.txt", b"# ok\n0 0 0 1 1\n0 0 x 1 1\n"),
    ("i.pgm", b"P5\n4 4\n255\n" + b"\0" * 10),
    ("i.pgm", b"P5\n4 x\n255\n"),
    ("i.pgm", b"P9\n4 4\n255\n"),
    ("i.pgm", b"P2\n2 2\n255\n0 1 2 300\n"),
    ("i.pfm", b"Pf\n2 2\n-1.0\n" + b"\0" * 4),
    ("i.pfm", b"Pf\n2 2\n0.0\n" + b"\0" * 16),
    ("i.png", b"\x89PNG\r\n\x1a\n garbage"),
    ("m.csv", b"a,b\n1,2\n3\n"),
]
READERS = {"m.ply": read_ply, "c.txt": read_cameras, "c.bin": read_cameras_binary, "p.bin": read_points,
           "p.txt": read_points_text, "i.pgm": read_pnm, "i.pfm": read_pfm, "i.png": read_image,
           "m.csv": read_csv}


@pytest.mark.parametrize("name,data", MALFORMED, ids=[f"{n}-{k}" for k, (n, _) in enumerate(MALFORMED)])
def test_malformed_files_report_a_position(tmp_path, name, data):
    p = tmp_path / name
    p.write_bytes(data)
    with pytest.raises(ParseError) as e:
        READERS[name](p)
    err = e.value
    assert err.path == str(p)
    assert err.line is not None or err.offset is not None
    assert ("line" in str(err)) or ("offset" in str(err))


def test_valid_ascii_ply_parses(tmp_path):
    p = tmp_path / "m.ply"
    p.write_bytes(_ply_ascii(GOOD_BODY))
    m = read_ply(p)
    assert m.n_vertices == 3 and m.faces.tolist() == [[0, 1, 2]]


@tmp_ok
@given(st.binary(max_size=200), st.sampled_from(sorted(READERS)))
def test_random_bytes_never_crash_readers(tmp_path, data, name):
    p = tmp_path / name
    p.write_bytes(data)
    try:
        READERS[name](p)
    except ParseError:
        pass


def test_provenance_comment_does_not_change_data(tmp_path):
    m = icosphere(1)
    write_ply(tmp_path / "a.ply", m, provenance=True)
    back = read_ply(tmp_path / "a.ply")
    assert np.array_equal(back.vertices, m.vertices) and np.array_equal(back.faces, m.faces)
