"""Writes the golden binary files with an encoder independent of the crate.

Run from this directory: python3 make_golden.py
"""
import math
import struct


def pack_cell(face, level, i, j):
    return (face << 61) | (level << 56) | (i << 28) | j


def cell_of(lat_deg, lon_deg, level):
    lat, lon = math.radians(lat_deg), math.radians(lon_deg)
    x = math.cos(lat) * math.cos(lon)
    y = math.cos(lat) * math.sin(lon)
    z = math.sin(lat)
    a = [abs(x), abs(y), abs(z)]
    axis = max(range(3), key=lambda k: (a[k], -k))
    face = axis if (x, y, z)[axis] >= 0 else axis + 3
    u, v = {
        0: (y / x, z / x),
        1: (-x / y, z / y),
        2: (-x / z, -y / z),
        3: (z / x, y / x),
        4: (z / y, -x / y),
        5: (-y / z, -x / z),
    }[face]
    size = 1 << level
    idx = lambda s: min(max(int(math.floor((s + 1) * 0.5 * size)), 0), size - 1)
    return pack_cell(face, level, idx(u), idx(v))


def f32s(xs):
    return b"".join(struct.pack("<f", x) for x in xs)


def gcdb():
    out = b"GCDB" + struct.pack("<HBBIQd", 1, 3, 13, 4, 3, 1.25)
    rows = [
        (pack_cell(2, 13, 100, 200), 0.82, 0.14, [0.5, -0.25, 1.5, 0.0]),
        (pack_cell(2, 13, 100, 201), 0.8201, 0.1401, [1.0, 2.0, -3.0, 0.125]),
        (pack_cell(2, 13, 101, 200), -0.5, 3.0, [-1.0, 0.0, 0.0, 0.75]),
    ]
    for id_, lat, lon, v in rows:
        out += struct.pack("<Qdd", id_, lat, lon) + f32s(v)
    return out


def gprt():
    out = b"GPRT" + struct.pack("<HBBIQ", 1, 12, 0, 4, 3)
    rows = [
        (pack_cell(2, 12, 7, 9), [1.0, 0.0, 0.0, 0.0]),
        (pack_cell(2, 12, 7, 10), [0.0, -1.0, 0.0, 0.0]),
        (pack_cell(3, 12, 0, 4095), [0.5, 0.5, 0.5, -0.5]),
    ]
    for id_, v in rows:
        out += struct.pack("<Q", id_) + f32s(v)
    return out


def genc():
    # input 3, hidden 2, embedding 2: 6 + 2 + 4 + 2 parameters.
    params = [0.25 * k - 1.5 for k in range(14)]
    return b"GENC" + struct.pack("<HIII", 1, 3, 2, 2) + f32s(params)


def gwds():
    level = 12
    out = b"GWDS" + struct.pack("<HBBIIQ", 1, level, 0, 2, 3, 2)
    samples = [
        (7, 47.01, 8.02, 1.5, 1.2, 0, [0.5, -2.0], 47.0105, 8.0203, 0.25, 40.0, [1.0, 0.0, -0.5]),
        (9, 46.9, 7.95, -0.75, 1.0, 1, [3.0, 0.125], 46.9002, 7.9501, 0.0, 12.5, [0.0, 2.5, 1.0]),
    ]
    for place, lat, lon, heading, fov, epoch, g, tlat, tlon, rot, off, a in samples:
        out += struct.pack("<IQdd", place, cell_of(lat, lon, level), math.radians(lat), math.radians(lon))
        out += struct.pack("<ffB", heading, fov, epoch) + f32s(g)
        out += struct.pack("<dd", math.radians(tlat), math.radians(tlon))
        out += struct.pack("<ff", rot, off) + f32s(a)
    return out


for name, data in [("db.gcdb", gcdb()), ("prototypes.gprt", gprt()), ("encoder.genc", genc()), ("dataset.gwds", gwds())]:
    with open(name, "wb") as f:
        f.write(data)
