import os
import struct

import numpy as np
import pytest

from ..checkpoint import FORMAT_VERSION, MAGIC, Section, read_container, write_container
from ..core import CheckpointError


@pytest.fixture
def sections():
    return {
        'model': Section({'w': np.arange(12, dtype=np.float32).reshape(3, 4),
                          'b': np.array([1.5, -2.0], dtype=np.float64)},
                         {'fingerprint': 'abc'}),
        'meta': Section({}, {'iter': 7, 'config': 'seed = 1\n'}),
    }


def test_round_trip(tmpdir, sections):
    filename = str(tmpdir.join('state.dlab'))
    write_container(filename, sections)
    restored = read_container(filename)
    assert list(restored) == ['model', 'meta']
    for name, array in sections['model'].arrays.items():
        np.testing.assert_array_equal(restored['model'].arrays[name], array)
        assert restored['model'].arrays[name].dtype == array.dtype
    assert restored['meta'].metadata == {'iter': 7, 'config': 'seed = 1\n'}


def test_header_layout(tmpdir, sections):
    filename = str(tmpdir.join('state.dlab'))
    write_container(filename, sections)
    with open(filename, 'rb') as infile:
        header = infile.read(12)
    assert header[:4] == MAGIC
    assert struct.unpack('<II', header[4:]) == (FORMAT_VERSION, 2)


def test_no_temporary_files_left(tmpdir, sections):
    write_container(str(tmpdir.join('state.dlab')), sections)
    assert os.listdir(str(tmpdir)) == ['state.dlab']


def test_bad_magic(tmpdir):
    filename = tmpdir.join('junk.dlab')
    filename.write_binary(b'PNG!' + b'\x00' * 16)
    with pytest.raises(CheckpointError, match='not a checkpoint'):
        read_container(str(filename))


def test_too_short(tmpdir):
    filename = tmpdir.join('short.dlab')
    filename.write_binary(b'DL')
    with pytest.raises(CheckpointError, match='too short'):
        read_container(str(filename))


def test_version_mismatch(tmpdir, sections):
    filename = str(tmpdir.join('state.dlab'))
    write_container(filename, sections)
    with open(filename, 'r+b') as stream:
        stream.seek(4)
        stream.write(struct.pack('<I', FORMAT_VERSION + 1))
    with pytest.raises(CheckpointError, match='format_version'):
        read_container(filename)


def test_corrupt_section_is_named(tmpdir, sections):
    filename = str(tmpdir.join('state.dlab'))
    write_container(filename, sections)
    with open(filename, 'rb') as infile:
        data = infile.read()
    with open(filename, 'wb') as out:
        out.write(data[:-5])
    with pytest.raises(CheckpointError, match="corrupt section 'meta'"):
        read_container(filename)


def test_missing_file(tmpdir):
    with pytest.raises(OSError):
        read_container(str(tmpdir.join('missing.dlab')))
