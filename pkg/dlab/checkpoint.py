'''Single-file, little-endian checkpoint container.

Layout::

    magic "DLAB" | format_version u32 | section count u32
    per section:
        name (u32 length + UTF-8)
        array count u32
        per array: name, dtype tag (both length-prefixed), ndim u32,
                   shape u64 * ndim, byte count u64, raw data
        metadata (u32 length + UTF-8 JSON object)
'''
import dataclasses
import json
import os
import struct
import tempfile

import numpy as np

from .core import CheckpointError

MAGIC = b'DLAB'
FORMAT_VERSION = 1


@dataclasses.dataclass
class Section:
    '''Named arrays plus scalar metadata'''
    arrays: dict = dataclasses.field(default_factory=dict)
    metadata: dict = dataclasses.field(default_factory=dict)


def _pack_text(text):
    data = text.encode('utf-8')
    return struct.pack('<I', len(data)) + data


def _write_section(stream, name, section):
    stream.write(_pack_text(name))
    stream.write(struct.pack('<I', len(section.arrays)))
    for array_name, array in section.arrays.items():
        array = np.ascontiguousarray(array)
        array = array.astype(array.dtype.newbyteorder('<'), copy=False)
        stream.write(_pack_text(array_name))
        stream.write(_pack_text(array.dtype.str))
        stream.write(struct.pack('<I', array.ndim))
        stream.write(struct.pack('<{0}Q'.format(array.ndim), *array.shape))
        raw = array.tobytes()
        stream.write(struct.pack('<Q', len(raw)))
        stream.write(raw)
    stream.write(_pack_text(json.dumps(section.metadata, sort_keys=True)))


def write_container(filename, sections):
    '''Write ``{name: Section}`` atomically (temporary file, then rename).

    Raises
    ------
    OSError if the file cannot be written, e.g. on a full disc
    '''
    directory = os.path.dirname(os.path.abspath(filename))
    os.makedirs(directory, exist_ok=True)
    handle, tmp_name = tempfile.mkstemp(prefix='.dlab-', dir=directory)
    try:
        with os.fdopen(handle, 'wb') as stream:
            stream.write(MAGIC)
            stream.write(struct.pack('<II', FORMAT_VERSION, len(sections)))
            for name, section in sections.items():
                _write_section(stream, name, section)
            stream.flush()
            os.fsync(stream.fileno())
        os.replace(tmp_name, filename)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


class _Reader(object):

    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, count):
        if count < 0 or self.offset + count > len(self.data):
            raise ValueError('unexpected end of data')
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def text(self):
        (length,) = self.unpack('<I')
        return self.take(length).decode('utf-8')


def _read_section(reader):
    arrays = {}
    (count,) = reader.unpack('<I')
    for _ in range(count):
        array_name = reader.text()
        dtype = np.dtype(reader.text())
        (ndim,) = reader.unpack('<I')
        shape = reader.unpack('<{0}Q'.format(ndim))
        (nbytes,) = reader.unpack('<Q')
        raw = reader.take(nbytes)
        arrays[array_name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    metadata = json.loads(reader.text())
    if not isinstance(metadata, dict):
        raise ValueError('metadata is not a mapping')
    return Section(arrays, metadata)


def read_container(filename):
    '''Read a container into ``{name: Section}``.

    Raises
    ------
    OSError if the file cannot be opened
    CheckpointError for a bad magic, an unsupported version or a corrupt
    section (the message names the section)
    '''
    with open(filename, 'rb') as infile:
        data = infile.read()
    reader = _Reader(data)
    try:
        magic = reader.take(4)
        version, count = reader.unpack('<II')
    except (ValueError, struct.error):
        raise CheckpointError('{0} is too short to be a checkpoint'.format(filename))
    if magic != MAGIC:
        raise CheckpointError('{0} is not a checkpoint (magic {1!r})'.format(filename, magic))
    if version != FORMAT_VERSION:
        raise CheckpointError('{0} has format_version {1}, this version reads {2}'.format(
            filename, version, FORMAT_VERSION))
    sections = {}
    for index in range(count):
        name = '#{0}'.format(index)
        try:
            name = reader.text()
            sections[name] = _read_section(reader)
        except (ValueError, TypeError, struct.error, UnicodeDecodeError) as err:
            raise CheckpointError('corrupt section {0!r} in {1}: {2}'.format(
                name, filename, err))
    return sections
