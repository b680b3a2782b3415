"""Versioned file formats: CSV tables, JSONL snapshots, binary grid dumps.

Every format carries ``format_version``.  Floats are written with 17
significant digits so text round-trips are exact for float64.
"""
import csv
import hashlib
import json
import os

import numpy as np

from .errors import InvalidSpecError

FORMAT_VERSION = 1


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ''
    return str(v)


def write_csv(path, header, rows):
    """CSV with a leading ``# format_version=N`` comment line."""
    with open(path, 'w', newline='') as fh:
        fh.write(f'# format_version={FORMAT_VERSION}\n')
        w = csv.writer(fh, lineterminator='\n')
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    """Returns (header, rows) with numeric cells parsed to float where possible."""
    with open(path, newline='') as fh:
        first = fh.readline().strip()
        if not first.startswith('# format_version='):
            raise InvalidSpecError(f'{path}: missing format_version line')
        version = int(first.split('=', 1)[1])
        if version != FORMAT_VERSION:
            raise InvalidSpecError(f'{path}: unsupported format_version {version}')
        r = csv.reader(fh)
        header = next(r)
        rows = []
        for raw in r:
            row = []
            for cell in raw:
                try:
                    row.append(float(cell) if cell != '' else None)
                except ValueError:
                    row.append(cell)
            rows.append(row)
    return header, rows


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def dumps(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, allow_nan=True)


def write_json(path, obj):
    with open(path, 'w') as fh:
        fh.write(json.dumps({'format_version': FORMAT_VERSION, **_jsonable(obj)},
                            sort_keys=True, indent=1))
        fh.write('\n')
    return path


def write_jsonl(path, records):
    with open(path, 'w') as fh:
        for rec in records:
            fh.write(dumps({'format_version': FORMAT_VERSION, **rec}))
            fh.write('\n')
    return path


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def trajectory_records(traj):
    for s in traj.snapshots:
        yield {'time': s.time, 'x_plus': s.x_plus, 'xi': s.xi, 'diagnostics': s.diagnostics}


def write_trajectory_csv(path, traj):
    """One row per pair per snapshot: t, i, x_plus, xi, |xi|."""
    rows = []
    for s in traj.snapshots:
        nx = np.linalg.norm(s.xi, axis=1)
        for i in range(len(s.x_plus)):
            rows.append([float(s.time), i, *s.x_plus[i].tolist(), *s.xi[i].tolist(), float(nx[i])])
    header = ['t', 'i', 'x', 'y', 'z', 'xi_x', 'xi_y', 'xi_z', 'xi_norm']
    return write_csv(path, header, rows)


def write_ensemble_csv(path, ens):
    header = ['x', 'y', 'z', 'weight']
    cols = [ens.x, ens.weights[:, None]]
    if ens.xi is not None:
        header[3:3] = ['xi_x', 'xi_y', 'xi_z']
        cols.insert(1, ens.xi)
    data = np.concatenate(cols, axis=1)
    return write_csv(path, header, data.tolist())


def write_grid(stem, F):
    """Write ``stem.bin`` (little-endian float64, C order, shape nx*ny*nz*3)
    and ``stem.json`` (dims, spacing, origin, time, order)."""
    values = np.ascontiguousarray(F.values, dtype='<f8')
    bin_path = f'{stem}.bin'
    with open(bin_path, 'wb') as fh:
        fh.write(values.tobytes(order='C'))
    header = {'format_version': FORMAT_VERSION, 'dims': list(values.shape[:3]),
              'components': int(values.shape[3]), 'dtype': '<f8',
              'spacing': [float(s) for s in F.spacing], 'origin': [float(o) for o in F.origin],
              'time': float(F.time), 'order': int(F.order), 'data': os.path.basename(bin_path)}
    json_path = f'{stem}.json'
    with open(json_path, 'w') as fh:
        json.dump(header, fh, sort_keys=True, indent=1)
        fh.write('\n')
    return json_path, bin_path


def read_grid(json_path):
    from .meso import FField
    with open(json_path) as fh:
        h = json.load(fh)
    if h.get('format_version') != FORMAT_VERSION:
        raise InvalidSpecError(f'{json_path}: unsupported format_version')
    bin_path = os.path.join(os.path.dirname(json_path), h['data'])
    shape = tuple(h['dims']) + (h['components'],)
    values = np.fromfile(bin_path, dtype=h['dtype'])
    if values.size != int(np.prod(shape)):
        raise InvalidSpecError(f'{bin_path}: expected {np.prod(shape)} values, got {values.size}')
    return FField(np.array(h['origin']), np.array(h['spacing']),
                  values.reshape(shape).astype(float), h['time'], h['order'])


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, 'rb') as fh:
        for block in iter(lambda: fh.read(chunk), b''):
            h.update(block)
    return h.hexdigest()
