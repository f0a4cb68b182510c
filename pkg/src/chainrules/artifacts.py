import zipfile

from typing import Mapping

import numpy as np


# Fixed member timestamp so identical arrays give identical archive bytes.
_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_npz(path: str, arrays: Mapping[str, np.ndarray]) -> None:
    """Write an uncompressed ``.npz`` readable by ``numpy.load``."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            with zf.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(
                    f,
                    np.asanyarray(arrays[name]),
                    allow_pickle=False,
                )
