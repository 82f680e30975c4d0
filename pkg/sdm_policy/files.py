import os
import pathlib
import tempfile
import typing


def atomic_write_text(path: typing.Union[str, os.PathLike], text: str):
    """Write ``text`` to ``path`` through a temporary file in the same directory, then
    rename it into place so readers never observe a partially written file.

    Args:
        path (str | os.PathLike): destination file
        text (str): full file contents
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as tmp:
            tmp.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
