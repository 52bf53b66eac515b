"""Line-oriented reader for the versioned field-tagged model documents.

Floats are written with repr() so parsing returns bit-identical values.
Parse failures always report the offending line number.
"""

from __future__ import annotations


class ModelFormatError(ValueError):
    """A persisted model document cannot be parsed."""


class DocReader:
    def __init__(self, document: str):
        self.lines = document.splitlines()
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.lines):
            raise ModelFormatError(f"line {self.pos + 1}: unexpected end of document")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def unread(self):
        self.pos -= 1

    def error(self, msg: str) -> ModelFormatError:
        return ModelFormatError(f"line {self.pos}: {msg}")

    def expect(self, tag: str) -> list[str]:
        line = self.next()
        parts = line.split()
        if not parts or parts[0] != tag:
            raise self.error(f"expected {tag!r}, got {line!r}")
        return parts[1:]

    def scalar(self, tag: str, conv):
        parts = self.expect(tag)
        if len(parts) != 1:
            raise self.error(f"{tag} takes exactly one value")
        try:
            return conv(parts[0])
        except ValueError as exc:
            raise self.error(f"bad {tag} value {parts[0]!r}") from exc

    def read_meta(self) -> dict[str, str]:
        """Consume consecutive ``meta <key> <value>`` lines."""
        meta: dict[str, str] = {}
        while True:
            line = self.next()
            if not line.startswith("meta "):
                self.unread()
                return meta
            parts = line.split(" ", 2)
            if len(parts) != 3:
                raise self.error("meta line needs a key and a value")
            meta[parts[1]] = parts[2]

    def floats(self, n: int) -> list[float]:
        parts = self.next().split()
        if len(parts) != n:
            raise self.error(f"expected {n} values, got {len(parts)}")
        try:
            return [float(p) for p in parts]
        except ValueError as exc:
            raise self.error("bad float value") from exc


def check_header(reader: DocReader, tag: str, version: int):
    header = reader.next().split()
    if header != [tag, f"v{version}"]:
        if len(header) == 2 and header[0] == tag:
            raise reader.error(f"unsupported format version {header[1]}")
        raise reader.error(f"not an {tag} document")


def meta_lines(meta: dict[str, str]) -> list[str]:
    return [f"meta {key} {val}" for key, val in meta.items()]
