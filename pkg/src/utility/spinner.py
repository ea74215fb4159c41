import sys
from typing import Optional, TextIO


class Spinner:
    """Single-line progress for long loops: training steps, sweep cells, gradient checks."""

    def __init__(self, total: Optional[int] = None, stream: Optional[TextIO] = None, enabled: bool = True):
        self.frames = ["⠋", "⠙", "⠹", "⠸", "⠼", "⠴", "⠦", "⠧", "⠇", "⠏"]
        self.total = total
        self.index = 0
        self.stream = stream if stream is not None else sys.stderr
        self.enabled = enabled

    def spin(self, type_str: str = "steps", loss: Optional[float] = None) -> None:
        frame = self.frames[self.index % len(self.frames)]
        progress = f"({self.index + 1}/{self.total})" if self.total is not None else f"{self.index + 1}"
        suffix = f" loss={loss:.6g}" if loss is not None else ""
        if self.enabled:
            self.stream.write(f"\r{frame} {progress} {type_str}{suffix}")
            self.stream.flush()
        self.index += 1

    def finish(self, message: str) -> None:
        if self.enabled:
            self.stream.write("\r" + " " * 60 + "\r")
            self.stream.write(f"✔ {message}\n")
            self.stream.flush()
