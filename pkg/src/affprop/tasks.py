"""The three dense prediction tasks and their output conventions."""

from enum import Enum


class TaskKind(Enum):
    DEPTH = "depth"
    NORMAL = "normal"
    SEG = "seg"

    def out_channels(self, num_classes: int) -> int:
        """Prediction channels: scalar depth, 3-vector normal, K class logits."""
        if self is TaskKind.DEPTH:
            return 1
        if self is TaskKind.NORMAL:
            return 3
        return num_classes


ALL_TASKS = (TaskKind.DEPTH, TaskKind.NORMAL, TaskKind.SEG)
