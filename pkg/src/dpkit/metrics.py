from __future__ import annotations

from dataclasses import astuple, dataclass

CSV_COLUMNS = ("experiment_id", "run", "epoch", "train_loss", "train_acc", "test_loss",
               "test_acc", "epsilon_spent", "sigma")


@dataclass(frozen=True)
class MetricsRecord:
    """Per-epoch metrics of one training run."""

    experiment_id: str
    run: int
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    epsilon_spent: float
    sigma: float

    def __post_init__(self):
        for name in ("train_acc", "test_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def row(self) -> list[str]:
        return [_fmt(v) for v in astuple(self)]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
