import pytest

from askdlab.model import Decoder, FrozenEncoder, teacher_config
from askdlab.taskgen import TaskSpec, gen_dataset, load_dataset
from askdlab.trainer import Corpus, TrainConfig


@pytest.fixture(scope="session")
def tiny_paths(tmp_path_factory):
    """32 train / 8 val utterances on disk."""
    root = tmp_path_factory.mktemp("tiny")
    spec = TaskSpec(max_len=6)
    return {
        "train": str(gen_dataset(spec, 32, "train", root / "train.jsonl")),
        "val": str(gen_dataset(spec, 8, "val", root / "val.jsonl")),
        "root": root,
    }


@pytest.fixture(scope="session")
def encoder():
    return FrozenEncoder()


@pytest.fixture(scope="session")
def tiny(tiny_paths, encoder):
    return (Corpus(load_dataset(tiny_paths["train"]), encoder),
            Corpus(load_dataset(tiny_paths["val"]), encoder))


@pytest.fixture(scope="session")
def tiny_teacher(tiny_paths):
    """An untrained but frozen teacher saved to disk; enough to exercise the loss plumbing."""
    dec = Decoder(teacher_config())
    path = tiny_paths["root"] / "teacher.snap"
    dec.snapshot(0).save(path)
    return str(path)


@pytest.fixture
def tiny_cfg(tiny_paths, tiny_teacher):
    return TrainConfig(train_path=tiny_paths["train"], val_path=tiny_paths["val"],
                       teacher_path=tiny_teacher, batch_size=8)


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion, printed at the end
# ---------------------------------------------------------------------------

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    def record(name: str, ok: bool, detail: str) -> bool:
        _CRITERIA.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
