"""
A pocket-sized end-to-end run
=============================

Generates a small synthetic task, pretrains a teacher for a few epochs and
distils two students from it (plain CE and the two-phase method). Numbers
from a run this small are noisy; the acceptance suite does the real
comparison over five seeds. Takes a few minutes on one core.
"""

import dataclasses
import logging
import tempfile
from pathlib import Path

from askdlab.evalkit.experiments import evaluate
from askdlab.model import Decoder, FrozenEncoder
from askdlab.taskgen import TaskSpec, gen_dataset, load_dataset
from askdlab.trainer import Corpus, TrainConfig, distill, pretrain_teacher

logging.basicConfig(level=logging.INFO, format="%(message)s")

root = Path(tempfile.mkdtemp(prefix="askd-demo-"))
spec = TaskSpec()
paths = {s: gen_dataset(spec, n, s, root / f"{s}.jsonl") for s, n in
         (("train", 400), ("val", 50), ("test", 100))}

cfg = TrainConfig(train_path=str(paths["train"]), val_path=str(paths["val"]),
                  teacher_path=str(root / "teacher.snap"), teacher_max_epochs=8, val_limit=50)
enc = FrozenEncoder(cfg.encoder)
train, val = (Corpus(load_dataset(paths[s]), enc) for s in ("train", "val"))
test = Corpus(load_dataset(paths["test"]), enc)

snap = pretrain_teacher(train, val, cfg, cfg.teacher_path)
teacher = Decoder.from_snapshot(cfg.model_teacher, snap)
print("teacher test TER:", round(evaluate(teacher, test).wer, 4))

for method in ("ce", "askd"):
    student_snap, reports = distill(dataclasses.replace(cfg, method=method), train, val)
    student = Decoder.from_snapshot(cfg.student, student_snap)
    print(method, "phases:", "".join(r.phase[0] for r in reports),
          "test TER:", round(evaluate(student, test).wer, 4))
