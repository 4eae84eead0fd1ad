"""
Distillation losses on a two-class toy
======================================

Small enough to check with a pencil.
"""

import math

import numpy as np

from askdlab import losses as L

# a confident teacher and an undecided student
p_teacher = np.array([[1.0, 0.0]])
p_student = np.array([[0.5, 0.5]])

kl = L.kl_loss(p_teacher, p_student, tau=1.0).item()
print("KL(teacher || student) =", kl, " ln 2 =", math.log(2))

# the temperature-squared factor keeps gradient scale comparable across tau
print("same pair at tau=2:", L.kl_loss(p_teacher, p_student, tau=2.0).item())

# temperature softening
logits = np.array([[1.0, 2.0]])
for tau in (0.5, 1.0, 2.0, 8.0):
    print(f"tau={tau}: ", L.softmax_temperature(logits, tau).data.round(4))

# self-distillation target: convex mix of the hard label and the previous snapshot
y = np.array([[1.0, 0.0]])
p_prev = np.array([[0.6, 0.4]])
for a in (0.0, 0.56, 0.8, 1.0):
    print(f"alpha_skd={a}: target", L.skd_target(y, p_prev, a).probs)
