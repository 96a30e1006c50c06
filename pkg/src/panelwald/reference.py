"""Published reference values used by the ``replicate-table`` presets."""

from __future__ import annotations

CALIBRATION_COLUMNS = ("n", "chi2", "sd", "p_value", "rejection_rate", "nfi", "cfi", "rmsea")

# n, mean chi2, SD, mean p, rejection rate, NFI, CFI, RMSEA
_T1 = [
    (100, 9.214, 4.402, 0.490, 0.068, 0.937, 0.959, 0.119),
    (200, 9.195, 4.170, 0.486, 0.058, 0.985, 1.000, 0.000),
    (300, 9.178, 4.381, 0.491, 0.050, 0.991, 1.000, 0.000),
    (500, 8.909, 4.472, 0.513, 0.056, 0.991, 0.998, 0.028),
    (800, 9.034, 4.380, 0.501, 0.060, 0.997, 1.000, 0.000),
    (1000, 9.018, 4.140, 0.495, 0.042, 0.999, 1.000, 0.000),
    (5000, 9.138, 4.116, 0.484, 0.040, 1.000, 1.000, 0.000),
    (10000, 8.921, 4.546, 0.513, 0.050, 1.000, 1.000, 0.006),
]

_A1 = [
    (100, 186.332, 19.895, 0.273, 0.215, 0.841, 0.993, 0.020),
    (200, 177.391, 18.738, 0.389, 0.101, 0.922, 1.000, 0.000),
    (300, 175.550, 18.554, 0.415, 0.078, 0.945, 1.000, 0.000),
    (500, 172.176, 19.222, 0.472, 0.070, 0.960, 0.997, 0.011),
    (800, 172.169, 19.271, 0.469, 0.068, 0.974, 0.997, 0.012),
    (1000, 171.764, 17.909, 0.476, 0.066, 0.982, 1.000, 0.000),
    (5000, 171.068, 18.024, 0.490, 0.062, 0.996, 1.000, 0.003),
    (10000, 169.742, 18.433, 0.505, 0.050, 0.998, 1.000, 0.000),
]

_A8 = [
    (100, 13.060, 5.332, 0.444, 0.076, 0.981, 1.000, 0.000),
    (200, 12.640, 5.035, 0.463, 0.060, 0.995, 1.000, 0.000),
    (300, 11.923, 4.850, 0.501, 0.046, 0.994, 1.000, 0.000),
    (500, 12.171, 5.076, 0.494, 0.058, 0.997, 1.000, 0.000),
    (800, 11.746, 4.906, 0.521, 0.064, 0.995, 0.998, 0.027),
    (1000, 12.000, 5.085, 0.501, 0.058, 0.997, 1.000, 0.012),
    (5000, 11.794, 4.982, 0.513, 0.036, 1.000, 1.000, 0.000),
    (10000, 12.130, 4.794, 0.490, 0.036, 1.000, 1.000, 0.006),
]

DETECTION_COLUMNS = ("parameter", "lm_chi2", "epc", "wald", "p_value", "truth")

# statement, LM chi2, EPC, Wald, p, part of the population model
_T2 = [
    ("WFX4 ~~ WFY2", 575.299, 0.447, 12.780, 0.000, True),
    ("WFX4 ~ WFY2", 561.970, 0.810, 0.537, 0.464, False),
    ("WFX2 ~~ WFY4", 540.303, 0.419, 7.874, 0.005, True),
    ("WFY4 ~ WFX2", 515.640, 0.764, 0.372, 0.796, False),
    ("WFY4 ~ x2", 499.933, 0.642, 0.481, 0.488, False),
]

_T3 = [
    ("WFX4 ~ WFX2", 222.566, 1.142, 5.547, 0.019, True),
    ("WFX4 ~~ WFY3", 196.282, -0.110, 0.528, 0.467, False),
    ("WFX4 ~ y3", 190.300, -1.024, 1.278, 0.258, False),
    ("WFX4 ~ x2", 172.917, 0.458, 0.049, 0.824, False),
]

_T4 = [
    ("WFY4 ~ M", 285.407, 0.742, 20.932, 0.000, True),
    ("WFY4 ~ WFY2", 183.201, 1.578, 5.117, 0.024, True),
    ("WFY4 ~ y3", 148.494, 1.367, 0.546, 0.460, False),
    ("WFY1 ~ x1", 143.828, -2.882, 0.115, 0.735, False),
    ("WFY2 ~~ WFY4", 138.537, 0.079, 0.065, 0.799, False),
    ("WFY4 ~ y2", 132.760, 0.447, 3.844, 0.050, False),
    ("WFY4 ~ x1", 116.008, 0.416, 0.387, 0.534, False),
]


def _rows(table, columns):
    return [dict(zip(columns, r)) for r in table]


# table id -> (kind, scenario, default n, default reps, reference rows)
PRESETS = {
    "T1": ("calibration", "Baseline4w", None, 500, _rows(_T1, CALIBRATION_COLUMNS)),
    "A1": ("calibration", "Baseline5w2i", None, 200, _rows(_A1, CALIBRATION_COLUMNS)),
    "A8": ("calibration", "CLPM_Baseline", None, 500, _rows(_A8, CALIBRATION_COLUMNS)),
    "T2": ("detection", "M1_Correlation", 2000, 200, _rows(_T2, DETECTION_COLUMNS)),
    "T3": ("detection", "M2_DirectEffect", 2000, 200, _rows(_T3, DETECTION_COLUMNS)),
    "T4": ("detection", "M3_Mediation", 2000, 200, _rows(_T4, DETECTION_COLUMNS)),
}
