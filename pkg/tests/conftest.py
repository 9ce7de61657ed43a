from histmatch.matching import ObservationTarget, WaveConfig

TOY_EMULATOR = {"mean": "zero", "sigma_u2": 0.5, "theta": 1.5, "sigma_w2": 0.0}


def toy_schedule():
    common = dict(strategy="fixed", cutoffs={"I_M": 3.0}, n_diagnostic=0, training_scope="all",
                  emulator=TOY_EMULATOR, n_volume=20000)
    return [WaveConfig(1, n_runs=8, design="grid", **common),
            WaveConfig(2, n_runs=3, design="pool", **common)]


def toy_targets():
    return [ObservationTarget("f", -0.3, 0.0, 0.05)]


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n, ok, detail in sorted(ACCEPTANCE):
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
