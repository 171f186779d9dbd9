def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(report, "user_properties", []))
            if "criterion" in props and report.when == "call":
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines, key=lambda x: int(x[0].split()[0][1:])):
            terminalreporter.write_line(f"{verdict}  {name}" + (f"  [{detail}]" if detail else ""))
