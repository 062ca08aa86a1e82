from run_history import RunHistoryManager, create_run_history


def result(command, exit_code=0):
    return {"command": command, "status": "ok" if exit_code == 0 else "error", "exit_code": exit_code,
            "files": [f"{command}.json"], "summary": {}}


def test_runs_are_numbered_from_one(tmp_path):
    history = create_run_history(str(tmp_path / "out"))
    assert history.add_run(result("forward"), config_path="a.json", seed=3) == 1
    assert history.add_run(result("sweep")) == 2

    first = history.get_run_by_id(1)
    assert first["command"] == "forward"
    assert first["config"] == "a.json" and first["seed"] == 3
    assert history.get_run_by_id(2)["command"] == "sweep"
    assert history.get_run_by_id(0) is None
    assert history.get_run_by_id(3) is None


def test_recent_runs_come_oldest_first(tmp_path):
    history = RunHistoryManager(str(tmp_path / "history.json"))
    assert history.get_recent_runs() == []
    for command in ["forward", "reconstruct", "sweep", "verify"]:
        history.add_run(result(command))
    assert [run["command"] for run in history.get_recent_runs(limit=2)] == ["sweep", "verify"]
    assert len(history.get_recent_runs()) == 4


def test_history_keeps_only_the_newest_entries(tmp_path):
    history = RunHistoryManager(str(tmp_path / "history.json"), max_entries=3)
    for k in range(5):
        history.add_run(result(f"run{k}"))
    assert [run["command"] for run in history.load_history()] == ["run2", "run3", "run4"]
    assert history.get_run_by_id(1)["command"] == "run2"


def test_summary_counts_commands_and_failures(tmp_path):
    history = RunHistoryManager(str(tmp_path / "history.json"))
    history.add_run(result("forward"))
    history.add_run(result("deplete", exit_code=2))
    history.add_run(result("forward", exit_code=1))
    assert history.summarize() == {"total": 3, "failed": 2, "by_command": {"forward": 2, "deplete": 1}}


def test_unreadable_history_reads_as_empty(tmp_path):
    path = tmp_path / "history.json"
    path.write_text("{not json")
    history = RunHistoryManager(str(path))
    assert history.load_history() == []
    assert history.get_run_by_id(1) is None
