import mlflow

from polyvar.tracking import RunTracker


def _fail(*args, **kwargs):
    raise AssertionError("mlflow must not be called")


def test_disabled_tracker_never_calls_mlflow(monkeypatch, tmp_path):
    for name in ("set_experiment", "start_run", "log_param", "log_metric", "log_artifact", "end_run"):
        monkeypatch.setattr(mlflow, name, _fail)
    tracker = RunTracker("unit", enabled=False)
    tracker.start("run", {"seed": 1})
    tracker.log_row(64, {"dW_hat": 0.1, "dK_hat": None})
    tracker.log_fit(-0.5, (-0.6, -0.4), 0.99)
    tracker.log_artifacts([str(tmp_path)])
    tracker.finish()
    assert not tracker.active


def test_unreachable_server_leaves_tracker_inactive(monkeypatch):
    def unreachable(name):
        raise ConnectionError("no tracking server")

    monkeypatch.setattr(mlflow, "set_experiment", unreachable)
    monkeypatch.setattr(mlflow, "log_metric", _fail)
    tracker = RunTracker("unit")
    tracker.start("run", {})
    assert not tracker.active
    tracker.log_row(64, {"dW_hat": 0.1})


def test_logging_errors_are_swallowed(monkeypatch):
    calls = []
    monkeypatch.setattr(mlflow, "set_experiment", lambda name: calls.append(("experiment", name)))
    monkeypatch.setattr(mlflow, "start_run", lambda run_name: calls.append(("run", run_name)))
    monkeypatch.setattr(mlflow, "log_param", lambda key, value: calls.append((key, value)))
    monkeypatch.setattr(mlflow, "end_run", lambda: calls.append(("end",)))

    def broken_metric(*args, **kwargs):
        raise RuntimeError("metric store full")

    monkeypatch.setattr(mlflow, "log_metric", broken_metric)
    tracker = RunTracker("unit")
    tracker.start("fgn-hermite2-stationary", {"seed": 3})
    assert tracker.active
    tracker.log_row(64, {"dW_hat": 0.1})
    tracker.finish()
    assert calls == [
        ("experiment", "unit"),
        ("run", "fgn-hermite2-stationary"),
        ("seed", 3),
        ("end",),
    ]
    assert not tracker.active


def test_experiment_name_from_environment(monkeypatch):
    monkeypatch.setenv("POLYVAR_EXPERIMENT_NAME", "nightly")
    assert RunTracker("unit").experiment_name == "nightly"
