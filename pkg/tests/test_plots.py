import os

import numpy as np
import pandas as pd
import pytest

from src.dynamic_attention import AttentionSchedule, schedule_rate
from src.plots import emit_plots, plot_attention_rate, plot_losses, plot_pca, rate_curve


class TestFigures:
    def test_run_plots_exist(self, trained_run):
        names = sorted(os.path.basename(path) for path in trained_run.plots)
        assert names == ["attention_rate.png", "losses.png", "mi.png", "pca.png"]
        assert all(os.path.getsize(path) > 0 for path in trained_run.plots)

    def test_rate_curve_follows_the_schedule(self):
        schedule = AttentionSchedule.for_epochs(10)
        epochs = np.linspace(0, 10, 101, endpoint=False)
        curve = rate_curve(schedule, epochs)
        assert curve.tolist() == [schedule_rate(schedule, e) for e in epochs]

    def test_pca_points(self):
        rng = np.random.default_rng(0)
        fig = plot_pca(rng.normal(size=(12, 2)), rng.normal(size=(9, 2)), np.array([2.0, 1.0]))
        real, generated = fig.axes[0].collections
        assert len(real.get_offsets()) == 12
        assert len(generated.get_offsets()) == 9

    def test_losses_skip_missing_terms(self):
        steps = pd.DataFrame({"step": [1, 2], "loss_d": [1.0, 0.9], "gan": [0.7, 0.6], "perc": [0.1, 0.1],
                              "lip": [0.2, 0.1], "mi": [None, None], "total": [3.0, 2.0]})
        labels = [line.get_label() for line in plot_losses(steps).axes[0].lines]
        assert labels == ["loss_d", "gan", "perc", "lip", "total"]

    def test_attention_rate_samples(self):
        steps = pd.DataFrame({"epoch": [0.0, 1.0], "rate": [0.8, 0.8]})
        fig = plot_attention_rate(AttentionSchedule.for_epochs(2), steps, samples=50)
        schedule_line, step_line = fig.axes[0].lines
        assert len(schedule_line.get_xdata()) == 50
        assert len(step_line.get_xdata()) == 2

    def test_missing_evaluation(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            emit_plots(str(tmp_path))
