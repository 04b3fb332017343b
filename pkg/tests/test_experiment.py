from artfit.experiment import compare_selection


def test_comparison_runs_and_reports_sizes(quad):
    r = compare_selection(quad, seed=0, pool_size=60, n_eval=10, keep_fraction=0.5)
    assert r.all_records.n_train == 60 and r.selected.n_train == 30
    assert r.all_records.n_eval == r.selected.n_eval == 10
    assert 0.0 <= r.selected.auc <= 100.0
