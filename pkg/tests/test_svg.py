import numpy as np

from trialscope.svg import Series, histogram, line_plot, stacked_bars


def test_line_plot_deterministic_and_wellformed(tmp_path):
    x = np.linspace(0, 5, 50)
    series = [
        Series(x=x, y=np.exp(-x), label="a", band_low=np.exp(-x) * 0.9,
               band_high=np.exp(-x) * 1.1),
        Series(x=x, y=np.exp(-0.5 * x), label="b", dash="6,3"),
    ]
    p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
    line_plot(series, p1, title="t", xlabel="x", ylabel="y", vline=1.96)
    line_plot(series, p2, title="t", xlabel="x", ylabel="y", vline=1.96)
    body = p1.read_text()
    assert body == p2.read_text()
    assert body.startswith("<svg")
    assert body.rstrip().endswith("</svg>")
    assert "polyline" in body and "polygon" in body
    assert "stroke-dasharray" in body


def test_histogram_ignores_missing(tmp_path):
    p = tmp_path / "h.svg"
    histogram([0.1, 0.5, None, float("nan"), 0.9], p, bins=5, vline=0.05)
    t = p.read_text()
    assert t.count("<rect") >= 5


def test_stacked_bars_with_baseline(tmp_path):
    p = tmp_path / "s.svg"
    stacked_bars(
        ["g1", "g2"],
        [("lower", [0.1, 0.2], "#2a9d5c"), ("upper", [0.05, 0.1], "#999999")],
        p, title="bars", ylabel="share", baselines=[0.4, 0.45],
    )
    t = p.read_text()
    assert t.count("<rect") > 4
    assert "g1" in t and "upper" in t
