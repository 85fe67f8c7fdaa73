//! Minimal self-contained SVG line charts with error bars, used by the
//! benchmark command to plot sweep results without external tooling.

use crate::error::{OpfaError, Result};

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 520.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 60.0;

/// One plotted line: `(x, y, ci)` triples where `ci` is the half-width of
/// the error bar around `y` (zero draws no bar).
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub color: String,
    pub points: Vec<(f64, f64, f64)>,
}

/// A small color palette for successive series.
pub fn palette(index: usize) -> &'static str {
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];
    COLORS[index % COLORS.len()]
}

/// Rounds a raw step to a pleasant 1/2/5 × 10^k value.
fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.abs().log10().floor());
    let unit = raw / mag;
    let nice = if unit <= 1.0 {
        1.0
    } else if unit <= 2.0 {
        2.0
    } else if unit <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn tick_values(min: f64, max: f64) -> Vec<f64> {
    let step = nice_step((max - min) / 5.0);
    let start = (min / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut v = start;
    while v <= max + step * 1e-9 {
        // snap tiny floating noise to zero so labels stay clean
        ticks.push(if v.abs() < step * 1e-9 { 0.0 } else { v });
        v += step;
    }
    ticks
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1e4 || a < 1e-3 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a line chart of the series to an SVG document string.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(OpfaError::InvalidInput(
            "a chart needs at least one series with at least one point".into(),
        ));
    }
    for s in series {
        for &(x, y, ci) in &s.points {
            if !x.is_finite() || !y.is_finite() || !ci.is_finite() || ci < 0.0 {
                return Err(OpfaError::NonFinite(format!(
                    "series '{}' holds a non-plottable point",
                    s.label
                )));
            }
        }
    }

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &(x, y, ci) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y - ci);
            y_max = y_max.max(y + ci);
        }
    }
    if x_max == x_min {
        let pad = x_min.abs().max(1.0) * 0.5;
        x_min -= pad;
        x_max += pad;
    }
    if y_max == y_min {
        let pad = y_min.abs().max(1.0) * 0.1;
        y_min -= pad;
        y_max += pad;
    } else {
        let pad = (y_max - y_min) * 0.06;
        y_min -= pad;
        y_max += pad;
    }

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| MARGIN_TOP + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"28\" font-size=\"18\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // axes and grid
    for v in tick_values(y_min, y_max) {
        let y = py(v);
        out.push_str(&format!(
            "<line x1=\"{MARGIN_LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            WIDTH - MARGIN_RIGHT
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            MARGIN_LEFT - 8.0,
            y + 4.0,
            format_tick(v)
        ));
    }
    for v in tick_values(x_min, x_max) {
        let x = px(v);
        out.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" \
             stroke=\"#eeeeee\" stroke-width=\"1\"/>\n",
            MARGIN_TOP,
            HEIGHT - MARGIN_BOTTOM
        ));
        out.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_BOTTOM + 20.0,
            format_tick(v)
        ));
    }
    out.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
         stroke=\"black\" stroke-width=\"1.5\"/>\n",
        HEIGHT - MARGIN_BOTTOM,
        WIDTH - MARGIN_RIGHT,
        HEIGHT - MARGIN_BOTTOM
    ));
    out.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" y2=\"{:.1}\" \
         stroke=\"black\" stroke-width=\"1.5\"/>\n",
        HEIGHT - MARGIN_BOTTOM
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"20\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\" \
         transform=\"rotate(-90 20 {:.1})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    ));

    // data
    for s in series {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y, _)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
            pts.join(" "),
            s.color
        ));
        for &(x, y, ci) in &s.points {
            let cx = px(x);
            out.push_str(&format!(
                "<circle cx=\"{cx:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{}\"/>\n",
                py(y),
                s.color
            ));
            if ci > 0.0 {
                let (top, bot) = (py(y + ci), py(y - ci));
                out.push_str(&format!(
                    "<line x1=\"{cx:.2}\" y1=\"{top:.2}\" x2=\"{cx:.2}\" y2=\"{bot:.2}\" \
                     stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                    s.color
                ));
                for yy in [top, bot] {
                    out.push_str(&format!(
                        "<line x1=\"{:.2}\" y1=\"{yy:.2}\" x2=\"{:.2}\" y2=\"{yy:.2}\" \
                         stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                        cx - 4.0,
                        cx + 4.0,
                        s.color
                    ));
                }
            }
        }
    }

    // legend
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN_TOP + 10.0 + i as f64 * 20.0;
        let x = WIDTH - MARGIN_RIGHT - 190.0;
        out.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"{}\" stroke-width=\"2.5\"/>\n",
            x + 26.0,
            s.color
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\">{}</text>\n",
            x + 34.0,
            y + 4.0,
            escape(&s.label)
        ));
    }

    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_series() -> Vec<Series> {
        vec![
            Series {
                label: "with shifts".into(),
                color: palette(0).into(),
                points: vec![(0.0, 1.0, 0.1), (1.0, 0.8, 0.05), (2.0, 0.5, 0.08)],
            },
            Series {
                label: "baseline".into(),
                color: palette(1).into(),
                points: vec![(0.0, 1.1, 0.1), (1.0, 1.2, 0.1), (2.0, 1.4, 0.12)],
            },
        ]
    }

    #[test]
    fn renders_complete_document_with_labels() {
        let svg = line_chart("Recovery sweep", "delay variance", "error", &sample_series())
            .unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("Recovery sweep"));
        assert!(svg.contains("delay variance"));
        assert!(svg.contains("with shifts"));
        assert!(svg.contains("baseline"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn handles_single_point_and_flat_series() {
        let s = vec![Series {
            label: "flat".into(),
            color: palette(2).into(),
            points: vec![(1.0, 2.0, 0.0)],
        }];
        let svg = line_chart("t", "x", "y", &s).unwrap();
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("NaN"));

        let flat = vec![Series {
            label: "flat".into(),
            color: palette(2).into(),
            points: vec![(0.0, 3.0, 0.0), (1.0, 3.0, 0.0)],
        }];
        assert!(line_chart("t", "x", "y", &flat).is_ok());
    }

    #[test]
    fn escapes_markup_in_labels() {
        let s = vec![Series {
            label: "a<b & c".into(),
            color: palette(0).into(),
            points: vec![(0.0, 1.0, 0.0)],
        }];
        let svg = line_chart("t", "x", "y", &s).unwrap();
        assert!(svg.contains("a&lt;b &amp; c"));
    }

    #[test]
    fn rejects_empty_or_nonfinite_input() {
        assert!(line_chart("t", "x", "y", &[]).is_err());
        let bad = vec![Series {
            label: "bad".into(),
            color: palette(0).into(),
            points: vec![(0.0, f64::NAN, 0.0)],
        }];
        assert!(line_chart("t", "x", "y", &bad).is_err());
    }
}
