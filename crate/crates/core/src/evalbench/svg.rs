//! Three-panel SVG export: input nodes with the reference tour, the
//! heat-map with edge opacity proportional to probability, and the
//! predicted tour.

use std::fmt::Write as _;
use std::path::Path;

use crate::geom::{Tour, TspInstance};
use crate::model::HeatMap;
use crate::{Error, Result};

const PANEL: f64 = 400.0;
const MARGIN: f64 = 20.0;
const LABEL_BAND: f64 = 24.0;

/// Edges fainter than this are not drawn at all.
const MIN_VISIBLE_PROB: f64 = 1.0 / 256.0;

struct Canvas {
    out: String,
}

impl Canvas {
    fn point(instance: &TspInstance, node: usize, panel: usize) -> (f64, f64) {
        let [x, y] = instance.point(node);
        let x0 = MARGIN + panel as f64 * (PANEL + MARGIN);
        // flip y so the unit square renders with the origin bottom-left
        (x0 + x * PANEL, LABEL_BAND + (1.0 - y) * PANEL)
    }

    fn label(&mut self, panel: usize, text: &str) {
        let x = MARGIN + panel as f64 * (PANEL + MARGIN);
        let _ = write!(
            self.out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"14\">{}</text>",
            x,
            LABEL_BAND - 8.0,
            text
        );
        self.out.push('\n');
    }

    fn tour_path(&mut self, instance: &TspInstance, tour: &Tour, panel: usize, color: &str) {
        let mut d = String::new();
        for (idx, &node) in tour.order().iter().enumerate() {
            let (x, y) = Self::point(instance, node, panel);
            let _ = write!(d, "{}{x:.2} {y:.2} ", if idx == 0 { "M" } else { "L" });
        }
        d.push('Z');
        let _ = write!(
            self.out,
            "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
        );
        self.out.push('\n');
    }

    fn heat_edges(&mut self, instance: &TspInstance, heatmap: &HeatMap, panel: usize) {
        let n = instance.n();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let p = heatmap.get(i, j);
                if p < MIN_VISIBLE_PROB {
                    continue;
                }
                let (x1, y1) = Self::point(instance, i, panel);
                let (x2, y2) = Self::point(instance, j, panel);
                let _ = write!(
                    self.out,
                    "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
                     stroke=\"#d62728\" stroke-width=\"1.2\" stroke-opacity=\"{p:.4}\"/>"
                );
                self.out.push('\n');
            }
        }
    }

    fn nodes(&mut self, instance: &TspInstance, panel: usize) {
        for node in 0..instance.n() {
            let (x, y) = Self::point(instance, node, panel);
            let _ = write!(
                self.out,
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"#000000\"/>"
            );
            self.out.push('\n');
        }
    }
}

/// Render the three-panel figure as an SVG string. Output depends only
/// on the inputs, so repeated renders are byte-identical.
pub fn render_figure(
    instance: &TspInstance,
    heatmap: &HeatMap,
    predicted: &Tour,
    optimal: &Tour,
) -> Result<String> {
    let n = instance.n();
    if heatmap.n() != n || predicted.n() != n || optimal.n() != n {
        return Err(Error::InvalidArgument(format!(
            "figure inputs disagree on n: instance {n}, heat-map {}, predicted {}, optimal {}",
            heatmap.n(),
            predicted.n(),
            optimal.n()
        )));
    }
    let width = 3.0 * PANEL + 4.0 * MARGIN;
    let height = PANEL + LABEL_BAND + MARGIN;
    let mut canvas = Canvas {
        out: format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
             viewBox=\"0 0 {width:.0} {height:.0}\">\n\
             <rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"#ffffff\"/>\n"
        ),
    };
    canvas.label(0, "input + reference tour");
    canvas.tour_path(instance, optimal, 0, "#7f7f7f");
    canvas.nodes(instance, 0);

    canvas.label(1, "edge probability heat-map");
    canvas.heat_edges(instance, heatmap, 1);
    canvas.nodes(instance, 1);

    canvas.label(2, "predicted tour");
    canvas.tour_path(instance, predicted, 2, "#1f77b4");
    canvas.nodes(instance, 2);

    canvas.out.push_str("</svg>\n");
    Ok(canvas.out)
}

/// Render and write the figure to `path`.
pub fn export_figure(
    instance: &TspInstance,
    heatmap: &HeatMap,
    predicted: &Tour,
    optimal: &Tour,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let svg = render_figure(instance, heatmap, predicted, optimal)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path.display().to_string(), e))
}
