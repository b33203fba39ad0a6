use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::geometry::{ElementClass, Polyline, VectorMap};

use super::{io_err, PipelineError};

type Result<T> = std::result::Result<T, PipelineError>;

const PX_PER_M: f64 = 24.0;
const MARGIN_PX: f64 = 20.0;
const LEGEND_PX: f64 = 46.0;

fn class_color(class: ElementClass) -> &'static str {
    match class {
        ElementClass::Crossing => "#e4572e",
        ElementClass::Divider => "#1f77b4",
        ElementClass::Boundary => "#2ca02c",
    }
}

struct Canvas {
    body: String,
    extent: (f64, f64),
}

impl Canvas {
    // map coordinates (y up) to SVG pixels (y down)
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (
            MARGIN_PX + x * PX_PER_M,
            MARGIN_PX + (self.extent.1 - y) * PX_PER_M,
        )
    }

    fn path(&mut self, poly: &Polyline, color: &str, dashed: bool, width: f64) {
        let mut d = String::new();
        for (i, v) in poly.vertices().iter().enumerate() {
            let (x, y) = self.px(v.x, v.y);
            let _ = write!(d, "{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" });
        }
        if poly.closed() {
            d.push('Z');
        }
        let dash = if dashed {
            " stroke-dasharray=\"7 4\""
        } else {
            ""
        };
        let _ = writeln!(
            self.body,
            "  <path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width:.2}\"{dash}/>",
            d.trim_end()
        );
    }

    /// Triangle marking the direction at the polyline's final segment.
    fn arrowhead(&mut self, poly: &Polyline, color: &str) {
        let verts = poly.vertices();
        let tip = verts[verts.len() - 1];
        let prev = verts[verts.len() - 2];
        let (mut ux, mut uy) = (tip.x - prev.x, tip.y - prev.y);
        let norm = (ux * ux + uy * uy).sqrt().max(1e-9);
        ux /= norm;
        uy /= norm;
        let (nx, ny) = (-uy, ux);
        let size = 0.45; // meters
        let pts = [
            (tip.x, tip.y),
            (tip.x - size * ux + 0.5 * size * nx, tip.y - size * uy + 0.5 * size * ny),
            (tip.x - size * ux - 0.5 * size * nx, tip.y - size * uy - 0.5 * size * ny),
        ];
        let mut d = String::new();
        for (x, y) in pts {
            let (px, py) = self.px(x, y);
            let _ = write!(d, "{px:.2},{py:.2} ");
        }
        let _ = writeln!(
            self.body,
            "  <polygon points=\"{}\" fill=\"{color}\"/>",
            d.trim_end()
        );
    }
}

/// Render ground truth (dashed) and/or predictions (solid) into one
/// deterministic SVG with per-class colors, direction arrowheads, an
/// extent frame and a legend.
pub fn render_svg(
    gt: Option<&VectorMap>,
    predictions: Option<&VectorMap>,
    extent_m: (f64, f64),
    out_path: &Path,
) -> Result<()> {
    let width_px = extent_m.0 * PX_PER_M + 2.0 * MARGIN_PX;
    let height_px = extent_m.1 * PX_PER_M + 2.0 * MARGIN_PX + LEGEND_PX;
    let mut canvas = Canvas {
        body: String::new(),
        extent: extent_m,
    };

    let _ = writeln!(
        canvas.body,
        "  <rect x=\"{MARGIN_PX:.2}\" y=\"{MARGIN_PX:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#fcfcfa\" stroke=\"#444444\" stroke-width=\"1\"/>",
        extent_m.0 * PX_PER_M,
        extent_m.1 * PX_PER_M
    );
    if let Some(map) = gt {
        for el in &map.elements {
            canvas.path(&el.poly, class_color(el.class), true, 2.0);
            if !el.poly.closed() {
                canvas.arrowhead(&el.poly, class_color(el.class));
            }
        }
    }
    if let Some(map) = predictions {
        for el in &map.elements {
            canvas.path(&el.poly, class_color(el.class), false, 2.6);
            if !el.poly.closed() {
                canvas.arrowhead(&el.poly, class_color(el.class));
            }
        }
    }

    // legend strip below the frame
    let legend_y = extent_m.1 * PX_PER_M + 2.0 * MARGIN_PX + 16.0;
    let mut x = MARGIN_PX;
    for class in ElementClass::ALL {
        let _ = writeln!(
            canvas.body,
            "  <rect x=\"{x:.2}\" y=\"{:.2}\" width=\"14\" height=\"14\" fill=\"{}\"/>",
            legend_y - 11.0,
            class_color(class)
        );
        let _ = writeln!(
            canvas.body,
            "  <text x=\"{:.2}\" y=\"{legend_y:.2}\" font-family=\"monospace\" font-size=\"12\">{}</text>",
            x + 18.0,
            class.short_name()
        );
        x += 110.0;
    }
    let _ = writeln!(
        canvas.body,
        "  <text x=\"{x:.2}\" y=\"{legend_y:.2}\" font-family=\"monospace\" font-size=\"12\">dashed = ground truth, solid = prediction</text>"
    );

    let svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width_px:.2} {height_px:.2}\" width=\"{width_px:.2}\" height=\"{height_px:.2}\">\n{}</svg>\n",
        canvas.body
    );
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    fs::write(out_path, svg).map_err(|e| io_err(out_path, e))?;
    Ok(())
}
