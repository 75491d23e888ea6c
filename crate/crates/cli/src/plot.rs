//! Static SVG line plots read back from the CSV outputs.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("{0}: no data to plot")]
    Empty(String),
    #[error("{path}: {reason}")]
    Read { path: String, reason: String },
    #[error("drawing {path}: {reason}")]
    Draw { path: String, reason: String },
}

/// One SVG figure built from columns of a CSV file.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub title: String,
    pub x: String,
    pub x_label: String,
    pub y: Vec<String>,
    pub y_label: String,
    /// Split each `y` column into one curve per distinct value of this column.
    pub group: Option<String>,
    /// Keep only rows whose column equals the value.
    pub filter: Option<(String, f64)>,
    pub log_y: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn column(headers: &csv::StringRecord, name: &str, path: &str) -> Result<usize, PlotError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| PlotError::MissingColumn { path: path.into(), column: name.into() })
}

/// Extracts the series described by `spec` from a CSV file.
pub fn load_series(csv_path: &Path, spec: &PlotSpec) -> Result<Vec<Series>, PlotError> {
    let path = csv_path.display().to_string();
    let read_err = |e: csv::Error| PlotError::Read { path: path.clone(), reason: e.to_string() };
    let mut reader = csv::Reader::from_path(csv_path).map_err(read_err)?;
    let headers = reader.headers().map_err(read_err)?.clone();
    let xi = column(&headers, &spec.x, &path)?;
    let yi: Vec<usize> = spec.y.iter().map(|c| column(&headers, c, &path)).collect::<Result<_, _>>()?;
    let gi = spec.group.as_deref().map(|g| column(&headers, g, &path)).transpose()?;
    let fi = spec
        .filter
        .as_ref()
        .map(|(c, v)| column(&headers, c, &path).map(|i| (i, *v)))
        .transpose()?;

    let num = |s: &str| -> Result<f64, PlotError> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| PlotError::Read { path: path.clone(), reason: format!("not a number: `{s}`") })
    };
    // keyed by (group value bits, y column) so groups come out in numeric order
    let mut curves: BTreeMap<(i64, usize), Vec<(f64, f64)>> = BTreeMap::new();
    let mut group_values: BTreeMap<i64, f64> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(read_err)?;
        if let Some((i, v)) = fi {
            if num(&row[i])? != v {
                continue;
            }
        }
        let g = match gi {
            Some(i) => num(&row[i])?,
            None => 0.0,
        };
        let key = ordered_key(g);
        group_values.insert(key, g);
        let x = num(&row[xi])?;
        for (k, &c) in yi.iter().enumerate() {
            if row[c].is_empty() {
                continue;
            }
            let y = num(&row[c])?;
            if spec.log_y && !(y > 0.0) {
                continue;
            }
            curves.entry((key, k)).or_default().push((x, y));
        }
    }
    let series: Vec<Series> = curves
        .into_iter()
        .map(|((key, k), points)| {
            let label = match &spec.group {
                Some(g) => format!("{} ({g}={})", spec.y[k], group_values[&key]),
                None => spec.y[k].clone(),
            };
            Series { label, points }
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    if series.is_empty() {
        return Err(PlotError::Empty(path));
    }
    Ok(series)
}

/// Integer key with the same ordering as the float (for non-NaN values).
fn ordered_key(v: f64) -> i64 {
    let bits = v.to_bits() as i64;
    if bits < 0 {
        bits ^ i64::MAX
    } else {
        bits
    }
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(0, 0, 0),
    RGBColor(34, 139, 34),
    RGBColor(200, 30, 30),
    RGBColor(30, 80, 200),
    RGBColor(200, 120, 0),
    RGBColor(120, 40, 160),
];

pub fn draw(out: &Path, spec: &PlotSpec, series: &[Series]) -> Result<(), PlotError> {
    let path = out.display().to_string();
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(PlotError::Empty(path));
    }
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let pad = if y0 == 0.0 { 1.0 } else { 0.1 * y0.abs() };
        y0 -= pad;
        y1 += pad;
    }
    let draw_err = |e: String| PlotError::Draw { path: path.clone(), reason: e };
    let root = SVGBackend::new(out, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(e.to_string()))?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .caption(&spec.title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(70);

    macro_rules! render {
        ($chart:expr) => {{
            let mut chart = $chart;
            chart
                .configure_mesh()
                .x_desc(spec.x_label.as_str())
                .y_desc(spec.y_label.as_str())
                .draw()
                .map_err(|e| draw_err(e.to_string()))?;
            for (i, s) in series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                chart
                    .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                    .map_err(|e| draw_err(e.to_string()))?
                    .label(s.label.clone())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| draw_err(e.to_string()))?;
        }};
    }
    if spec.log_y {
        let chart = builder
            .build_cartesian_2d(x0..x1, (y0..y1).log_scale())
            .map_err(|e| draw_err(e.to_string()))?;
        render!(chart);
    } else {
        let chart = builder
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| draw_err(e.to_string()))?;
        render!(chart);
    }
    root.present().map_err(|e| draw_err(e.to_string()))?;
    Ok(())
}

/// Reads `csv_path` and writes the figure to `out`.
pub fn emit_plot(csv_path: &Path, spec: &PlotSpec, out: &Path) -> Result<(), PlotError> {
    let series = load_series(csv_path, spec)?;
    draw(out, spec, &series)
}
