//! Markdown summary plus SVG renderings of the tabular outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use timeuse_core::record::write_atomic;
use timeuse_core::{Error, Result};

const PALETTE: [&str; 6] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"];
const MAX_TABLE_ROWS: usize = 20;

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv(e).context(format!("reading {}", path.display())))?;
        let header = rdr.headers()?.iter().map(String::from).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn num(&self, row: usize, col: usize) -> Option<f64> {
        self.rows[row].get(col).and_then(|c| c.parse().ok())
    }

    fn markdown(&self) -> String {
        let mut s = format!("| {} |\n|{}\n", self.header.join(" | "), "---|".repeat(self.header.len()));
        for row in self.rows.iter().take(MAX_TABLE_ROWS) {
            let cells: Vec<String> = row.iter().map(|c| short(c)).collect();
            let _ = writeln!(s, "| {} |", cells.join(" | "));
        }
        if self.rows.len() > MAX_TABLE_ROWS {
            let _ = writeln!(s, "\n_{} more rows not shown._", self.rows.len() - MAX_TABLE_ROWS);
        }
        s
    }
}

/// Trims long float renderings for display.
fn short(cell: &str) -> String {
    match cell.parse::<f64>() {
        Ok(v) if cell.contains('.') || cell.contains('e') => {
            if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e6) {
                format!("{v:.3e}")
            } else {
                format!("{v:.4}")
            }
        }
        _ => cell.to_string(),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Diverging blue-white-red over [-1, 1].
fn diverging(v: f64) -> String {
    let t = v.clamp(-1.0, 1.0);
    let (r, g, b) = if t >= 0.0 {
        (255.0, 255.0 - 155.0 * t, 255.0 - 155.0 * t)
    } else {
        (255.0 + 155.0 * t, 255.0 + 155.0 * t, 255.0)
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

pub fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<Option<f64>>]) -> String {
    let (cw, ch, left, top) = (110.0, 30.0, 170.0, 70.0);
    let width = left + cw * cols.len() as f64 + 20.0;
    let height = top + ch * rows.len() as f64 + 20.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<text x=\"10\" y=\"22\" font-size=\"15\">{}</text>", escape(title));
    for (j, c) in cols.iter().enumerate() {
        let x = left + cw * (j as f64 + 0.5);
        let _ = writeln!(s, "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>", top - 10.0, escape(c));
    }
    for (i, r) in rows.iter().enumerate() {
        let y = top + ch * i as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", left - 8.0, y + ch * 0.65, escape(r));
        for j in 0..cols.len() {
            let x = left + cw * j as f64;
            let v = values.get(i).and_then(|row| row.get(j)).copied().flatten();
            let (fill, label) = match v {
                Some(v) => (diverging(v), format!("{v:.3}")),
                None => ("#dddddd".to_string(), "n/a".to_string()),
            };
            let _ = writeln!(s, "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"{fill}\" stroke=\"#ffffff\"/>");
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>", x + cw / 2.0, y + ch * 0.65);
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn grouped_bars(title: &str, groups: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let (left, top, plot_h, bottom) = (70.0, 60.0, 260.0, 110.0);
    let bar_w = 16.0;
    let group_w = bar_w * series.len().max(1) as f64 + 14.0;
    let width = (left + group_w * groups.len() as f64 + 20.0).max(360.0);
    let height = top + plot_h + bottom;
    let vals = series.iter().flat_map(|(_, v)| v.iter().flatten().copied());
    let (mut lo, mut hi) = vals.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo <= 0.0 {
        hi = 1.0;
        lo = lo.min(0.0);
    }
    let y = |v: f64| top + plot_h * (hi - v) / (hi - lo);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<text x=\"10\" y=\"20\" font-size=\"15\">{}</text>", escape(title));
    for (k, (name, _)) in series.iter().enumerate() {
        let x = left + 130.0 * k as f64;
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"30\" width=\"10\" height=\"10\" fill=\"{}\"/>", PALETTE[k % PALETTE.len()]);
        let _ = writeln!(s, "<text x=\"{}\" y=\"39\">{}</text>", x + 14.0, escape(name));
    }
    for t in 0..=4 {
        let v = lo + (hi - lo) * f64::from(t) / 4.0;
        let (x2, yv, lx) = (width - 10.0, y(v), left - 5.0);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" x2=\"{x2}\" y1=\"{yv:.2}\" y2=\"{yv:.2}\" stroke=\"#eeeeee\"/><text x=\"{lx}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            yv + 4.0,
            short(&format!("{v:.6}")),
        );
    }
    for (g, label) in groups.iter().enumerate() {
        let gx = left + group_w * g as f64 + 7.0;
        for (k, (_, vals)) in series.iter().enumerate() {
            if let Some(Some(v)) = vals.get(g) {
                let (y0, y1) = (y(v.max(0.0)), y(v.min(0.0)));
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.2}\" y=\"{y0:.2}\" width=\"{bar_w}\" height=\"{:.2}\" fill=\"{}\"/>",
                    gx + bar_w * k as f64,
                    (y1 - y0).max(0.5),
                    PALETTE[k % PALETTE.len()]
                );
            }
        }
        let lx = gx + bar_w * series.len() as f64 / 2.0;
        let ly = top + plot_h + 14.0;
        let _ = writeln!(
            s,
            "<text x=\"{lx:.2}\" y=\"{ly}\" text-anchor=\"end\" transform=\"rotate(-35 {lx:.2} {ly})\">{}</text>",
            escape(label)
        );
    }
    let (x2, y0) = (width - 10.0, y(0.0));
    let _ = writeln!(s, "<line x1=\"{left}\" x2=\"{x2}\" y1=\"{y0:.2}\" y2=\"{y0:.2}\" stroke=\"#333333\"/>");
    s.push_str("</svg>\n");
    s
}

fn series(t: &Table, cols: &[usize]) -> Vec<(String, Vec<Option<f64>>)> {
    cols.iter().map(|&c| (t.header[c].clone(), (0..t.rows.len()).map(|r| t.num(r, c)).collect())).collect()
}

fn first_col(t: &Table) -> Vec<String> {
    t.rows.iter().map(|r| r.first().cloned().unwrap_or_default()).collect()
}

/// Picks a chart for the tables we know how to draw.
fn chart(file: &str, t: &Table) -> Option<String> {
    if t.rows.is_empty() {
        return None;
    }
    match file {
        "cosine_matrix.csv" => {
            let cols = t.header[1..].to_vec();
            let values: Vec<Vec<Option<f64>>> = (0..t.rows.len()).map(|r| (1..t.header.len()).map(|c| t.num(r, c)).collect()).collect();
            Some(heatmap("Activity-level cosine similarity to the human fit", &first_col(t), &cols, &values))
        }
        "model_divergence.csv" => {
            let cols: Vec<usize> = ["m_leisure", "m_work", "m_sleep_personal"].iter().filter_map(|c| t.col(c)).collect();
            Some(grouped_bars("Divergence from the human fit by activity", &first_col(t), &series(t, &cols)))
        }
        "drift_table.csv" => {
            let cols: Vec<usize> = (0..t.header.len()).filter(|&c| t.header[c].starts_with("mad_")).collect();
            Some(grouped_bars("Parameter drift (MAD) under covariate shifts", &first_col(t), &series(t, &cols)))
        }
        "mitigation.csv" => {
            let cols: Vec<usize> = ["cosine_before", "cosine_after"].iter().filter_map(|c| t.col(c)).collect();
            Some(grouped_bars("Attribute cosine before and after augmentation", &first_col(t), &series(t, &cols)))
        }
        "attribute_divergence.csv" => {
            let (a, f, v) = (t.col("activity")?, t.col("feature")?, t.col("a_f")?);
            let n = t.rows.len().min(12);
            let groups: Vec<String> = t.rows[..n].iter().map(|r| format!("{}/{}", r[a], r[f])).collect();
            let vals = vec![("a_f".to_string(), (0..n).map(|r| t.num(r, v)).collect())];
            Some(grouped_bars("Largest attribute divergences", &groups, &vals))
        }
        _ => None,
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn run(inputs: &[PathBuf], out: &Path) -> Result<BTreeMap<String, Value>> {
    let mut md = String::from("# Run summary\n");
    let mut charts = Vec::new();
    for (i, dir) in inputs.iter().enumerate() {
        if !dir.is_dir() {
            return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
        }
        let label = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string();
        let _ = writeln!(md, "\n## {label}\n");
        if let Ok(bytes) = fs::read(dir.join(crate::commands::RUN_CONFIG_FILE)) {
            if let Ok(cfg) = serde_json::from_slice::<Value>(&bytes) {
                let cmd = cfg.get("command").and_then(Value::as_str).unwrap_or("?");
                let version = cfg.get("version").and_then(Value::as_str).unwrap_or("?");
                let _ = writeln!(md, "Command `{cmd}`, tool version {version}.\n");
            }
        }
        if let Ok(bytes) = fs::read(dir.join("recovery.json")) {
            if let Some(mad) = serde_json::from_slice::<Value>(&bytes).ok().and_then(|v| v.get("mad").and_then(Value::as_f64)) {
                let _ = writeln!(md, "Recovery MAD against the supplied truth: {mad:.3e}.\n");
            }
        }
        if let Ok(bytes) = fs::read(dir.join("funnel.json")) {
            if let Ok(v) = serde_json::from_slice::<Value>(&bytes) {
                let _ = writeln!(md, "Cleaning funnel: {} raw rows, {} accepted.\n", v["raw"], v["accepted"]);
            }
        }
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "csv")
                    && !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.') || n == "records.csv")
            })
            .collect();
        files.sort();
        for path in files {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let table = Table::read(&path)?;
            let _ = writeln!(md, "### {name}\n");
            if let Some(svg) = chart(&name, &table) {
                let stem = name.trim_end_matches(".csv");
                let svg_name = format!("{i:02}-{}-{stem}.svg", sanitize(&label));
                write_atomic(&out.join(&svg_name), svg.as_bytes())?;
                let _ = writeln!(md, "![{stem}]({svg_name})\n");
                charts.push(svg_name);
            }
            md.push_str(&table.markdown());
        }
    }
    write_atomic(&out.join("summary.md"), md.as_bytes())?;
    println!("wrote summary.md and {} charts", charts.len());
    Ok(BTreeMap::from([("charts".into(), json!(charts))]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_has_one_cell_per_value() {
        let svg = heatmap("t", &["a".into(), "b".into()], &["x".into(), "y".into(), "z".into()], &[vec![Some(1.0), Some(-1.0), None], vec![Some(0.0); 3]]);
        assert_eq!(svg.matches("<rect").count(), 6);
        assert!(svg.contains("n/a"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn bars_skip_missing_values() {
        let svg = grouped_bars("t", &["g1".into(), "g2".into()], &[("s".into(), vec![Some(0.5), None])]);
        // One legend swatch plus one bar.
        assert_eq!(svg.matches("<rect").count(), 2);
    }

    #[test]
    fn diverging_endpoints() {
        assert_eq!(diverging(0.0), "#ffffff");
        assert_eq!(diverging(1.0), "#ff6464");
        assert_eq!(diverging(-1.0), "#6464ff");
    }

    #[test]
    fn labels_are_escaped() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }
}
