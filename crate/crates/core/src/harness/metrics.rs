//! CSV export of training histories and evaluation tables.

use std::path::Path;

use crate::engine::MetricsRow;

/// `%g`-style formatting with 6 significant digits.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}"))
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn header(reward_ids: &[String]) -> Vec<String> {
    let mut ids = reward_ids.to_vec();
    ids.sort();
    let mut cols = vec!["iteration".to_string()];
    for id in &ids {
        cols.push(format!("{id}_mean"));
        cols.push(format!("{id}_std"));
    }
    cols.extend(["loss", "ratio_dev", "clip_frac", "rm_calls", "seconds"].map(String::from));
    cols
}

/// Renders `rows`; reward columns follow the ids of the first row.
pub fn history_csv(rows: &[MetricsRow]) -> String {
    let ids: Vec<String> = rows.first().map(|r| r.rewards.keys().cloned().collect()).unwrap_or_default();
    let mut out = header(&ids).join(",");
    out.push('\n');
    for r in rows {
        let mut cells = vec![r.iteration.to_string()];
        for id in &ids {
            let s = r.rewards.get(id).copied();
            cells.push(s.map_or_else(|| "nan".into(), |s| format_g6(s.mean)));
            cells.push(s.map_or_else(|| "nan".into(), |s| format_g6(s.std)));
        }
        cells.push(format_g6(r.loss));
        cells.push(format_g6(r.ratio_dev));
        cells.push(format_g6(r.clip_frac));
        cells.push(r.rm_calls.to_string());
        cells.push(format_g6(r.seconds));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_history(rows: &[MetricsRow], path: &Path) -> std::io::Result<()> {
    if rows.is_empty() {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty metrics history"));
    }
    std::fs::write(path, history_csv(rows))
}

/// A parsed numeric CSV: header plus rows of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn parse_csv(text: &str) -> Result<Table, String> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().ok_or("empty csv")?.split(',').map(String::from).collect();
    let rows = lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<f64> = line
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|_| format!("line {}: bad number `{c}`", i + 2)))
                .collect::<Result<_, _>>()?;
            if cells.len() != header.len() {
                return Err(format!("line {}: {} cells for {} columns", i + 2, cells.len(), header.len()));
            }
            Ok(cells)
        })
        .collect::<Result<_, String>>()?;
    Ok(Table { header, rows })
}
