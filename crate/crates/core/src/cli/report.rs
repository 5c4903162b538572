//! Markdown result tables: method rows, shot columns and relative-change rows.

use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Ece,
}

impl Metric {
    pub fn decimals(self) -> usize {
        match self {
            Metric::Accuracy => 1,
            Metric::Ece => 2,
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Accuracy)
    }

    /// Whether `candidate` beats `incumbent` under this metric's polarity.
    pub fn better(self, candidate: f64, incumbent: f64) -> bool {
        if self.higher_is_better() {
            candidate > incumbent
        } else {
            candidate < incumbent
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Accuracy => "ACC",
            Metric::Ece => "ECE",
        }
    }
}

/// Relative change of `value` against `baseline` in percent, e.g. `"6.8 ↑"`.
/// The arrow gives the direction of change; `→` marks a change that rounds to
/// zero at the metric's precision.
pub fn format_delta(metric: Metric, baseline: f64, value: f64) -> String {
    let places = metric.decimals();
    if baseline == 0.0 {
        return if value == 0.0 {
            format!("{:.*} →", places, 0.0)
        } else {
            "n/a".into()
        };
    }
    let relative = 100.0 * (value - baseline) / baseline.abs();
    let shown = format!("{:.*}", places, relative.abs());
    let is_zero = shown.chars().all(|c| c == '0' || c == '.');
    let arrow = if is_zero {
        "→"
    } else if relative > 0.0 {
        "↑"
    } else {
        "↓"
    };
    if is_zero {
        format!("{:.*} {arrow}", places, 0.0)
    } else {
        format!("{shown} {arrow}")
    }
}

pub fn format_value(metric: Metric, value: f64) -> String {
    format!("{:.*}", metric.decimals(), value)
}

/// Plain markdown table.
pub fn markdown_table(title: &str, header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "### {title}\n");
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", header.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out
}

/// Method rows (values in percent, `None` for missing cells) followed by one
/// `Δ%` row per non-baseline method. The first row is the baseline.
pub fn results_table(
    title: &str,
    metric: Metric,
    columns: &[String],
    methods: &[(String, Vec<Option<f64>>)],
) -> String {
    let mut header = vec!["Method".to_string()];
    header.extend(columns.iter().cloned());
    let mut rows: Vec<Vec<String>> = methods
        .iter()
        .map(|(name, values)| {
            let mut row = vec![name.clone()];
            row.extend(
                values
                    .iter()
                    .map(|v| v.map_or_else(|| "–".into(), |v| format_value(metric, v))),
            );
            row
        })
        .collect();
    if let Some((base_name, base)) = methods.first() {
        for (name, values) in &methods[1..] {
            let mut row = vec![format!("Δ% {name} vs {base_name}")];
            row.extend(base.iter().zip(values).map(|(b, v)| match (b, v) {
                (Some(b), Some(v)) => format_delta(metric, *b, *v),
                _ => "–".into(),
            }));
            rows.push(row);
        }
    }
    markdown_table(title, &header, &rows)
}
