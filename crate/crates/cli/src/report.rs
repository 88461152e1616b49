//! Accuracy tables written as CSV plus an aligned text rendering.
//!
//! Both renderings print the same cell strings, so the text table never
//! disagrees with the CSV.

use std::fmt::Write as _;
use std::path::Path;

/// Accuracy in percent with two decimals.
pub fn percent(accuracy: f64) -> String {
    format!("{:.2}", accuracy * 100.0)
}

/// A table with a row label column and optional grouped column headers.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub corner: String,
    /// `(group, columns)`; an empty group name means ungrouped.
    pub groups: Vec<(String, Vec<String>)>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl Table {
    fn columns(&self) -> Vec<String> {
        self.groups
            .iter()
            .flat_map(|(g, cols)| {
                cols.iter().map(move |c| if g.is_empty() { c.clone() } else { format!("{g}:{c}") })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = vec![self.corner.clone()];
        header.extend(self.columns());
        writeln!(out, "{}", header.join(",")).unwrap();
        for (label, cells) in &self.rows {
            writeln!(out, "{label},{}", cells.join(",")).unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let leaf: Vec<&String> = self.groups.iter().flat_map(|(_, c)| c).collect();
        let mut widths: Vec<usize> = leaf.iter().map(|c| c.len()).collect();
        for (_, cells) in &self.rows {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.len());
            }
        }
        // Widen a group's last column when its name is longer than the span.
        let mut at = 0;
        for (g, cols) in &self.groups {
            let span: usize = widths[at..at + cols.len()].iter().sum::<usize>() + 2 * (cols.len() - 1);
            if g.len() > span {
                widths[at + cols.len() - 1] += g.len() - span;
            }
            at += cols.len();
        }
        let first = self
            .rows
            .iter()
            .map(|(l, _)| l.len())
            .chain([self.corner.len()])
            .max()
            .unwrap_or(0);

        let mut out = String::new();
        writeln!(out, "{}", self.title).unwrap();
        if self.groups.iter().any(|(g, _)| !g.is_empty()) {
            let mut line = " ".repeat(first);
            let mut at = 0;
            for (g, cols) in &self.groups {
                let span: usize = widths[at..at + cols.len()].iter().sum::<usize>() + 2 * (cols.len() - 1);
                write!(line, "  {g:^span$}").unwrap();
                at += cols.len();
            }
            writeln!(out, "{}", line.trim_end()).unwrap();
        }
        let mut line = format!("{:<first$}", self.corner);
        for (c, w) in leaf.iter().zip(&widths) {
            write!(line, "  {c:>w$}").unwrap();
        }
        writeln!(out, "{line}").unwrap();
        for (label, cells) in &self.rows {
            let mut line = format!("{label:<first$}");
            for (c, w) in cells.iter().zip(&widths) {
                write!(line, "  {c:>w$}").unwrap();
            }
            writeln!(out, "{line}").unwrap();
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Table {
        Table {
            title: "Accuracy (%)".into(),
            corner: "classifier".into(),
            groups: vec![
                ("bp4d-like".into(), vec!["TR".into(), "TL".into()]),
                ("b".into(), vec!["TR".into(), "TL".into()]),
            ],
            rows: vec![
                ("RF".into(), vec!["99.70".into(), "100.00".into(), "9.50".into(), "0.00".into()]),
                ("SVM".into(), vec!["98.00".into(), "97.25".into(), "10.00".into(), "1.00".into()]),
            ],
        }
    }

    #[test]
    fn percent_rounds_to_two_places() {
        assert_eq!(percent(1.0), "100.00");
        assert_eq!(percent(0.99875), "99.88");
        assert_eq!(percent(0.0), "0.00");
    }

    #[test]
    fn csv_layout() {
        let csv = sample().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "classifier,bp4d-like:TR,bp4d-like:TL,b:TR,b:TL");
        assert_eq!(lines[1], "RF,99.70,100.00,9.50,0.00");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn text_cells_match_csv_cells() {
        let t = sample();
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Accuracy (%)");
        assert!(lines[1].contains("bp4d-like") && lines[1].contains('b'));
        for (i, (label, cells)) in t.rows.iter().enumerate() {
            let toks: Vec<&str> = lines[3 + i].split_whitespace().collect();
            assert_eq!(toks[0], label);
            assert_eq!(&toks[1..], cells.iter().map(String::as_str).collect::<Vec<_>>());
        }
        let widths: Vec<usize> = lines[2..].iter().map(|l| l.len()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{text}");
    }

    #[test]
    fn ungrouped_tables_have_one_header_line() {
        let t = Table {
            title: "t".into(),
            corner: "classifier".into(),
            groups: vec![(String::new(), vec!["synthetic".into()])],
            rows: vec![("SVM".into(), vec!["100.00".into()])],
        };
        assert_eq!(t.to_text(), "t\nclassifier  synthetic\nSVM            100.00\n");
        assert_eq!(t.to_csv(), "classifier,synthetic\nSVM,100.00\n");
    }
}
