//! Report emission: tab-separated files plus aligned console tables.

use std::io::Write;
use std::path::Path;

use crate::error::CliError;

/// A header row plus data rows, each cell already rendered. Numeric cells
/// use the default float formatting, which round-trips through parsing.
pub struct Report {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Writes the header line and one tab-separated line per row.
    pub fn write_tsv(&self, path: &Path) -> Result<(), CliError> {
        let mut file = std::fs::File::create(path)
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", path.display())))?;
        writeln!(file, "{}", self.header.join("\t"))?;
        for row in &self.rows {
            writeln!(file, "{}", row.join("\t"))?;
        }
        Ok(())
    }

    /// Prints the same content as a column-aligned table.
    pub fn print_aligned(&self) {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let render = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        println!("{}", render(&self.header).trim_end());
        for row in &self.rows {
            println!("{}", render(row).trim_end());
        }
    }
}

/// Metric column labels for a cutoff list: `recall@k...` then `ndcg@k...`.
pub fn metric_columns(ks: &[usize]) -> Vec<String> {
    let mut cols: Vec<String> = ks.iter().map(|k| format!("recall@{k}")).collect();
    cols.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    cols
}

/// Metric cells matching [`metric_columns`].
pub fn metric_cells(report: &ibrec::eval::RankingReport, ks: &[usize]) -> Vec<String> {
    let mut cells: Vec<String> = ks.iter().map(|k| report.recall[k].to_string()).collect();
    cells.extend(ks.iter().map(|k| report.ndcg[k].to_string()));
    cells
}
