//! Error tables: one row per method, global / local / root errors at each horizon.

use serde::{Deserialize, Serialize};

use hiersoc_core::metrics::ErrorReport;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    #[serde(flatten)]
    pub report: ErrorReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn push(&mut self, method: impl Into<String>, report: ErrorReport) -> Result<()> {
        if let Some(first) = self.rows.first() {
            if first.report.horizons_ms != report.horizons_ms {
                return Err(Error::Config("all rows of a table must share one horizon grid".into()));
            }
        }
        self.rows.push(ReportRow {
            method: method.into(),
            report,
        });
        Ok(())
    }

    pub fn row(&self, method: &str) -> Option<&ErrorReport> {
        self.rows.iter().find(|r| r.method == method).map(|r| &r.report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    fn horizons(&self) -> &[u32] {
        self.rows.first().map_or(&[], |r| &r.report.horizons_ms)
    }

    /// `method,global_400,...,local_400,...,root_400,...`
    pub fn to_csv(&self) -> String {
        let h = self.horizons();
        let mut out = String::from("method");
        for metric in ["global", "local", "root"] {
            for ms in h {
                out.push_str(&format!(",{metric}_{ms}"));
            }
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.method);
            for v in r.report.global_mm.iter().chain(&r.report.local_mm).chain(&r.report.root_mm) {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width text rendering for terminals.
    pub fn render(&self) -> String {
        let h = self.horizons();
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let block = h.len() * 8;
        let mut out = format!("{:width$} | {:^block$} | {:^block$} | {:^block$}\n", "", "Global", "Local", "Root");
        out.push_str(&format!("{:width$}", "method"));
        for _ in 0..3 {
            out.push_str(" |");
            for ms in h {
                out.push_str(&format!("{ms:>8}"));
            }
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:width$}", r.method));
            for vals in [&r.report.global_mm, &r.report.local_mm, &r.report.root_mm] {
                out.push_str(" |");
                for v in vals {
                    out.push_str(&format!("{v:>8.1}"));
                }
            }
            out.push('\n');
        }
        out
    }
}
