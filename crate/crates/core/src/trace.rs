//! Per-iteration records of a run and their CSV form.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::solver::IterateState;

pub const CSV_HEADER: &str = "k,tau,train_g_f,train_g_psi,train_Q,test_g_f,test_g_psi,test_Q,\
dir_beta_norm,dir_theta_norm,exact_Q,exact_G,lyapunov_W";

/// Quantities of the single training sample drawn at an iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainMetrics {
    pub g_f: f64,
    pub g_psi: f64,
    pub q: f64,
}

/// Averages over a fixed held-out set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TestMetrics {
    pub mean_g_f: f64,
    pub mean_g_psi: f64,
    pub mean_q: f64,
    pub dir_beta_norm: f64,
    pub dir_theta_norm: f64,
}

/// Exact objective quantities, available for finite instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExactMetrics {
    pub q: f64,
    pub g: f64,
    pub lyapunov_w: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub k: u64,
    pub tau: f64,
    pub train: Option<TrainMetrics>,
    pub test: Option<TestMetrics>,
    pub exact: Option<ExactMetrics>,
}

impl TraceRecord {
    pub fn new(k: u64, tau: f64) -> Self {
        TraceRecord {
            k,
            tau,
            train: None,
            test: None,
            exact: None,
        }
    }

    /// Fails naming the first non-finite field.
    pub fn check_finite(&self) -> Result<()> {
        for (name, value) in self.fields() {
            if let Some(v) = value {
                if !v.is_finite() {
                    return Err(Error::numerical(name, format!("{v} at k = {}", self.k)));
                }
            }
        }
        Ok(())
    }

    /// The CSV columns after `k`, in header order.
    fn fields(&self) -> [(&'static str, Option<f64>); 12] {
        let train = self.train;
        let test = self.test;
        let exact = self.exact;
        [
            ("tau", Some(self.tau)),
            ("train_g_f", train.map(|t| t.g_f)),
            ("train_g_psi", train.map(|t| t.g_psi)),
            ("train_Q", train.map(|t| t.q)),
            ("test_g_f", test.map(|t| t.mean_g_f)),
            ("test_g_psi", test.map(|t| t.mean_g_psi)),
            ("test_Q", test.map(|t| t.mean_q)),
            ("dir_beta_norm", test.map(|t| t.dir_beta_norm)),
            ("dir_theta_norm", test.map(|t| t.dir_theta_norm)),
            ("exact_Q", exact.map(|e| e.q)),
            ("exact_G", exact.map(|e| e.g)),
            ("lyapunov_W", exact.and_then(|e| e.lyapunov_w)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub final_state: Option<IterateState>,
}

/// Shortest representation that parses back to the same `f64`.
fn push_float(out: &mut String, x: Option<f64>) {
    if let Some(x) = x {
        write!(out, "{x:?}").expect("writing to a String cannot fail");
    }
}

impl RunTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        let mut line = String::new();
        for rec in &self.records {
            line.clear();
            csv_row(&mut line, rec);
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

fn csv_row(line: &mut String, rec: &TraceRecord) {
    write!(line, "{}", rec.k).unwrap();
    for (_, cell) in rec.fields() {
        line.push(',');
        push_float(line, cell);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_empty_cells() {
        let mut rec = TraceRecord::new(3, 0.25);
        rec.train = Some(TrainMetrics {
            g_f: 1.0,
            g_psi: 0.5,
            q: 1e-20,
        });
        let trace = RunTrace {
            records: vec![rec, TraceRecord::new(4, 0.2)],
            final_state: None,
        };
        let csv = trace.to_csv_string();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[0].split(',').count(), 13);
        assert_eq!(lines[1], "3,0.25,1.0,0.5,1e-20,,,,,,,,");
        assert_eq!(lines[2], "4,0.2,,,,,,,,,,,");
    }

    #[test]
    fn header_matches_fields() {
        let names: Vec<_> = TraceRecord::new(0, 1.0)
            .fields()
            .iter()
            .map(|(n, _)| *n)
            .collect();
        assert_eq!(format!("k,{}", names.join(",")), CSV_HEADER);
    }

    #[test]
    fn non_finite_values_are_named() {
        let mut rec = TraceRecord::new(7, 0.5);
        assert!(rec.check_finite().is_ok());
        rec.exact = Some(ExactMetrics {
            q: 1.0,
            g: f64::INFINITY,
            lyapunov_w: None,
        });
        let err = rec.check_finite().unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("exact_G"), "{err}");
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1 + 0.2, 1.0 / 3.0, 6.02e23, -4.9e-324, 123456.789] {
            let mut s = String::new();
            push_float(&mut s, Some(x));
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }
}
