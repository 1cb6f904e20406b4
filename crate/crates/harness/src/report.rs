use std::collections::BTreeMap;
use std::fmt;

use crate::records::RunRecord;

/// Final-step statistics for one (variant, gamma pair, N) group.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub gamma1: f64,
    pub gamma2: f64,
    pub n_members: usize,
    pub runs: usize,
    pub final_t: usize,
    pub rms_mean_err: f64,
    pub mean_cov_err: f64,
    pub max_ct_residual: f64,
    pub max_rhs_residual: f64,
    pub rms_truth: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub records: usize,
    pub rows: Vec<SummaryRow>,
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Groups runs and reduces each to its final time step; residual maxima
/// cover every step.
pub fn summarize(records: &[RunRecord]) -> Summary {
    let mut runs: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        runs.entry(r.run_id.as_str()).or_default().push(r);
    }
    type Key = (String, u64, u64, usize);
    let mut groups: BTreeMap<Key, Vec<Vec<&RunRecord>>> = BTreeMap::new();
    for rows in runs.into_values() {
        let first = rows[0];
        let key = (first.variant.clone(), first.gamma1.to_bits(), first.gamma2.to_bits(), first.n_members);
        groups.entry(key).or_default().push(rows);
    }
    let rows = groups
        .into_values()
        .map(|runs| {
            let finals: Vec<&RunRecord> = runs
                .iter()
                .map(|rows| *rows.iter().max_by_key(|r| r.t).unwrap())
                .collect();
            let all = runs.iter().flatten();
            let first = finals[0];
            SummaryRow {
                variant: first.variant.clone(),
                gamma1: first.gamma1,
                gamma2: first.gamma2,
                n_members: first.n_members,
                runs: runs.len(),
                final_t: finals.iter().map(|r| r.t).max().unwrap_or(0),
                rms_mean_err: rms(&finals.iter().map(|r| r.mean_err).collect::<Vec<_>>()),
                mean_cov_err: finals.iter().map(|r| r.cov_err).sum::<f64>() / finals.len() as f64,
                max_ct_residual: all.clone().map(|r| r.ct_residual).fold(0.0, f64::max),
                max_rhs_residual: all.map(|r| r.rhs_residual).fold(0.0, f64::max),
                rms_truth: rms(&finals.iter().map(|r| r.rmse_truth).collect::<Vec<_>>()),
            }
        })
        .collect();
    Summary {
        records: records.len(),
        rows,
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>6} {:>6} {:>7} {:>5} {:>4} {:>11} {:>11} {:>11} {:>11} {:>11}",
            "variant", "g1", "g2", "N", "runs", "T", "mean_err", "cov_err", "ct_res", "rhs_res", "rmse_truth"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<24} {:>6.3} {:>6.3} {:>7} {:>5} {:>4} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e}",
                r.variant,
                r.gamma1,
                r.gamma2,
                r.n_members,
                r.runs,
                r.final_t,
                r.rms_mean_err,
                r.mean_cov_err,
                r.max_ct_residual,
                r.max_rhs_residual,
                r.rms_truth
            )?;
        }
        write!(f, "{} records in {} groups", self.records, self.rows.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(run: &str, t: usize, n: usize, mean_err: f64) -> RunRecord {
        RunRecord {
            run_id: run.into(),
            t,
            variant: "stochastic-oracle".into(),
            gamma1: 1.0,
            gamma2: 1.0,
            n_members: n,
            seed: 1,
            mean_err,
            cov_err: 0.5,
            ct_residual: t as f64,
            rhs_residual: 0.0,
            rmse_truth: 1.0,
        }
    }

    #[test]
    fn groups_by_size_and_reduces_final_step() {
        let records = vec![
            rec("a", 0, 10, 9.0),
            rec("a", 1, 10, 3.0),
            rec("b", 0, 10, 9.0),
            rec("b", 1, 10, 4.0),
            rec("c", 0, 20, 1.0),
        ];
        let s = summarize(&records);
        assert_eq!(s.rows.len(), 2);
        let r = &s.rows[0];
        assert_eq!((r.n_members, r.runs, r.final_t), (10, 2, 1));
        assert!((r.rms_mean_err - (12.5f64).sqrt()).abs() < 1e-15);
        assert_eq!(r.max_ct_residual, 1.0);
        assert!(s.to_string().ends_with("5 records in 2 groups"));
    }

    #[test]
    fn empty_summary() {
        let s = summarize(&[]);
        assert!(s.rows.is_empty());
    }
}
