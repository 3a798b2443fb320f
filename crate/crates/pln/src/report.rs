//! Human-readable tables for evaluation and ablation results.

use std::fmt::Write;

use pln_core::eval::{relative_improvement, EvalReport, LengthBucket, RANK_MS, RANK_NS};
use serde::{Deserialize, Serialize};

pub fn eval_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "queries: {}", r.n_queries);
    let _ = write!(s, "{:<8}", "");
    for m in RANK_MS {
        let _ = write!(s, "{:>10}", format!("IoU={m}"));
    }
    s.push('\n');
    for n in RANK_NS {
        let _ = write!(s, "{:<8}", format!("R@{n}"));
        for m in RANK_MS {
            let _ = write!(s, "{:>10.2}", r.rank_at(n, m).unwrap_or(f64::NAN));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "mIoU    {:>10.2}", r.miou);
    s.push_str("\nlength bucket        count   R@1,IoU=0.5\n");
    for b in &r.buckets {
        let _ = writeln!(s, "{:<20} {:>5}   {}", bucket_label(b), b.count, fmt_opt(b.rank1_iou05));
    }
    s.push_str("\nmean top-k predicted length (s)\n");
    for (t, l) in r.topk_lengths.iter().enumerate() {
        let _ = writeln!(s, "stage {:<3} {:>10.3}", t + 1, l);
    }
    s
}

pub fn bucket_label(b: &LengthBucket) -> String {
    format!("({:.2}, {:.2}]", b.lo, b.hi)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.2}"))
}

/// One row of an ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub stages: Vec<usize>,
    pub cfm: bool,
    pub uc: bool,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "shared seed: {}", self.seed);
        let _ = writeln!(
            s,
            "{:<16} {:<10} {:>4} {:>4} {:>9} {:>9} {:>9} {:>9}",
            "variant", "stages", "cfm", "uc", "R@1,0.5", "R@5,0.5", "mIoU", "dmIoU%"
        );
        let base = self.rows.first().and_then(|r| r.report.as_ref()).map(|r| r.miou);
        for row in &self.rows {
            let stages = row
                .stages
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join("-");
            match (&row.report, &row.error) {
                (Some(r), _) => {
                    let delta = base
                        .filter(|b| *b > 0.0)
                        .map_or("-".to_string(), |b| format!("{:+.2}", 100.0 * (r.miou - b) / b));
                    let _ = writeln!(
                        s,
                        "{:<16} {:<10} {:>4} {:>4} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                        row.name,
                        stages,
                        yes_no(row.cfm),
                        yes_no(row.uc),
                        r.rank_at(1, 0.5).unwrap_or(f64::NAN),
                        r.rank_at(5, 0.5).unwrap_or(f64::NAN),
                        r.miou,
                        delta
                    );
                }
                (None, e) => {
                    let _ = writeln!(
                        s,
                        "{:<16} {:<10} failed: {}",
                        row.name,
                        stages,
                        e.as_deref().unwrap_or("unknown error")
                    );
                }
            }
        }
        s
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Side-by-side bucket table of two reports with relative improvement.
pub fn bucket_comparison(ours: &EvalReport, base: &EvalReport) -> String {
    let rel = relative_improvement(&ours.buckets, &base.buckets);
    let mut s = String::from("length bucket        count      ours      base   rel.impr%\n");
    for ((a, b), r) in ours.buckets.iter().zip(&base.buckets).zip(rel) {
        let _ = writeln!(
            s,
            "{:<20} {:>5} {:>9} {:>9} {:>11}",
            bucket_label(a),
            a.count,
            fmt_opt(a.rank1_iou05),
            fmt_opt(b.rank1_iou05),
            r.map_or_else(|| "absent".to_string(), |x| format!("{x:+.2}"))
        );
    }
    s
}
