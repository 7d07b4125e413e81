use std::collections::BTreeMap;

use crate::data::{Finding, MetadataRecord};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BalanceReport {
    pub records: usize,
    /// Images carrying each finding, in vocabulary order; every finding is listed.
    pub counts: Vec<(Finding, usize)>,
    /// `counts / records`, zero for an empty input.
    pub fractions: Vec<(Finding, f64)>,
    pub no_finding_fraction: f64,
    /// Images per unordered pair of co-occurring findings.
    pub co_occurrence: BTreeMap<(Finding, Finding), usize>,
}

impl BalanceReport {
    pub fn count(&self, finding: Finding) -> usize {
        self.counts.iter().find(|(f, _)| *f == finding).map_or(0, |(_, n)| *n)
    }

    /// CSV with one row per finding, then one per co-occurring pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("finding,count,fraction\n");
        for ((f, n), (_, frac)) in self.counts.iter().zip(&self.fractions) {
            out.push_str(&format!("{},{n},{frac:.4}\n", f.label()));
        }
        for ((a, b), n) in &self.co_occurrence {
            out.push_str(&format!("{}|{},{n},\n", a.label(), b.label()));
        }
        out
    }
}

pub fn class_balance_report(records: &[MetadataRecord]) -> BalanceReport {
    let mut counts: BTreeMap<Finding, usize> = Finding::ALL.iter().map(|f| (*f, 0)).collect();
    let mut co_occurrence = BTreeMap::new();
    for r in records {
        let mut findings = r.findings.clone();
        findings.sort();
        findings.dedup();
        for (i, f) in findings.iter().enumerate() {
            *counts.entry(*f).or_default() += 1;
            for g in &findings[i + 1..] {
                *co_occurrence.entry((*f, *g)).or_default() += 1;
            }
        }
    }
    let total = records.len();
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    let counts: Vec<(Finding, usize)> = Finding::ALL.iter().map(|f| (*f, counts[f])).collect();
    BalanceReport {
        records: total,
        fractions: counts.iter().map(|(f, n)| (*f, frac(*n))).collect(),
        no_finding_fraction: frac(counts.iter().find(|(f, _)| *f == Finding::NoFinding).map_or(0, |c| c.1)),
        counts,
        co_occurrence,
    }
}
