//! Aggregation of the per-pipeline JSON reports in an output directory.

use contact_core::hierarchy::{bound_ledger, default_ledger_constant, BoundLedger};
use serde::Serialize;
use serde_json::Value;

use crate::output::{Artifacts, Check};
use crate::CliError;

/// Report files looked for, in display order.
pub const REPORT_FILES: [&str; 5] = [
    "validate_report.json",
    "simulate_report.json",
    "transience_report.json",
    "heatkernel_report.json",
    "hierarchy_report.json",
];

#[derive(Debug, Serialize)]
pub struct ReportRow {
    pub module: String,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    /// `"pass"`, `"fail"` or `"empty"`.
    pub overall: String,
    pub modules: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub q_hat: Option<f64>,
    pub ledger: Option<BoundLedger>,
}

impl Summary {
    pub fn passes(&self) -> bool {
        self.overall != "fail"
    }
}

/// Builds the summary from already-parsed reports `(file, json)`.
pub fn summarize(reports: &[(String, Value)]) -> Summary {
    let mut rows = Vec::new();
    let mut modules = Vec::new();
    let mut q_hat = None;
    let mut stationary = None;
    for (_, v) in reports {
        let module = v["module"].as_str().unwrap_or("unknown").to_string();
        if let Ok(checks) = serde_json::from_value::<Vec<Check>>(v["checks"].clone()) {
            for c in checks {
                rows.push(ReportRow {
                    module: module.clone(),
                    check: c.name,
                    passed: c.passed,
                    detail: c.detail,
                });
            }
        }
        if module == "transience" {
            q_hat = v["details"]["q_hat"].as_f64();
        }
        if module == "hierarchy" && v["details"]["stationary"]["converged"].as_bool() == Some(true) {
            stationary = Some(v["details"]["stationary"].clone());
        }
        modules.push(module);
    }
    let ledger = match (q_hat, &stationary) {
        (Some(q), Some(st)) if q > 0.0 => {
            let rho = st["rho"].as_f64().unwrap_or(0.0);
            let mut observed = vec![(1, st["sup_k1"].as_f64().unwrap_or(f64::NAN))];
            if let Some(k2) = st["sup_k2"].as_f64() {
                observed.push((2, k2));
            }
            let d = default_ledger_constant(q, rho.max(f64::MIN_POSITIVE), 4);
            bound_ledger(q, d, 4, &observed).ok()
        }
        _ => None,
    };
    if let Some(l) = &ledger {
        rows.push(ReportRow {
            module: "ledger".into(),
            check: "bounds".into(),
            passed: l.all_within,
            detail: format!("K_n = D Q^n (n!)² with Q = {:.4}, D = {:.4}", l.q, l.d),
        });
    }
    let overall = if rows.is_empty() && modules.is_empty() {
        "empty"
    } else if rows.iter().all(|r| r.passed) {
        "pass"
    } else {
        "fail"
    };
    Summary {
        overall: overall.to_string(),
        modules,
        rows,
        q_hat,
        ledger,
    }
}

pub fn render(summary: &Summary) -> String {
    let mut s = String::new();
    if summary.overall == "empty" {
        s.push_str("no reports found\n");
        return s;
    }
    for r in &summary.rows {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{mark}  {:<11} {:<24} {}\n", r.module, r.check, r.detail));
    }
    if let Some(q) = summary.q_hat {
        s.push_str(&format!("Q_hat = {q:.6}\n"));
    }
    if let Some(l) = &summary.ledger {
        for row in &l.rows {
            s.push_str(&format!("K_{} = {:.6}\n", row.n, row.bound));
        }
    }
    s.push_str(&format!("overall: {}\n", summary.overall));
    s
}

/// Reads the reports present in the output directory and writes
/// `report.json` and `report.txt`.
pub fn emit_report(out: &mut Artifacts) -> Result<Summary, CliError> {
    let mut reports = Vec::new();
    for name in REPORT_FILES {
        let path = out.path(name);
        let Ok(text) = std::fs::read_to_string(&path) else {
            continue;
        };
        let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Runtime {
            module: "report",
            message: format!("{}: {e}", path.display()),
        })?;
        reports.push((name.to_string(), value));
    }
    let summary = summarize(&reports);
    out.json("report.json", &summary)?;
    out.text("report.txt", &render(&summary))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_set_gives_stub() {
        let s = summarize(&[]);
        assert_eq!(s.overall, "empty");
        assert!(s.passes());
        assert_eq!(render(&s), "no reports found\n");
    }

    #[test]
    fn one_failure_fails_overall() {
        let a = json!({"module": "validate", "passes": true, "checks": [{"name": "criticality", "passed": true, "detail": ""}]});
        let b = json!({"module": "transience", "passes": false, "checks": [{"name": "transient", "passed": false, "detail": "recurrent"}], "details": {"q_hat": null}});
        let s = summarize(&[("a".into(), a), ("b".into(), b)]);
        assert_eq!(s.overall, "fail");
        assert_eq!(s.rows.len(), 2);
        assert!(render(&s).contains("FAIL  transience"));
    }

    #[test]
    fn ledger_appears_with_both_pipelines() {
        let t = json!({"module": "transience", "checks": [], "details": {"q_hat": 0.3}});
        let h = json!({"module": "hierarchy", "checks": [], "details": {"stationary": {"converged": true, "rho": 1.0, "sup_k1": 1.0, "sup_k2": 1.4}}});
        let s = summarize(&[("t".into(), t), ("h".into(), h)]);
        let ledger = s.ledger.expect("ledger");
        assert!(ledger.all_within);
        assert_eq!(s.q_hat, Some(0.3));
    }
}
