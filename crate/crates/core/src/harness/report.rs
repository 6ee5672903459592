use std::fmt::Write;

use super::commands::RunReport;

/// Human-readable summary of a run.
pub fn render(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run report\n");
    let _ = writeln!(s, "config hash `{}`, master seed {}\n", report.config_hash, report.master_seed);
    let _ = writeln!(s, "## Search efficiency\n");
    let _ = writeln!(s, "| reward | algorithm | h | omega vs bon |");
    let _ = writeln!(s, "|---|---|---|---|");
    for r in &report.rewards {
        for (alg, h) in &r.h {
            let _ = writeln!(s, "| {} | {} | {:.4} | {:+.4} |", r.reward, alg, h, r.omega[alg]);
        }
    }
    if let Some(k) = &report.kendall_noisiest {
        let _ = writeln!(s, "\n## Held-out Kendall tau, noisiest third of trained steps\n");
        let _ = writeln!(s, "| model | tau |");
        let _ = writeln!(s, "|---|---|");
        for (m, t) in k {
            let _ = writeln!(s, "| {m} | {t:.4} |");
        }
    }
    if let Some(d) = report.data_scaling.as_ref().filter(|d| !d.is_empty()) {
        let _ = writeln!(s, "\n## Data scaling\n");
        let _ = writeln!(s, "| train instances | mean tau |");
        let _ = writeln!(s, "|---|---|");
        for (n, t) in d {
            let _ = writeln!(s, "| {n} | {t:.4} |");
        }
    }
    s
}
