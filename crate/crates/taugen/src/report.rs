//! Markdown rendering of evaluation reports.

use std::fmt::Write;

use taugen_core::eval::EvalReport;

pub fn markdown(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} report\n", r.kind);
    let _ = writeln!(s, "Overall: **{}**\n", if r.passed() { "PASS" } else { "FAIL" });
    let _ = writeln!(s, "| check | value | relation | threshold | result |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for c in &r.checks {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {} | {} | {} |",
            c.name,
            c.value,
            c.relation,
            c.threshold,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(sw) = &r.sweep {
        let _ = writeln!(s, "\n## MMSE sweep ({} paired sweeps)\n", sw.sweeps);
        let _ = writeln!(s, "| MMSE | mean cortical uptake |");
        let _ = writeln!(s, "|---|---|");
        for (m, u) in sw.mmse_list.iter().zip(&sw.mean_uptake) {
            let _ = writeln!(s, "| {m} | {u:.4} |");
        }
        let _ = writeln!(s, "\nSpearman rho (mean per sweep): {:.4}", sw.spearman_rho);
        let _ = writeln!(s, "Spearman rho (pooled): {:.4}", sw.pooled_spearman_rho);
        let _ = writeln!(s, "Win rate, lowest vs highest MMSE: {:.4}", sw.win_rate);
    }
    if let Some(a) = &r.ablation {
        let _ = writeln!(s, "\n## MR ablation ({} subjects x {} seeds)\n", a.subjects, a.seeds_per_subject);
        let _ = writeln!(s, "| model | brain Dice | edge correlation |");
        let _ = writeln!(s, "|---|---|---|");
        let _ = writeln!(s, "| text + MR | {:.4} | {:.4} |", a.dice_mr, a.edge_corr_mr);
        let _ = writeln!(s, "| text only | {:.4} | {:.4} |", a.dice_text, a.edge_corr_text);
        let _ = writeln!(s, "| text only, shuffled MR | {:.4} | |", a.dice_text_shuffled);
    }
    let _ = writeln!(s, "\n## Configuration\n");
    for (k, v) in &r.config {
        let _ = writeln!(s, "- {k}: {v}");
    }
    let _ = writeln!(s, "\n{} per-sample records are in the JSON report.", r.records.len());
    s
}
