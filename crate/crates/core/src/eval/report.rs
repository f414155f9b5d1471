use serde::{Deserialize, Serialize};

use super::{FlopsLedger, FlopsRow, MetricReport};

fn sci(v: f64) -> String {
    format!("{v:.2E}").replace('E', "E+")
}

/// Whether the printed reduction differs from the recomputed one once the
/// latter is rounded to the printed number of decimals.
pub fn printed_disagrees(r: &FlopsRow) -> bool {
    let text = r.published.to_string();
    let decimals = text.split_once('.').map_or(0, |(_, f)| f.len()) as i32;
    let k = 10f64.powi(decimals);
    ((r.reduction() * k).round() - (r.published * k).round()).abs() >= 1.0
}

/// Efficiency table with the recomputed reduction beside the printed one,
/// optionally followed by the desk model's own count.
pub fn flops_table(rows: &[FlopsRow], desk: Option<(&str, &FlopsLedger)>) -> String {
    let mut s = format!(
        "{:<20} {:>10} {:>10} {:>10} {:>14} {:>13} {:>9} {:>9}\n",
        "Model", "Params", "FLIP", "VICTOR", "FLIP+VICTOR", "VICTOR (E2E)", "% down", "printed"
    );
    for r in rows {
        let flag = if printed_disagrees(r) { " *" } else { "" };
        s += &format!(
            "{:<20} {:>10} {:>10} {:>10} {:>14} {:>13} {:>9.2} {:>9}{flag}\n",
            r.model,
            sci(r.parameters),
            sci(r.flip),
            sci(r.victor),
            sci(r.flip_plus_victor),
            sci(r.e2e),
            r.reduction(),
            r.published
        );
    }
    let mean = rows.iter().map(FlopsRow::reduction).sum::<f64>() / rows.len().max(1) as f64;
    s += &format!("mean reduction recomputed from the FLOP columns: {mean:.2}%\n");
    if rows.iter().any(printed_disagrees) {
        s += "* printed reduction differs from its own FLOP columns at the printed precision\n";
    }
    if let Some((label, l)) = desk {
        s += &format!(
            "\n{label}: {} forward / {} training FLOPs per outfit ({} tokens)\n",
            sci(l.forward as f64),
            sci(l.training as f64),
            l.tokens
        );
        for (k, v) in &l.components {
            s += &format!("  {k:<18} {}\n", sci(*v as f64));
        }
    }
    s
}

/// One configuration of an ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: MetricReport,
    pub selected_epoch: usize,
    /// Whether the row reports compatibility / item metrics.
    pub has_ocr: bool,
    pub has_mid: bool,
}

/// Comparison table with AUC, MAE, binary accuracy and exact match columns.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<26} {:>7} {:>7} {:>9} {:>9} {:>6}\n", "Model", "AUC", "MAE", "Acc %", "EM %", "epoch");
    let dash = || "-".to_string();
    for r in rows {
        let m = &r.metrics;
        s += &format!(
            "{:<26} {:>7} {:>7} {:>9} {:>9} {:>6}\n",
            r.label,
            m.auc.map_or_else(dash, |a| format!("{a:.4}")),
            if r.has_ocr { format!("{:.4}", m.mae) } else { dash() },
            if r.has_mid { format!("{:.2}", m.binary_accuracy) } else { dash() },
            if r.has_mid { format!("{:.2}", m.exact_match) } else { dash() },
            r.selected_epoch
        );
    }
    s
}
