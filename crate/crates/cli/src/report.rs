//! CSV and stdout reporting: loss logs, retrieval/accuracy reports, and
//! mapping-matrix heatmap files.

use std::path::Path;

use clipmap_core::compress::ClipMaps;
use clipmap_core::eval::{heatmap_csv, RetrievalReport, RECALL_KS};
use clipmap_core::train::LossLogEntry;

use crate::checkpoint::write_atomic;
use crate::CliResult;

/// `step,stage,lr,task_loss,soft_loss,total_loss,grad_norm` with full
/// precision, one row per optimizer step.
pub fn loss_csv(log: &[LossLogEntry]) -> String {
    let mut out = String::from("step,stage,lr,task_loss,soft_loss,total_loss,grad_norm\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?}\n",
            e.step,
            e.stage.label(),
            e.lr,
            e.task_loss,
            e.soft_loss,
            e.total_loss,
            e.grad_norm
        ));
    }
    out
}

pub fn write_loss_csv(path: &Path, log: &[LossLogEntry]) -> CliResult<()> {
    write_atomic(path, loss_csv(log).as_bytes())
}

/// One heatmap CSV per mapping matrix, named `{tensor}_epoch{epoch}.csv`
/// with `.` replaced by `_` so names stay filesystem-friendly.
pub fn write_heatmaps(dir: &Path, maps: &ClipMaps<f64>, epoch: usize) -> CliResult<()> {
    for (name, t) in maps.named_tensors() {
        if t.shape().len() != 2 {
            continue;
        }
        let csv = heatmap_csv(&name, t, epoch)?;
        let fname = format!("{}_epoch{epoch}.csv", name.replace('.', "_"));
        write_atomic(&dir.join(fname), csv.as_bytes())?;
    }
    Ok(())
}

/// Human-readable retrieval/accuracy summary.
pub fn retrieval_table(report: &RetrievalReport) -> String {
    let mut out = format!("retrieval over {} held-out pairs\n", report.n_pairs);
    out.push_str("direction");
    for k in RECALL_KS {
        out.push_str(&format!(",R@{k}"));
    }
    out.push('\n');
    out.push_str(&format!(
        "image->text,{:.2},{:.2},{:.2}\n",
        report.tr[0], report.tr[1], report.tr[2]
    ));
    out.push_str(&format!(
        "text->image,{:.2},{:.2},{:.2}\n",
        report.ir[0], report.ir[1], report.ir[2]
    ));
    out
}

/// Machine-readable eval report CSV.
pub fn eval_csv(
    report: &RetrievalReport,
    zero_shot: &[f64],
    params: (usize, usize, usize),
) -> String {
    let mut out = String::from("metric,value\n");
    for (slot, k) in RECALL_KS.iter().enumerate() {
        out.push_str(&format!("tr_at_{k},{:?}\n", report.tr[slot]));
    }
    for (slot, k) in RECALL_KS.iter().enumerate() {
        out.push_str(&format!("ir_at_{k},{:?}\n", report.ir[slot]));
    }
    for (k, acc) in zero_shot.iter().enumerate() {
        out.push_str(&format!("zero_shot_acc_attr{k},{acc:?}\n"));
    }
    out.push_str(&format!("params_image,{}\n", params.0));
    out.push_str(&format!("params_text,{}\n", params.1));
    out.push_str(&format!("params_total,{}\n", params.2));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use clipmap_core::train::StageKind;

    #[test]
    fn loss_csv_shape() {
        let log = vec![LossLogEntry {
            step: 0,
            stage: StageKind::Mapping,
            lr: 0.0,
            task_loss: 1.5,
            soft_loss: 0.0,
            total_loss: 1.5,
            grad_norm: 2.25,
        }];
        let csv = loss_csv(&log);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,stage,lr,task_loss,soft_loss,total_loss,grad_norm"
        );
        assert_eq!(lines.next().unwrap(), "0,map,0.0,1.5,0.0,1.5,2.25");
        assert!(lines.next().is_none());
    }

    #[test]
    fn eval_csv_lists_all_metrics() {
        let rep = RetrievalReport { tr: [10.0, 50.0, 90.0], ir: [12.0, 55.0, 91.0], n_pairs: 64 };
        let csv = eval_csv(&rep, &[25.0, 30.0], (100, 200, 301));
        assert!(csv.contains("tr_at_1,10.0"));
        assert!(csv.contains("ir_at_10,91.0"));
        assert!(csv.contains("zero_shot_acc_attr1,30.0"));
        assert!(csv.contains("params_total,301"));
    }
}
