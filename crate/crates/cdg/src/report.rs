//! CSV outputs. Reals are written as the shortest decimal that round-trips the `f32` value.

use std::fmt::Write as _;

use cdg_core::metrics::MetricsReport;
use cdg_core::pipeline::EpochLog;

fn real(v: f64) -> f32 {
    v as f32
}

pub fn metrics_csv(r: &MetricsReport) -> String {
    let mut out = String::from("metric,value\n");
    let rows = [
        ("pixel_acc", r.pixel_acc),
        ("mean_acc", r.mean_acc),
        ("mean_iou", r.mean_iou),
        ("fg_acc", r.fg_acc),
        ("precision", r.precision),
        ("recall", r.recall),
        ("f1", r.f1),
    ];
    for (name, v) in rows {
        writeln!(out, "{name},{}", real(v)).expect("writing to a String");
    }
    for (c, v) in r.per_class_iou.iter().enumerate() {
        writeln!(out, "iou_{c},{}", real(*v)).expect("writing to a String");
    }
    out
}

pub const LOG_HEADER: &str = "epoch,lr,total,parsing,edge,cdg,train_miou\n";

pub fn log_row(l: &EpochLog) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        l.epoch,
        real(l.lr),
        real(l.total),
        real(l.parsing),
        real(l.edge),
        real(l.cdg),
        real(l.train_miou)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use cdg_core::labels::LabelMap;
    use cdg_core::metrics::evaluate;

    #[test]
    fn metrics_rows() {
        let pred = LabelMap::new(2, 2, 2, vec![0, 1, 1, 1]).unwrap();
        let gt = LabelMap::new(2, 2, 2, vec![0, 1, 0, 1]).unwrap();
        let csv = metrics_csv(&evaluate(&pred, &gt, 2).unwrap());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,value");
        assert_eq!(lines[1], "pixel_acc,0.75");
        assert_eq!(lines[3], "mean_iou,0.5833333");
        assert_eq!(lines[8..], ["iou_0,0.5", "iou_1,0.6666667"]);
    }

    #[test]
    fn log_rows() {
        let l = EpochLog {
            epoch: 2,
            lr: 3e-3,
            total: 1.5,
            parsing: 1.0,
            edge: 0.0,
            cdg: 0.0125,
            train_miou: 0.25,
        };
        assert_eq!(log_row(&l), "2,0.003,1.5,1,0,0.0125,0.25\n");
    }
}
