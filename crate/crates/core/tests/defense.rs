mod common;

use supforge::attack::PerturbationPair;
use supforge::defense::*;
use supforge::eval::{evaluate_attack, Attack};
use supforge::StereoNet;

use common::{small_net_config, small_samples};

fn fixtures() -> (Vec<(String, StereoNet)>, Vec<TaggedSup>) {
    let nets = (0..2)
        .map(|k| (format!("n{k}"), StereoNet::init(&small_net_config(k)).unwrap()))
        .collect();
    let sups = (0..3)
        .map(|k| {
            let mut sup = PerturbationPair::zeros(0.05, 16, 16);
            sup.left = sup.left.map(|_| 0.05 * (k as f64 - 1.0));
            TaggedSup {
                id: format!("s{k}"),
                source_net: format!("n{}", k % 2),
                sup,
            }
        })
        .collect();
    (nets, sups)
}

#[test]
fn transfer_matrix_shape_and_clean_column() {
    let (nets, sups) = fixtures();
    let data = small_samples(3, 11);
    let m = transfer_eval(&nets, &sups, &data, 1).unwrap();
    assert_eq!(m.cells.len(), 2);
    assert!(m.cells.iter().all(|row| row.len() == sups.len() + 1));
    for (r, (_, net)) in nets.iter().enumerate() {
        assert_eq!(
            m.clean(r),
            &evaluate_attack(net, &data, Attack::Clean, 1).unwrap().report
        );
    }
    assert_eq!(m.csv().lines().count(), 1 + 2 * 4);
    assert_eq!(m.rows("e").len(), 8);
}

#[test]
fn transfer_matrix_ignores_thread_count_and_order() {
    let (nets, sups) = fixtures();
    let data = small_samples(3, 11);
    let serial = transfer_eval(&nets, &sups, &data, 1).unwrap();
    assert_eq!(transfer_eval(&nets, &sups, &data, 4).unwrap(), serial);
    let reversed: Vec<_> = nets.iter().rev().cloned().collect();
    let r = transfer_eval(&reversed, &sups, &data, 2).unwrap();
    assert_eq!(r.cells[0], serial.cells[1]);
    assert_eq!(r.cells[1], serial.cells[0]);
}

#[test]
fn report_summary_mentions_every_row() {
    let (nets, sups) = fixtures();
    let data = small_samples(2, 11);
    let m = transfer_eval(&nets, &sups, &data, 1).unwrap();
    let report = AttackReport {
        experiment_id: "exp".into(),
        metadata: [("seed".to_string(), "1".to_string())].into(),
        rows: m.rows("exp"),
    };
    let summary = report.summary();
    assert!(summary.contains("seed = 1"));
    assert_eq!(summary.lines().count(), 2 + 8);
    assert_eq!(report.csv().lines().count(), 9);
}
