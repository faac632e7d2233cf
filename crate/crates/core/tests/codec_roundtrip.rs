//! How much of an edge map survives encode then decode.

use std::collections::BTreeMap;

use ged_core::codec::AnalyticCodec;
use ged_core::dataset::{synth_sample, SynthConfig};
use ged_core::evaluation::{evaluate, precision_recall_f, GroundTruth, MatchConfig};

fn round_trip_scores() -> (f64, f64, f64) {
    let codec = AnalyticCodec::new();
    let mut preds = BTreeMap::new();
    let mut gts = Vec::new();
    for i in 0..8 {
        let s = synth_sample(7, i, &SynthConfig::default()).unwrap();
        let y = s.annotations[0].clone();
        let decoded = codec.decode_to_edge(&codec.encode_edge(&y).unwrap());
        assert_eq!(decoded.dim(), y.dim());
        // Sums survive the round trip.
        let (a, b) = (decoded.sum() as f64, y.iter().filter(|&&v| v != 0).count() as f64);
        assert!((a - b).abs() <= 1e-3 * b.max(1.0), "{a} vs {b}");
        preds.insert(s.id.clone(), decoded);
        gts.push(GroundTruth { id: s.id, maps: vec![y] });
    }
    let with_nms = evaluate(&preds, &gts, &MatchConfig::default()).unwrap();
    let raw_cfg = MatchConfig { apply_nms: false, n_thresholds: 1, ..MatchConfig::default() };
    let raw = evaluate(&preds, &gts, &raw_cfg).unwrap();
    let p = &raw.curve[0];
    let (_, _, f_half) = precision_recall_f(p.tp, p.tp + p.fp, p.fn_total);
    (with_nms.ods, with_nms.ap, f_half)
}

#[test]
fn round_trip_keeps_edges() {
    let (ods, ap, f_half) = round_trip_scores();
    println!("round trip: ODS {ods:.4} AP {ap:.4} F@0.5 without NMS {f_half:.4}");
    // Measured 0.764 / 0.698. Thin lines decode to about a quarter of full
    // intensity, so a fixed 0.5 threshold without NMS recovers almost nothing.
    assert!(ods >= 0.75, "ODS {ods}");
    assert!(ap >= 0.65, "AP {ap}");
    assert!(f_half < 0.1, "F@0.5 {f_half}");
}
