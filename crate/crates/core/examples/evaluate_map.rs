//! Scores hand-made predictions with OKS-based mAP and PCK.

use cdapose::eval::{map_score, pck, GroundTruth, OksParams, ScoredPose};
use cdapose::{Keypoint, Pose};

fn pose(points: &[(f64, f64)]) -> Pose {
    Pose::new("toy", points.iter().map(|&(x, y)| Keypoint::new(x, y, 2)).collect())
}

fn main() -> cdapose::Result<()> {
    let truth = [pose(&[(10.0, 10.0), (20.0, 12.0), (30.0, 30.0)]), pose(&[(50.0, 40.0), (60.0, 48.0), (58.0, 70.0)])];
    let bbox = [[5.0, 5.0, 30.0, 30.0], [45.0, 35.0, 20.0, 40.0]];

    // one close guess, one shifted guess, one spurious detection in image 0
    let preds = vec![
        vec![
            ScoredPose { pose: pose(&[(11.0, 10.0), (20.0, 13.0), (29.0, 31.0)]), score: 0.9 },
            ScoredPose { pose: pose(&[(40.0, 40.0), (41.0, 41.0), (42.0, 42.0)]), score: 0.3 },
        ],
        vec![ScoredPose { pose: pose(&[(53.0, 42.0), (63.0, 45.0), (55.0, 74.0)]), score: 0.7 }],
    ];
    let gts: Vec<Vec<GroundTruth>> = truth.iter().zip(&bbox).map(|(p, b)| vec![GroundTruth::new(p.clone(), Some(*b))]).collect();

    let params = OksParams { k: vec![0.3; 3], ..OksParams::coco17() };
    let m = map_score(&preds, &gts, &params)?;
    println!("mAP {:.3}", m.map);
    for (t, ap) in &m.per_threshold {
        println!("  AP@{t:.2} {ap:.3}");
    }

    let best: Vec<Pose> = preds.iter().map(|p| p[0].pose.clone()).collect();
    let boxes: Vec<Option<[f64; 4]>> = bbox.iter().map(|b| Some(*b)).collect();
    println!("PCK@0.2 {:.3}", pck(&best, &truth, &boxes, 0.2)?);
    Ok(())
}
